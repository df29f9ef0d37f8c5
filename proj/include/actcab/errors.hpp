#pragma once

#include <stdexcept>
#include <string>

namespace actcab {

enum class ErrorKind {
    InvalidParameter,
    InvalidSpec,
    Shape,
    MalformedModel,
    EmptyResponse,
    Load,
    Judge,
    Internal,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidParameter: return "invalid parameter";
        case ErrorKind::InvalidSpec: return "invalid spec";
        case ErrorKind::Shape: return "shape error";
        case ErrorKind::MalformedModel: return "malformed language model";
        case ErrorKind::EmptyResponse: return "empty response";
        case ErrorKind::Load: return "load error";
        case ErrorKind::Judge: return "judge error";
        case ErrorKind::Internal: return "internal invariant violated";
    }
    return "error";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

    /// True for errors caused by bad user input rather than a failure while running.
    [[nodiscard]] bool is_validation() const noexcept {
        return kind_ == ErrorKind::InvalidParameter || kind_ == ErrorKind::InvalidSpec ||
               kind_ == ErrorKind::Shape || kind_ == ErrorKind::Load ||
               kind_ == ErrorKind::EmptyResponse;
    }

private:
    ErrorKind kind_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) fail(kind, what);
}

}  // namespace detail
}  // namespace actcab
