#pragma once

// Run manifests: canonical argv, resolved config, seeds, and SHA-256 of every
// input and output, so a run can be replayed and checked byte for byte.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "actcab/errors.hpp"

namespace actcab::cli {

namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        detail::fail(ErrorKind::Internal, "SHA-256 computation failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    detail::require(static_cast<bool>(in), ErrorKind::Load, "cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file(p)); }

class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> argv, fs::path out_dir)
        : command_(std::move(command)), argv_(std::move(argv)), out_(std::move(out_dir)) {}

    nlohmann::ordered_json& config() { return config_; }
    nlohmann::ordered_json& seeds() { return seeds_; }
    nlohmann::ordered_json& summary() { return summary_; }

    void input(const std::string& role, const fs::path& path) {
        inputs_.push_back({{"role", role}, {"path", path.string()}, {"sha256", sha256_file(path)}});
    }

    /// Writes `name` under the out directory and records its hash.
    void output(const std::string& name, const std::string& bytes) {
        auto path = out_ / name;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        detail::require(static_cast<bool>(out), ErrorKind::Load, "cannot write '" + path.string() + "'");
        out << bytes;
        out.close();
        detail::require(static_cast<bool>(out), ErrorKind::Load, "failed writing '" + path.string() + "'");
        outputs_.push_back({{"path", name}, {"sha256", sha256_hex(bytes)}});
    }

    [[nodiscard]] fs::path path() const { return out_ / (command_ + ".manifest.json"); }

    void write() const {
        nlohmann::ordered_json j{{"format", "actcab.manifest"},
                                 {"version", 1},
                                 {"command", command_},
                                 {"argv", argv_},
                                 {"config", config_},
                                 {"seeds", seeds_},
                                 {"inputs", inputs_},
                                 {"outputs", outputs_},
                                 {"summary", summary_}};
        std::ofstream out(path(), std::ios::binary | std::ios::trunc);
        detail::require(static_cast<bool>(out), ErrorKind::Load, "cannot write '" + path().string() + "'");
        out << j.dump(2) << '\n';
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    fs::path out_;
    nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
    nlohmann::ordered_json seeds_ = nlohmann::ordered_json::object();
    nlohmann::ordered_json inputs_ = nlohmann::ordered_json::array();
    nlohmann::ordered_json outputs_ = nlohmann::ordered_json::array();
    nlohmann::ordered_json summary_ = nlohmann::ordered_json::object();
};

}  // namespace actcab::cli
