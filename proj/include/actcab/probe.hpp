#pragma once

// Linear calibration probe over mean-pooled activations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <span>
#include <string>

#include "json.hpp"

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"

namespace actcab {

/// Logistic function, split by sign of z so exp never overflows. The result is
/// kept strictly inside (0, 1).
inline double sigmoid(double z) {
    double p;
    if (z >= 0.0) {
        p = 1.0 / (1.0 + std::exp(-z));
    } else {
        double e = std::exp(z);
        p = e / (1.0 + e);
    }
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = std::nextafter(1.0, 0.0);
    return std::clamp(p, lo, hi);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    detail::require(a.size() == b.size(), ErrorKind::Shape,
                    "dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Element-wise running mean; a sequence of identical vectors pools to that vector exactly.
inline Vector mean_pool(const ActivationSequence& acts) {
    detail::require(!acts.empty(), ErrorKind::EmptyResponse, "a response must contain at least one token");
    Vector mean(acts.dim(), 0.0);
    std::size_t n = 0;
    for (const auto& v : acts) {
        ++n;
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (v[i] - mean[i]) / static_cast<double>(n);
    }
    return mean;
}

struct Probe {
    Vector weights;
    double bias = 0.0;

    static constexpr int kFormatVersion = 1;

    static Probe zeros(std::size_t dim) { return Probe{Vector(dim, 0.0), 0.0}; }

    [[nodiscard]] std::size_t dim() const noexcept { return weights.size(); }

    [[nodiscard]] double logit(std::span<const double> v) const { return dot(weights, v) + bias; }

    friend bool operator==(const Probe&, const Probe&) = default;
};

inline double probe_confidence(const Probe& probe, std::span<const double> v) {
    return sigmoid(probe.logit(v));
}

inline double response_confidence(const Probe& probe, const ActivationSequence& acts) {
    detail::require(acts.dim() == probe.dim(), ErrorKind::Shape,
                    "probe dimension " + std::to_string(probe.dim()) + " does not match activations " +
                        std::to_string(acts.dim()));
    return probe_confidence(probe, mean_pool(acts));
}

inline nlohmann::ordered_json probe_to_json(const Probe& probe) {
    nlohmann::ordered_json j;
    j["format"] = "actcab.probe";
    j["version"] = Probe::kFormatVersion;
    j["d"] = probe.dim();
    auto w = nlohmann::ordered_json::array();
    for (double x : probe.weights) w.push_back(detail::format_double(x));
    j["W"] = std::move(w);
    j["B"] = detail::format_double(probe.bias);
    return j;
}

namespace detail {

inline double probe_number(const nlohmann::json& j, const std::string& what) {
    double value;
    if (j.is_string()) {
        auto parsed = parse_double(j.get<std::string>());
        require(parsed.has_value(), ErrorKind::Load, what + " is not a decimal number");
        value = *parsed;
    } else if (j.is_number()) {
        value = j.get<double>();
    } else {
        fail(ErrorKind::Load, what + " must be a number or decimal string");
    }
    require(std::isfinite(value), ErrorKind::Load, what + " is not finite");
    return value;
}

}  // namespace detail

inline Probe probe_from_json(const nlohmann::json& j) {
    try {
        detail::require(j.is_object(), ErrorKind::Load, "probe document must be an object");
        detail::require(j.at("version").get<int>() == Probe::kFormatVersion, ErrorKind::Load, "unsupported probe version");
        auto d = j.at("d").get<std::size_t>();
        detail::require(d >= 1, ErrorKind::Load, "probe dimension must be >= 1");
        const auto& w = j.at("W");
        detail::require(w.is_array() && w.size() == d, ErrorKind::Load,
                        "declared d=" + std::to_string(d) + " but W has " + std::to_string(w.size()) + " entries");
        Probe probe;
        for (std::size_t i = 0; i < d; ++i) probe.weights.push_back(detail::probe_number(w[i], "W[" + std::to_string(i) + "]"));
        probe.bias = detail::probe_number(j.at("B"), "B");
        return probe;
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, std::string("malformed probe document: ") + e.what());
    }
}

inline void save_probe(const Probe& probe, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    detail::require(static_cast<bool>(out), ErrorKind::Load, "cannot open '" + path + "' for writing");
    out << probe_to_json(probe).dump(2) << '\n';
}

inline Probe load_probe(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require(static_cast<bool>(in), ErrorKind::Load, "cannot open probe file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, "probe file '" + path + "' is not valid JSON: " + e.what());
    }
    return probe_from_json(j);
}

}  // namespace actcab
