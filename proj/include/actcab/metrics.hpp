#pragma once

// Calibration metrics (ECE, Brier, reliability bins) and the logit-based
// baselines: sequence likelihood and temperature scaling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"

namespace actcab {

struct Prediction {
    double confidence = 0.0;
    int correct = 0;
};

/// Lower edge of bin `i` out of `n_bins` equal-width bins over [0, 1].
inline double bin_edge(std::size_t i, std::size_t n_bins) {
    return static_cast<double>(i) / static_cast<double>(n_bins);
}

/// Bins are [lo, hi) except the last, which is closed: [lo, 1].
inline std::size_t bin_index(double confidence, std::size_t n_bins) {
    detail::require(n_bins >= 1, ErrorKind::InvalidParameter, "n_bins must be >= 1");
    detail::require(confidence >= 0.0 && confidence <= 1.0, ErrorKind::Internal,
                    "confidence " + detail::format_double(confidence) + " outside [0, 1]");
    auto idx = static_cast<std::size_t>(std::floor(confidence * static_cast<double>(n_bins)));
    idx = std::min(idx, n_bins - 1);
    // floor(c * n) can land one bin off the exact edges i/n.
    while (idx > 0 && confidence < bin_edge(idx, n_bins)) --idx;
    while (idx + 1 < n_bins && confidence >= bin_edge(idx + 1, n_bins)) ++idx;
    return idx;
}

struct ReliabilityBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct ReliabilityBins {
    std::vector<ReliabilityBin> bins;
    std::size_t n = 0;

    [[nodiscard]] std::size_t n_bins() const noexcept { return bins.size(); }
};

namespace detail {

inline void validate_predictions(std::span<const Prediction> preds) {
    require(!preds.empty(), ErrorKind::InvalidParameter, "no predictions");
    for (const auto& p : preds) {
        require(p.confidence >= 0.0 && p.confidence <= 1.0, ErrorKind::InvalidParameter,
                "confidence " + format_double(p.confidence) + " outside [0, 1]");
        require(p.correct == 0 || p.correct == 1, ErrorKind::InvalidParameter, "correctness must be 0 or 1");
    }
}

}  // namespace detail

inline ReliabilityBins reliability_bins(std::span<const Prediction> preds, std::size_t n_bins = 10) {
    detail::require(n_bins >= 1, ErrorKind::InvalidParameter, "n_bins must be >= 1");
    detail::validate_predictions(preds);
    ReliabilityBins out;
    out.n = preds.size();
    out.bins.resize(n_bins);
    std::vector<double> conf_sum(n_bins, 0.0), correct_sum(n_bins, 0.0);
    for (const auto& p : preds) {
        auto b = bin_index(p.confidence, n_bins);
        ++out.bins[b].count;
        conf_sum[b] += p.confidence;
        correct_sum[b] += p.correct;
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
        auto& bin = out.bins[b];
        bin.lo = bin_edge(b, n_bins);
        bin.hi = bin_edge(b + 1, n_bins);
        if (bin.count > 0) {
            bin.mean_confidence = conf_sum[b] / static_cast<double>(bin.count);
            bin.accuracy = correct_sum[b] / static_cast<double>(bin.count);
        }
    }
    return out;
}

/// Weighted mean of |accuracy - confidence| over non-empty bins.
inline double ece(const ReliabilityBins& rb) {
    double total = 0.0;
    for (const auto& bin : rb.bins)
        if (bin.count > 0)
            total += static_cast<double>(bin.count) / static_cast<double>(rb.n) * std::abs(bin.accuracy - bin.mean_confidence);
    return total;
}

inline double ece(std::span<const Prediction> preds, std::size_t n_bins = 10) {
    return ece(reliability_bins(preds, n_bins));
}

inline double brier(std::span<const Prediction> preds) {
    detail::validate_predictions(preds);
    double total = 0.0;
    for (const auto& p : preds) {
        double diff = p.confidence - p.correct;
        total += diff * diff;
    }
    return total / static_cast<double>(preds.size());
}

inline double accuracy(std::span<const Prediction> preds) {
    detail::validate_predictions(preds);
    double correct = 0.0;
    for (const auto& p : preds) correct += p.correct;
    return correct / static_cast<double>(preds.size());
}

struct MetricSummary {
    double ece = 0.0;
    double brier = 0.0;
    double accuracy = 0.0;
    std::size_t n = 0;
};

inline MetricSummary summarize(std::span<const Prediction> preds, std::size_t n_bins = 10) {
    return MetricSummary{ece(preds, n_bins), brier(preds), accuracy(preds), preds.size()};
}

inline nlohmann::ordered_json to_json(const MetricSummary& m) {
    return nlohmann::ordered_json{{"ece", m.ece}, {"brier", m.brier}, {"accuracy", m.accuracy}, {"n", m.n}};
}

inline void write_reliability_csv(std::ostream& out, const ReliabilityBins& rb) {
    out << "bin_lo,bin_hi,count,mean_conf,accuracy\n";
    for (const auto& bin : rb.bins) {
        out << detail::format_double(bin.lo) << ',' << detail::format_double(bin.hi) << ',' << bin.count << ','
            << detail::format_double(bin.mean_confidence) << ',' << detail::format_double(bin.accuracy) << '\n';
    }
}

/// Geometric mean of token probabilities; any zero probability gives 0.
inline double sequence_likelihood(std::span<const double> token_probs) {
    detail::require(!token_probs.empty(), ErrorKind::InvalidParameter, "no token probabilities");
    double log_sum = 0.0;
    for (double p : token_probs) {
        detail::require(p >= 0.0 && p <= 1.0, ErrorKind::InvalidParameter,
                        "token probability " + detail::format_double(p) + " outside [0, 1]");
        if (p == 0.0) return 0.0;
        log_sum += std::log(p);
    }
    return std::exp(log_sum / static_cast<double>(token_probs.size()));
}

// --- temperature scaling ---------------------------------------------------

struct LogitObservation {
    std::vector<double> logits;
    std::size_t observed = 0;
};

struct TemperatureOptions {
    double step = 0.5;
    double tolerance = 1e-6;
    std::size_t max_iterations = 100000;
    double max_log_step = 1.0;
};

inline std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
    detail::require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::InvalidParameter, "temperature must be > 0");
    double mx = -std::numeric_limits<double>::infinity();
    for (double z : logits) mx = std::max(mx, z / temperature);
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] / temperature - mx);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return out;
}

/// Mean negative log-likelihood of the observed indices under softmax(z / T).
inline double temperature_nll(std::span<const LogitObservation> data, double temperature) {
    double total = 0.0;
    for (const auto& obs : data) {
        double mx = -std::numeric_limits<double>::infinity();
        for (double z : obs.logits) mx = std::max(mx, z / temperature);
        double s = 0.0;
        for (double z : obs.logits) s += std::exp(z / temperature - mx);
        total += -(obs.logits[obs.observed] / temperature) + mx + std::log(s);
    }
    return total / static_cast<double>(data.size());
}

/// Fits T by gradient descent on log T, minimizing the mean NLL.
inline double fit_temperature(std::span<const LogitObservation> data, const TemperatureOptions& opts = {}) {
    detail::require(!data.empty(), ErrorKind::InvalidParameter, "no logit observations");
    for (const auto& obs : data) {
        detail::require(obs.logits.size() >= 2, ErrorKind::InvalidParameter, "temperature fitting needs at least two classes");
        detail::require(obs.observed < obs.logits.size(), ErrorKind::InvalidParameter, "observed index out of range");
        detail::require(detail::all_finite(obs.logits), ErrorKind::InvalidParameter, "logits must be finite");
    }
    double log_t = 0.0;
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
        double t = std::exp(log_t);
        // d NLL / d log T = (z_obs - E_p[z]) / T, averaged.
        double grad = 0.0;
        for (const auto& obs : data) {
            auto p = softmax_with_temperature(obs.logits, t);
            double expected = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) expected += p[i] * obs.logits[i];
            grad += (obs.logits[obs.observed] - expected) / t;
        }
        grad /= static_cast<double>(data.size());
        if (std::abs(grad) < opts.tolerance) break;
        log_t -= std::clamp(opts.step * grad, -opts.max_log_step, opts.max_log_step);
    }
    return std::exp(log_t);
}

}  // namespace actcab
