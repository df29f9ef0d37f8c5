#pragma once

// Mini-batch gradient-descent training of the probe under the MSE loss (binary
// targets) or the ECE loss (soft targets built from cross-validated bin
// accuracies).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"
#include "actcab/metrics.hpp"
#include "actcab/probe.hpp"

namespace actcab {

enum class LossKind { MSE, ECE };

inline const char* to_string(LossKind kind) { return kind == LossKind::MSE ? "mse" : "ece"; }

struct LabeledInstance {
    std::string id;
    Vector pooled;
    int hard_label = 0;
    std::optional<double> soft_label;
};

struct TrainConfig {
    LossKind loss = LossKind::MSE;
    std::size_t epochs = 100;
    std::size_t batch_size = 128;
    double learning_rate = 1e-5;
    std::size_t folds = 5;
    std::size_t n_bins = 10;
    double validation_fraction = 0.2;
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
    using detail::require;
    require(cfg.epochs >= 1, ErrorKind::InvalidParameter, "epochs must be >= 1");
    require(cfg.batch_size >= 1, ErrorKind::InvalidParameter, "batch size must be >= 1");
    require(cfg.learning_rate > 0.0 && std::isfinite(cfg.learning_rate), ErrorKind::InvalidParameter,
            "learning rate must be > 0");
    require(cfg.folds >= 2, ErrorKind::InvalidParameter, "K must be >= 2");
    require(cfg.n_bins >= 1, ErrorKind::InvalidParameter, "n_bins must be >= 1");
    require(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0, ErrorKind::InvalidParameter,
            "validation fraction must be in (0, 1)");
}

struct FoldAssignment {
    std::vector<std::size_t> fold_of;
    std::size_t k = 0;
};

/// Shuffled partition of `n` items into `k` folds whose sizes differ by at most one.
inline FoldAssignment split_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
    detail::require(k >= 2, ErrorKind::InvalidParameter, "K must be >= 2");
    detail::require(k <= n, ErrorKind::InvalidParameter,
                    "K=" + std::to_string(k) + " exceeds the number of instances (" + std::to_string(n) + ")");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::derive_seed(seed, {0x666f6c6473ULL}));
    std::shuffle(order.begin(), order.end(), rng);
    FoldAssignment fa{std::vector<std::size_t>(n), k};
    for (std::size_t pos = 0; pos < n; ++pos) fa.fold_of[order[pos]] = pos % k;
    return fa;
}

struct LossGradient {
    double loss = 0.0;
    Vector grad_w;
    double grad_b = 0.0;
};

inline double target_of(const LabeledInstance& inst, LossKind kind) {
    if (kind == LossKind::MSE) return static_cast<double>(inst.hard_label);
    detail::require(inst.soft_label.has_value(), ErrorKind::InvalidParameter,
                    "instance '" + inst.id + "' has no soft label; build soft labels before ECE training");
    return *inst.soft_label;
}

namespace detail {

template <class Pick>
LossGradient accumulate_loss(const Probe& probe, std::size_t count, LossKind kind, Pick&& pick) {
    require(count > 0, ErrorKind::InvalidParameter, "empty batch");
    LossGradient out{0.0, Vector(probe.dim(), 0.0), 0.0};
    for (std::size_t k = 0; k < count; ++k) {
        const LabeledInstance& inst = pick(k);
        double t = target_of(inst, kind);
        double p = probe_confidence(probe, inst.pooled);
        double r = p - t;
        out.loss += r * r;
        double g = 2.0 * r * p * (1.0 - p);
        for (std::size_t i = 0; i < out.grad_w.size(); ++i) out.grad_w[i] += g * inst.pooled[i];
        out.grad_b += g;
    }
    double inv = 1.0 / static_cast<double>(count);
    out.loss *= inv;
    for (double& g : out.grad_w) g *= inv;
    out.grad_b *= inv;
    return out;
}

}  // namespace detail

/// Mean squared residual between target and σ(W·v+B), with its analytic gradient.
inline LossGradient loss_and_gradient(const Probe& probe, std::span<const LabeledInstance> batch, LossKind kind) {
    return detail::accumulate_loss(probe, batch.size(), kind, [&](std::size_t k) -> const LabeledInstance& { return batch[k]; });
}

inline double mean_loss(const Probe& probe, std::span<const LabeledInstance> data, LossKind kind) {
    return loss_and_gradient(probe, data, kind).loss;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> validation_loss;
};

struct TrainResult {
    Probe probe;
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
    std::size_t n_train = 0;
    std::size_t n_validation = 0;
};

namespace detail {

inline void validate_instances(std::span<const LabeledInstance> instances, LossKind kind) {
    require(!instances.empty(), ErrorKind::InvalidParameter, "no training instances");
    const auto d = instances.front().pooled.size();
    require(d >= 1, ErrorKind::Shape, "pooled activations must have dimension >= 1");
    for (const auto& inst : instances) {
        require(inst.pooled.size() == d, ErrorKind::Shape, "instance '" + inst.id + "' has inconsistent dimension");
        require(all_finite(inst.pooled), ErrorKind::InvalidParameter, "instance '" + inst.id + "' has non-finite activations");
        require(inst.hard_label == 0 || inst.hard_label == 1, ErrorKind::InvalidParameter, "hard labels must be 0 or 1");
        if (inst.soft_label)
            require(*inst.soft_label >= 0.0 && *inst.soft_label <= 1.0, ErrorKind::InvalidParameter,
                    "soft label outside [0, 1]");
        if (kind == LossKind::ECE)
            require(inst.soft_label.has_value(), ErrorKind::InvalidParameter,
                    "instance '" + inst.id + "' has no soft label; build soft labels before ECE training");
    }
}

}  // namespace detail

/// Trains from a zero probe and returns the parameters with the best
/// validation loss seen at the end of any epoch.
inline TrainResult fit_probe(std::span<const LabeledInstance> instances, const TrainConfig& cfg) {
    validate(cfg);
    detail::validate_instances(instances, cfg.loss);
    const auto n = instances.size();
    const auto d = instances.front().pooled.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 split_rng(detail::derive_seed(cfg.seed, {0x73706c6974ULL}));
    std::shuffle(order.begin(), order.end(), split_rng);
    auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
    n_val = std::min(n_val, n - 1);

    std::vector<LabeledInstance> val, train;
    for (std::size_t i = 0; i < n; ++i) (i < n_val ? val : train).push_back(instances[order[i]]);

    TrainResult result;
    result.n_train = train.size();
    result.n_validation = val.size();
    Probe probe = Probe::zeros(d);
    double best = std::numeric_limits<double>::infinity();
    result.probe = probe;

    std::mt19937_64 epoch_rng(detail::derive_seed(cfg.seed, {0x65706f6368ULL}));
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), epoch_rng);
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            auto stop = std::min(start + cfg.batch_size, idx.size());
            auto lg = detail::accumulate_loss(probe, stop - start, cfg.loss,
                                              [&](std::size_t k) -> const LabeledInstance& { return train[idx[start + k]]; });
            for (std::size_t j = 0; j < d; ++j) probe.weights[j] -= cfg.learning_rate * lg.grad_w[j];
            probe.bias -= cfg.learning_rate * lg.grad_b;
        }
        EpochRecord rec{epoch, mean_loss(probe, train, cfg.loss), std::nullopt};
        if (!val.empty()) rec.validation_loss = mean_loss(probe, val, cfg.loss);
        double score = rec.validation_loss.value_or(rec.train_loss);
        if (score < best) {
            best = score;
            result.probe = probe;
            result.best_epoch = epoch;
        }
        result.curve.push_back(rec);
    }
    return result;
}

inline Probe train_probe(std::span<const LabeledInstance> instances, const TrainConfig& cfg) {
    return fit_probe(instances, cfg).probe;
}

/// Held-out confidence of every instance from K fold-probes trained with the MSE loss.
inline std::vector<double> cross_validated_confidences(std::span<const LabeledInstance> instances, const TrainConfig& cfg,
                                                       const FoldAssignment& folds) {
    validate(cfg);
    detail::validate_instances(instances, LossKind::MSE);
    detail::require(folds.fold_of.size() == instances.size(), ErrorKind::InvalidParameter,
                    "fold assignment does not match the dataset");
    TrainConfig fold_cfg = cfg;
    fold_cfg.loss = LossKind::MSE;
    std::vector<double> conf(instances.size(), 0.0);
    for (std::size_t f = 0; f < folds.k; ++f) {
        std::vector<LabeledInstance> rest;
        for (std::size_t i = 0; i < instances.size(); ++i)
            if (folds.fold_of[i] != f) rest.push_back(instances[i]);
        fold_cfg.seed = detail::derive_seed(cfg.seed, {0x63765f666f6c64ULL, f});
        auto probe = train_probe(rest, fold_cfg);
        for (std::size_t i = 0; i < instances.size(); ++i)
            if (folds.fold_of[i] == f) conf[i] = probe_confidence(probe, instances[i].pooled);
    }
    return conf;
}

/// Soft label of each instance: accuracy of the equal-width confidence bin it falls in.
inline std::vector<double> bin_accuracy_labels(std::span<const double> confidences, std::span<const int> hard_labels,
                                               std::size_t n_bins) {
    detail::require(confidences.size() == hard_labels.size(), ErrorKind::Shape, "confidence/label count mismatch");
    std::vector<double> correct(n_bins, 0.0);
    std::vector<std::size_t> count(n_bins, 0);
    std::vector<std::size_t> bin(confidences.size());
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        bin[i] = bin_index(confidences[i], n_bins);
        ++count[bin[i]];
        correct[bin[i]] += hard_labels[i];
    }
    std::vector<double> soft(confidences.size());
    for (std::size_t i = 0; i < confidences.size(); ++i) soft[i] = correct[bin[i]] / static_cast<double>(count[bin[i]]);
    return soft;
}

struct SoftLabelResult {
    std::vector<LabeledInstance> instances;
    std::vector<double> held_out_confidences;
    FoldAssignment folds;
};

inline SoftLabelResult build_soft_labels_detailed(std::span<const LabeledInstance> instances, const TrainConfig& cfg) {
    validate(cfg);
    detail::validate_instances(instances, LossKind::MSE);
    SoftLabelResult out;
    out.folds = split_folds(instances.size(), cfg.folds, cfg.seed);
    out.held_out_confidences = cross_validated_confidences(instances, cfg, out.folds);
    std::vector<int> hard;
    for (const auto& inst : instances) hard.push_back(inst.hard_label);
    auto soft = bin_accuracy_labels(out.held_out_confidences, hard, cfg.n_bins);
    out.instances.assign(instances.begin(), instances.end());
    for (std::size_t i = 0; i < soft.size(); ++i) out.instances[i].soft_label = soft[i];
    return out;
}

inline std::vector<LabeledInstance> build_soft_labels(std::span<const LabeledInstance> instances, const TrainConfig& cfg) {
    return build_soft_labels_detailed(instances, cfg).instances;
}

}  // namespace actcab
