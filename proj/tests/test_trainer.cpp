#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "support.hpp"

using namespace actcab;

namespace {

std::vector<LabeledInstance> gaussian_instances(std::mt19937_64& rng, std::size_t n, std::size_t d, double sep = 1.0) {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::vector<LabeledInstance> out;
    for (std::size_t i = 0; i < n; ++i) {
        int y = coin(rng);
        Vector v(d);
        for (auto& x : v) x = noise(rng);
        v[0] += y ? sep : -sep;
        out.push_back({"i" + std::to_string(i), v, y, std::nullopt});
    }
    return out;
}

double naive_loss(const Probe& p, const std::vector<LabeledInstance>& batch, LossKind kind) {
    double s = 0.0;
    for (const auto& inst : batch) {
        double z = p.bias;
        for (std::size_t j = 0; j < p.weights.size(); ++j) z += p.weights[j] * inst.pooled[j];
        double prob = 1.0 / (1.0 + std::exp(-z));
        double t = kind == LossKind::MSE ? inst.hard_label : *inst.soft_label;
        s += (t - prob) * (t - prob);
    }
    return s / static_cast<double>(batch.size());
}

bool close_relative(double a, double b, double rel) {
    return std::fabs(a - b) <= rel * std::max({std::fabs(a), std::fabs(b), 1e-8});
}

}  // namespace

TEST(SplitFolds, ExactDivision) {
    auto fa = split_folds(10, 5, 3);
    std::vector<int> sizes(5, 0);
    for (auto f : fa.fold_of) {
        ASSERT_LT(f, 5u);
        ++sizes[f];
    }
    EXPECT_EQ(sizes, std::vector<int>(5, 2));
}

TEST(SplitFolds, Remainder) {
    auto fa = split_folds(7, 3, 3);
    std::vector<int> sizes(3, 0);
    for (auto f : fa.fold_of) ++sizes[f];
    std::sort(sizes.begin(), sizes.end());
    EXPECT_EQ(sizes, (std::vector<int>{2, 2, 3}));
}

TEST(SplitFolds, DeterministicAndValidated) {
    EXPECT_EQ(split_folds(50, 5, 9).fold_of, split_folds(50, 5, 9).fold_of);
    EXPECT_NE(split_folds(50, 5, 9).fold_of, split_folds(50, 5, 10).fold_of);
    EXPECT_THROW((void)split_folds(3, 5, 0), Error);
    EXPECT_THROW((void)split_folds(10, 1, 0), Error);
}

TEST(SplitFolds, SizesDifferByAtMostOne) {
    for (std::size_t n = 2; n < 60; ++n)
        for (std::size_t k = 2; k <= std::min<std::size_t>(n, 9); ++k) {
            auto fa = split_folds(n, k, n * 31 + k);
            std::vector<std::size_t> sizes(k, 0);
            for (auto f : fa.fold_of) ++sizes[f];
            auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
            EXPECT_LE(*hi - *lo, 1u);
            EXPECT_EQ(*lo, n / k);
        }
}

TEST(LossGradient, ZeroProbeAtHalfTarget) {
    std::vector<LabeledInstance> b{{"a", {1.0, 2.0}, 0, 0.5}};
    auto lg = loss_and_gradient(Probe::zeros(2), b, LossKind::ECE);
    EXPECT_EQ(lg.loss, 0.0);
    EXPECT_EQ(lg.grad_b, 0.0);
    EXPECT_EQ(lg.grad_w, (Vector{0.0, 0.0}));
}

TEST(LossGradient, ZeroProbeClosedForm) {
    std::vector<LabeledInstance> b{{"a", {1.0, -3.0}, 1, std::nullopt}};
    auto lg = loss_and_gradient(Probe::zeros(2), b, LossKind::MSE);
    EXPECT_DOUBLE_EQ(lg.loss, 0.25);
    EXPECT_DOUBLE_EQ(lg.grad_b, -0.25);
    EXPECT_DOUBLE_EQ(lg.grad_w[0], -0.25);
    EXPECT_DOUBLE_EQ(lg.grad_w[1], 0.75);
}

TEST(LossGradient, MatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double h = 1e-6;
    for (int draw = 0; draw < 100; ++draw) {
        for (auto kind : {LossKind::MSE, LossKind::ECE}) {
            auto probe = testing_support::random_probe(rng, 5, 0.5);
            auto batch = gaussian_instances(rng, 1 + rng() % 20, 5);
            for (auto& inst : batch) inst.soft_label = u(rng);
            auto lg = loss_and_gradient(probe, batch, kind);
            EXPECT_NEAR(lg.loss, naive_loss(probe, batch, kind), 1e-12);
            for (std::size_t j = 0; j < 5; ++j) {
                auto plus = probe, minus = probe;
                plus.weights[j] += h;
                minus.weights[j] -= h;
                double fd = (naive_loss(plus, batch, kind) - naive_loss(minus, batch, kind)) / (2 * h);
                EXPECT_TRUE(close_relative(lg.grad_w[j], fd, 1e-4)) << lg.grad_w[j] << " vs " << fd;
            }
            auto plus = probe, minus = probe;
            plus.bias += h;
            minus.bias -= h;
            double fd = (naive_loss(plus, batch, kind) - naive_loss(minus, batch, kind)) / (2 * h);
            EXPECT_TRUE(close_relative(lg.grad_b, fd, 1e-4)) << lg.grad_b << " vs " << fd;
        }
    }
}

TEST(Training, SeparableDataReachesLowBrier) {
    std::vector<LabeledInstance> train, test;
    for (int i = 0; i < 100; ++i) {
        int y = i % 2;
        Vector v(4, 0.0);
        v[0] = y ? 1.0 : -1.0;
        (i < 80 ? train : test).push_back({"s" + std::to_string(i), v, y, std::nullopt});
    }
    TrainConfig cfg;
    cfg.learning_rate = 5.0;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    auto probe = train_probe(train, cfg);
    std::vector<Prediction> preds;
    for (const auto& t : test) preds.push_back({probe_confidence(probe, t.pooled), t.hard_label});
    EXPECT_LT(brier(preds), 0.05);
}

TEST(Training, ConstantTargetFit) {
    std::mt19937_64 rng(22);
    auto data = gaussian_instances(rng, 200, 3);
    for (auto& d : data) d.soft_label = 0.5;
    TrainConfig cfg;
    cfg.loss = LossKind::ECE;
    cfg.learning_rate = 1.0;
    cfg.epochs = 30;
    auto probe = train_probe(data, cfg);
    for (const auto& d : data) EXPECT_NEAR(probe_confidence(probe, d.pooled), 0.5, 0.05);
}

TEST(Training, RejectsBadInput) {
    std::mt19937_64 rng(23);
    auto data = gaussian_instances(rng, 20, 3);
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_THROW((void)train_probe(data, cfg), Error);
    cfg = {};
    EXPECT_THROW((void)train_probe(std::vector<LabeledInstance>{}, cfg), Error);
    cfg.loss = LossKind::ECE;
    EXPECT_THROW((void)train_probe(data, cfg), Error);
    cfg = {};
    data[3].pooled.push_back(1.0);
    EXPECT_THROW((void)train_probe(data, cfg), Error);
}

TEST(Training, DefaultsAndValidationSplit) {
    TrainConfig cfg;
    EXPECT_EQ(cfg.epochs, 100u);
    EXPECT_EQ(cfg.batch_size, 128u);
    EXPECT_EQ(cfg.learning_rate, 1e-5);
    EXPECT_EQ(cfg.folds, 5u);
    EXPECT_EQ(cfg.n_bins, 10u);
    EXPECT_EQ(cfg.validation_fraction, 0.2);
    std::mt19937_64 rng(24);
    auto data = gaussian_instances(rng, 50, 2);
    cfg.epochs = 3;
    auto res = fit_probe(data, cfg);
    EXPECT_EQ(res.n_validation, 10u);
    EXPECT_EQ(res.n_train, 40u);
    EXPECT_EQ(res.curve.size(), 3u);
}

TEST(Training, ReturnsBestValidationEpoch) {
    std::mt19937_64 rng(25);
    auto data = gaussian_instances(rng, 80, 20, 0.3);
    TrainConfig cfg;
    cfg.learning_rate = 3.0;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    auto res = fit_probe(data, cfg);
    double best = res.curve.front().validation_loss.value();
    std::size_t best_epoch = 1;
    for (const auto& rec : res.curve)
        if (*rec.validation_loss < best) {
            best = *rec.validation_loss;
            best_epoch = rec.epoch;
        }
    EXPECT_EQ(res.best_epoch, best_epoch);
}

TEST(Training, DeterministicGivenSeed) {
    std::mt19937_64 rng(26);
    auto data = gaussian_instances(rng, 60, 3);
    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.epochs = 10;
    cfg.batch_size = 7;
    EXPECT_EQ(train_probe(data, cfg), train_probe(data, cfg));
}

TEST(Training, LossNonIncreasingAtDefaultRate) {
    int monotone = 0;
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial) {
        std::mt19937_64 rng(1000 + trial);
        auto data = gaussian_instances(rng, 300, 4);
        TrainConfig cfg;
        cfg.epochs = 20;
        cfg.seed = static_cast<std::uint64_t>(trial);
        auto res = fit_probe(data, cfg);
        bool ok = true;
        for (std::size_t e = 1; e < res.curve.size(); ++e) ok &= res.curve[e].train_loss <= res.curve[e - 1].train_loss;
        monotone += ok;
    }
    EXPECT_GE(monotone, 95);
}

TEST(SoftLabels, HandSimulatedFixture) {
    std::vector<double> conf(6, 0.25);
    conf.insert(conf.end(), 6, 0.85);
    std::vector<int> hard{1, 0, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1};
    auto soft = bin_accuracy_labels(conf, hard, 10);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(soft[i], 0.5);
    for (int i = 6; i < 12; ++i) EXPECT_EQ(soft[i], 1.0);
}

TEST(SoftLabels, AllCorrectAndAllIncorrect) {
    std::mt19937_64 rng(27);
    auto data = gaussian_instances(rng, 40, 3);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.5;
    for (int label : {0, 1}) {
        for (auto& d : data) d.hard_label = label;
        for (const auto& inst : build_soft_labels(data, cfg)) EXPECT_EQ(*inst.soft_label, static_cast<double>(label));
    }
}

TEST(SoftLabels, EqualBinMeanOfHeldOutConfidences) {
    std::mt19937_64 rng(28);
    auto data = gaussian_instances(rng, 120, 4);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.learning_rate = 0.5;
    auto res = build_soft_labels_detailed(data, cfg);
    ASSERT_EQ(res.instances.size(), data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        double sum = 0.0;
        int count = 0;
        for (std::size_t j = 0; j < data.size(); ++j)
            if (bin_index(res.held_out_confidences[j], 10) == bin_index(res.held_out_confidences[i], 10)) {
                sum += data[j].hard_label;
                ++count;
            }
        EXPECT_EQ(*res.instances[i].soft_label, sum / count);
    }
}

TEST(SoftLabels, HeldOutConfidenceComesFromOtherFolds) {
    std::mt19937_64 rng(29);
    auto data = gaussian_instances(rng, 30, 3);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.5;
    cfg.folds = 3;
    auto res = build_soft_labels_detailed(data, cfg);
    // Changing a fold's own members must not change their held-out confidences' probe.
    auto perturbed = data;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (res.folds.fold_of[i] == 0) perturbed[i].hard_label = 1 - perturbed[i].hard_label;
    auto conf = cross_validated_confidences(perturbed, cfg, res.folds);
    for (std::size_t i = 0; i < data.size(); ++i)
        if (res.folds.fold_of[i] == 0) {
            EXPECT_EQ(conf[i], res.held_out_confidences[i]);
        }
}

TEST(SoftLabels, PermutationInvariant) {
    std::mt19937_64 rng(30);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> conf(200);
    std::vector<int> hard(200);
    for (std::size_t i = 0; i < 200; ++i) {
        conf[i] = u(rng);
        hard[i] = u(rng) < conf[i];
    }
    auto soft = bin_accuracy_labels(conf, hard, 10);
    std::vector<std::size_t> perm(200);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pc;
    std::vector<int> ph;
    for (auto p : perm) {
        pc.push_back(conf[p]);
        ph.push_back(hard[p]);
    }
    auto psoft = bin_accuracy_labels(pc, ph, 10);
    for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(psoft[i], soft[perm[i]]);
}

TEST(SoftLabels, KLargerThanDatasetRejected) {
    std::mt19937_64 rng(31);
    auto data = gaussian_instances(rng, 4, 2);
    TrainConfig cfg;
    EXPECT_THROW((void)build_soft_labels(data, cfg), Error);
}
