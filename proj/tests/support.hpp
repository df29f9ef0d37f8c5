#pragma once

// Small hand-built and random LMs shared by the test suites.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "actcab/actcab.hpp"

namespace testing_support {

using namespace actcab;

// Vocabulary: 0 </s>, 1 Q:, 2 A, 3 B, 4 C. Argmax path after "Q:" is A B </s>.
inline TabularLM tiny_lm() {
    Vocabulary vocab({"</s>", "Q:", "A", "B", "C"}, 0);
    std::map<TabularLM::Context, TabularLM::Distribution> tr;
    std::map<TabularLM::ActivationKey, Vector> acts;
    tr[{1}] = {{2, 0.7}, {3, 0.2}, {4, 0.1}};
    tr[{1, 2}] = {{3, 0.6}, {4, 0.4}};
    tr[{1, 3}] = {{0, 1.0}};
    tr[{1, 4}] = {{0, 1.0}};
    tr[{2, 3}] = {{0, 1.0}};
    tr[{2, 4}] = {{0, 0.5}, {2, 0.5}};
    tr[{4, 2}] = {{0, 1.0}};
    acts[{{1}, 2}] = {0.5, -0.5};
    acts[{{1}, 3}] = {1.0, 0.0};
    acts[{{1}, 4}] = {0.0, 1.0};
    acts[{{1, 2}, 3}] = {0.25, 0.75};
    acts[{{1, 2}, 4}] = {-1.0, 2.0};
    acts[{{1, 3}, 0}] = {0.0, 0.0};
    acts[{{1, 4}, 0}] = {0.1, 0.1};
    acts[{{2, 3}, 0}] = {0.2, 0.2};
    acts[{{2, 4}, 0}] = {0.3, 0.3};
    acts[{{2, 4}, 2}] = {0.4, -0.4};
    acts[{{4, 2}, 0}] = {0.6, 0.6};
    return TabularLM(vocab, 2, 2, std::move(tr), std::move(acts));
}

// Dense order-1 LM: every non-EOS context has a random distribution over the
// whole vocabulary (EOS included) and an activation for every continuation.
inline TabularLM random_lm(std::uint64_t seed, std::size_t vocab_size = 9, std::size_t dim = 4, double eos_weight = 0.3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::string> surfaces{"</s>"};
    for (std::size_t i = 1; i < vocab_size; ++i) surfaces.push_back("w" + std::to_string(i));
    std::map<TabularLM::Context, TabularLM::Distribution> tr;
    std::map<TabularLM::ActivationKey, Vector> acts;
    for (TokenId c = 1; c < vocab_size; ++c) {
        std::vector<double> w(vocab_size);
        double total = 0.0;
        for (std::size_t t = 0; t < vocab_size; ++t) total += w[t] = (t == 0 ? eos_weight : 1.0) * u(rng);
        TabularLM::Distribution dist;
        for (TokenId t = 0; t < vocab_size; ++t) {
            dist.emplace_back(t, w[t] / total);
            Vector v(dim);
            for (auto& x : v) x = n(rng);
            acts[{{c}, t}] = v;
        }
        tr[{c}] = dist;
    }
    return TabularLM(Vocabulary(surfaces, 0), 1, dim, std::move(tr), std::move(acts));
}

inline Probe random_probe(std::mt19937_64& rng, std::size_t dim, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Probe p = Probe::zeros(dim);
    for (auto& w : p.weights) w = n(rng);
    p.bias = n(rng);
    return p;
}

inline WorldSpec synthetic_spec(std::size_t n_facts, double knowledge_noise, std::uint64_t seed, std::size_t dim = 8) {
    WorldSpec spec;
    spec.facts = synthetic_facts(n_facts, 3, 2);
    spec.knowledge_noise = knowledge_noise;
    spec.seed = seed;
    spec.dim = dim;
    return spec;
}

// Mean-pooled answer activations of sampled responses, labeled by ROUGE.
inline std::vector<LabeledInstance> labeled_instances(const World& world, std::size_t n, double temperature, std::uint64_t seed) {
    SamplingConfig sc;
    sc.n = n;
    sc.temperature = temperature;
    sc.seed = seed;
    auto responses = sample_training_responses(world.lm, world.queries, sc);
    auto by_id = index_records(world.queries);
    for (auto& r : responses) label_with_rouge(r, record_for(by_id, r));
    return build_instances(world.lm, responses).instances;
}

}  // namespace testing_support
