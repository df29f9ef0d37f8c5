#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace actcab;
using testing_support::random_lm;
using testing_support::random_probe;
using testing_support::tiny_lm;

namespace {

const std::vector<TokenId> kQ{1};

ActivationSequence seq_with_confidence(double c) {
    // Probe {1}, bias 0: a single activation logit(c) yields confidence c.
    ActivationSequence acts(1);
    acts.push_back({std::log(c / (1.0 - c))});
    return acts;
}

}  // namespace

TEST(Greedy, FollowsArgmaxPath) {
    auto lm = tiny_lm();
    EXPECT_EQ(lm.vocab().decode(greedy_decode(lm, kQ, 16)), "A B");
    EXPECT_EQ(greedy_decode(lm, kQ, 1).size(), 1u);
    EXPECT_THROW((void)greedy_decode(lm, kQ, 0), Error);
}

TEST(Greedy, EqualsZeroTemperatureSampling) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto lm = random_lm(seed, 8, 3, 0.1);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 7)};
        EXPECT_EQ(greedy_decode(lm, q, 12), sample_response(lm, q, 0.0, 12, seed));
    }
}

TEST(ScoreCandidates, Blend) {
    std::vector<double> p{0.6, 0.3}, c{0.8, 0.1};
    EXPECT_EQ(score_candidates(p, c, 1.0), p);
    EXPECT_EQ(score_candidates(p, c, 0.0), c);
    EXPECT_NEAR(score_candidates(p, c, 0.3)[0], 0.74, 1e-15);
    EXPECT_THROW((void)score_candidates(p, std::vector<double>{0.1}, 0.3), Error);
    EXPECT_THROW((void)score_candidates(p, c, 1.5), Error);
}

TEST(Gate, StrictComparison) {
    Probe p{{1.0}, 0.0};
    EXPECT_EQ(gate(p, seq_with_confidence(0.7), seq_with_confidence(0.6)), GateChoice::Codec);
    EXPECT_EQ(gate(p, seq_with_confidence(0.5), seq_with_confidence(0.6)), GateChoice::Greedy);
    EXPECT_EQ(gate(p, seq_with_confidence(0.6), seq_with_confidence(0.6)), GateChoice::Greedy);
}

TEST(Codec, PicksConfidentCandidate) {
    auto lm = tiny_lm();
    // The probe favors the second activation coordinate: "C" (0,1) beats "A" (0.5,-0.5).
    Probe p{{0.0, 4.0}, 0.0};
    DecodeConfig cfg;
    auto g = guided_decode(lm, p, kQ, cfg);
    ASSERT_FALSE(g.steps.empty());
    EXPECT_EQ(g.steps[0].candidates, (std::vector<TokenId>{2, 3, 4}));
    EXPECT_EQ(g.steps[0].chosen, 4u);
    EXPECT_EQ(lm.vocab().decode(g.tokens), "C");
}

TEST(Codec, LambdaOneEqualsGreedy) {
    std::mt19937_64 rng(40);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto lm = random_lm(seed, 10, 4, 0.2);
        auto probe = random_probe(rng, 4, 3.0);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 9)};
        DecodeConfig cfg;
        cfg.lambda = 1.0;
        EXPECT_EQ(guided_decode(lm, probe, q, cfg).tokens, greedy_decode(lm, q, cfg.max_len));
        EXPECT_EQ(codec_decode(lm, probe, q, cfg).tokens, greedy_decode(lm, q, cfg.max_len));
    }
}

TEST(Codec, SingleCandidateEqualsGreedy) {
    std::mt19937_64 rng(41);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto lm = random_lm(seed, 10, 4, 0.2);
        auto probe = random_probe(rng, 4, 3.0);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 9)};
        for (double lambda : {0.0, 0.3, 0.7}) {
            DecodeConfig cfg;
            cfg.lambda = lambda;
            cfg.candidate_k = 1;
            EXPECT_EQ(guided_decode(lm, probe, q, cfg).tokens, greedy_decode(lm, q, cfg.max_len));
        }
    }
}

TEST(Codec, ShapeMismatch) {
    auto lm = tiny_lm();
    try {
        (void)codec_decode(lm, Probe::zeros(3), kQ, DecodeConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Shape);
    }
}

TEST(Codec, TraceIsSelfConsistent) {
    std::mt19937_64 rng(42);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto lm = random_lm(seed, 10, 4, 0.15);
        auto probe = random_probe(rng, 4, 2.0);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 9)};
        DecodeConfig cfg;
        auto res = codec_decode(lm, probe, q, cfg);
        const auto& tr = res.trace;
        std::vector<TokenId> prefix = q;
        for (const auto& st : tr.steps) {
            auto acts_probs = lm.start(prefix).next_probs;
            ASSERT_EQ(st.candidates.size(), st.scores.size());
            std::size_t best = 0;
            for (std::size_t i = 0; i < st.candidates.size(); ++i) {
                EXPECT_EQ(st.lm_probs[i], acts_probs[st.candidates[i]]);
                auto h = activations(lm, prefix, std::vector<TokenId>{st.candidates[i]})[0];
                EXPECT_NEAR(st.confidences[i], probe_confidence(probe, h), 1e-12);
                EXPECT_NEAR(st.scores[i], cfg.lambda * st.lm_probs[i] + (1 - cfg.lambda) * st.confidences[i], 1e-12);
                if (st.scores[i] > st.scores[best]) best = i;
            }
            EXPECT_EQ(st.chosen, st.candidates[best]);
            if (st.chosen == 0) break;
            prefix.push_back(st.chosen);
        }
        EXPECT_EQ(tr.guided_tokens, std::vector<TokenId>(prefix.begin() + 1, prefix.end()));
    }
}

TEST(Codec, GateNeverLowersConfidence) {
    std::mt19937_64 rng(43);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto lm = random_lm(seed, 10, 4, 0.15);
        auto probe = random_probe(rng, 4, 2.0);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 9)};
        auto res = codec_decode(lm, probe, q, DecodeConfig{});
        const auto& tr = res.trace;
        if (!tr.greedy_confidence) continue;
        ASSERT_TRUE(tr.response_confidence);
        EXPECT_GE(*tr.response_confidence, *tr.greedy_confidence);
        if (*tr.response_confidence == *tr.greedy_confidence) {
            EXPECT_EQ(tr.gate, GateChoice::Greedy);
        }
    }
}

TEST(Codec, CountersHonorBatchingAndReuse) {
    std::mt19937_64 rng(44);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto lm = random_lm(seed, 12, 4, 0.1);
        auto probe = random_probe(rng, 4);
        std::vector<TokenId> q{static_cast<TokenId>(1 + seed % 11)};
        DecodeConfig cfg;
        auto res = codec_decode(lm, probe, q, cfg);
        const auto& tr = res.trace;
        auto steps = tr.steps.size();
        EXPECT_EQ(tr.guided_counters.candidate_batches, steps);
        EXPECT_EQ(tr.guided_counters.pooling_requests, 1u);
        EXPECT_LE(tr.guided_counters.token_computations, steps * (cfg.candidate_k + 1));
        EXPECT_EQ(tr.guided_counters.prefill_tokens, q.size());
    }
}

TEST(Selective, SingleSampleIsThatSample) {
    auto lm = random_lm(5);
    std::mt19937_64 rng(45);
    auto probe = random_probe(rng, 4);
    auto res = selective_generation(lm, probe, kQ, 1, 1.0, 77, 8);
    EXPECT_EQ(res.tokens, sample_response(lm, kQ, 1.0, 8, detail::derive_seed(77, {0})));
}

TEST(Selective, PicksMaxConfidence) {
    // Two first tokens with activations of confidence 0.2 and 0.9 under probe {1}.
    Vocabulary vocab({"</s>", "Q:", "A", "B"}, 0);
    std::map<TabularLM::Context, TabularLM::Distribution> tr{{{1}, {{2, 0.5}, {3, 0.5}}}, {{2}, {{0, 1.0}}}, {{3}, {{0, 1.0}}}};
    std::map<TabularLM::ActivationKey, Vector> acts{{{{1}, 2}, {std::log(0.2 / 0.8)}}, {{{1}, 3}, {std::log(0.9 / 0.1)}},
                                                    {{{2}, 0}, {0.0}}, {{{3}, 0}, {0.0}}};
    TabularLM lm(vocab, 1, 1, tr, acts);
    Probe p{{1.0}, 0.0};
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto res = selective_generation(lm, p, kQ, 2, 1.0, seed, 1);
        bool has_b = false;
        for (const auto& s : res.samples) has_b |= s == std::vector<TokenId>{3};
        EXPECT_EQ(res.tokens, (has_b ? std::vector<TokenId>{3} : std::vector<TokenId>{2}));
        if (has_b) {
            EXPECT_NEAR(*res.confidence, 0.9, 1e-12);
        }
    }
}

TEST(Selective, ReturnsMaxOfRecomputedConfidences) {
    std::mt19937_64 rng(46);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto world = build_world(testing_support::synthetic_spec(5, 0.2, seed));
        auto probe = random_probe(rng, world.lm.dim());
        auto q = prompt_tokens(world.lm.vocab(), world.queries[seed % 5]);
        auto res = selective_generation(world.lm, probe, q, 4, 1.0, seed);
        double best = -1.0;
        for (std::size_t i = 0; i < 4; ++i) {
            auto y = sample_response(world.lm, q, 1.0, 16, detail::derive_seed(seed, {i}));
            if (!y.empty()) best = std::max(best, response_confidence(probe, activations(world.lm, q, y)));
        }
        EXPECT_EQ(*res.confidence, best);
    }
}

TEST(Trace, JsonLines) {
    auto lm = tiny_lm();
    Probe p{{0.0, 4.0}, 0.0};
    auto res = codec_decode(lm, p, kQ, DecodeConfig{});
    auto lines = trace_lines(res.trace, lm.vocab(), "q1", 0.3);
    ASSERT_EQ(lines.size(), res.trace.steps.size() + 1);
    EXPECT_TRUE(lines.back().at("final").get<bool>());
    EXPECT_EQ(lines.front().at("chosen").get<TokenId>(), res.trace.steps.front().chosen);
}
