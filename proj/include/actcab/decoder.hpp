#pragma once

// Greedy decoding, confidence-guided decoding (candidate rescoring by a blend of
// LM probability and probe confidence, followed by a response-level gate), and
// the selective-generation baseline.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"
#include "actcab/probe.hpp"

namespace actcab {

struct DecodeConfig {
    double lambda = 0.3;
    std::size_t candidate_k = 7;
    std::size_t max_len = 16;
    std::uint64_t seed = 0;
};

inline void validate(const DecodeConfig& cfg) {
    detail::require(cfg.lambda >= 0.0 && cfg.lambda <= 1.0, ErrorKind::InvalidParameter, "lambda must be in [0, 1]");
    detail::require(cfg.candidate_k >= 1, ErrorKind::InvalidParameter, "candidate_k must be >= 1");
    detail::require(cfg.max_len >= 1, ErrorKind::InvalidParameter, "max_len must be >= 1");
}

inline std::vector<TokenId> greedy_decode(const LanguageModel& lm, std::span<const TokenId> query, std::size_t max_len) {
    detail::require(max_len >= 1, ErrorKind::InvalidParameter, "max_len must be >= 1");
    DecodingSession session(lm, query);
    for (std::size_t t = 0; t < max_len && !session.finished(); ++t) session.advance(detail::argmax_token(session.next_probs()));
    return session.tokens();
}

/// s_i = λ·p_i + (1−λ)·c_i
inline std::vector<double> score_candidates(std::span<const double> lm_probs, std::span<const double> confidences, double lambda) {
    detail::require(lm_probs.size() == confidences.size(), ErrorKind::Shape, "probability/confidence count mismatch");
    detail::require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::InvalidParameter, "lambda must be in [0, 1]");
    std::vector<double> scores(lm_probs.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = lambda * lm_probs[i] + (1.0 - lambda) * confidences[i];
    return scores;
}

enum class GateChoice { Codec, Greedy };

inline const char* to_string(GateChoice g) { return g == GateChoice::Codec ? "codec" : "greedy"; }

/// Keeps the guided response only if its confidence strictly exceeds the greedy one.
inline GateChoice gate(const Probe& probe, const ActivationSequence& codec_acts, const ActivationSequence& greedy_acts) {
    return response_confidence(probe, codec_acts) > response_confidence(probe, greedy_acts) ? GateChoice::Codec
                                                                                            : GateChoice::Greedy;
}

struct DecodeStep {
    std::vector<TokenId> candidates;
    std::vector<double> lm_probs;
    std::vector<double> confidences;
    std::vector<double> scores;
    TokenId chosen = 0;
};

struct DecodeTrace {
    std::vector<DecodeStep> steps;
    std::vector<TokenId> guided_tokens;
    std::optional<double> guided_confidence;
    std::vector<TokenId> greedy_tokens;
    std::optional<double> greedy_confidence;
    GateChoice gate = GateChoice::Greedy;
    std::vector<TokenId> response;
    std::optional<double> response_confidence;
    LmCounters guided_counters;
    LmCounters greedy_counters;
};

struct GuidedResult {
    std::vector<TokenId> tokens;
    ActivationSequence activations;
    std::vector<DecodeStep> steps;
    LmCounters counters;
};

/// Token-level guided decoding. Each step expands the top-k candidates with
/// positive probability in one batched request, scores each from its own
/// activation, and commits the winner's already-computed state.
inline GuidedResult guided_decode(const LanguageModel& lm, const Probe& probe, std::span<const TokenId> query,
                                  const DecodeConfig& cfg) {
    validate(cfg);
    detail::require(probe.dim() == lm.dim(), ErrorKind::Shape,
                    "probe dimension " + std::to_string(probe.dim()) + " does not match LM dimension " + std::to_string(lm.dim()));
    DecodingSession session(lm, query);
    GuidedResult out;
    for (std::size_t t = 0; t < cfg.max_len && !session.finished(); ++t) {
        const auto& probs = session.next_probs();
        DecodeStep step;
        for (auto id : topk_indices(probs, cfg.candidate_k))
            if (probs[id] > 0.0) step.candidates.push_back(id);
        detail::require(!step.candidates.empty(), ErrorKind::MalformedModel, "next-token distribution has no positive mass");
        auto expanded = session.expand(step.candidates);
        for (std::size_t i = 0; i < expanded.size(); ++i) {
            step.lm_probs.push_back(probs[step.candidates[i]]);
            step.confidences.push_back(probe_confidence(probe, expanded[i].activation));
        }
        step.scores = score_candidates(step.lm_probs, step.confidences, cfg.lambda);
        // Candidates are in descending-probability, ascending-id order; ties on score go to the lower id.
        std::size_t best = 0;
        for (std::size_t i = 1; i < step.scores.size(); ++i) {
            if (step.scores[i] > step.scores[best] ||
                (step.scores[i] == step.scores[best] && step.candidates[i] < step.candidates[best]))
                best = i;
        }
        step.chosen = step.candidates[best];
        session.commit(std::move(expanded[best]));
        out.steps.push_back(std::move(step));
    }
    out.tokens = session.tokens();
    out.activations = session.response_activations();
    out.counters = session.counters();
    return out;
}

struct CodecResult {
    std::vector<TokenId> tokens;
    DecodeTrace trace;
};

/// Guided decoding followed by the response-level gate against greedy decoding
/// of the same prompt. An empty response has no confidence: an empty guided
/// response keeps greedy, and a non-empty guided response beats an empty greedy one.
inline CodecResult codec_decode(const LanguageModel& lm, const Probe& probe, std::span<const TokenId> query,
                                const DecodeConfig& cfg) {
    auto guided = guided_decode(lm, probe, query, cfg);

    DecodingSession greedy(lm, query);
    for (std::size_t t = 0; t < cfg.max_len && !greedy.finished(); ++t) greedy.advance(detail::argmax_token(greedy.next_probs()));
    const auto& greedy_acts = greedy.response_activations();

    CodecResult out;
    auto& tr = out.trace;
    tr.steps = std::move(guided.steps);
    tr.guided_tokens = guided.tokens;
    tr.greedy_tokens = greedy.tokens();
    tr.guided_counters = guided.counters;
    tr.greedy_counters = greedy.counters();
    if (!guided.activations.empty()) tr.guided_confidence = response_confidence(probe, guided.activations);
    if (!greedy_acts.empty()) tr.greedy_confidence = response_confidence(probe, greedy_acts);

    if (tr.guided_confidence && tr.greedy_confidence)
        tr.gate = gate(probe, guided.activations, greedy_acts);
    else
        tr.gate = tr.guided_confidence ? GateChoice::Codec : GateChoice::Greedy;

    if (tr.gate == GateChoice::Codec) {
        tr.response = tr.guided_tokens;
        tr.response_confidence = tr.guided_confidence;
    } else {
        tr.response = tr.greedy_tokens;
        tr.response_confidence = tr.greedy_confidence;
    }
    out.tokens = tr.response;
    return out;
}

struct SelectiveResult {
    std::vector<TokenId> tokens;
    std::optional<double> confidence;
    std::vector<std::vector<TokenId>> samples;
    std::vector<std::optional<double>> confidences;
    std::size_t chosen = 0;
};

/// Samples `n_samples` responses (sample i uses seed derived from (seed, i)) and
/// returns the most confident one; ties and empty responses favor earlier samples.
inline SelectiveResult selective_generation(const LanguageModel& lm, const Probe& probe, std::span<const TokenId> query,
                                            std::size_t n_samples, double temperature, std::uint64_t seed,
                                            std::size_t max_len = 16) {
    detail::require(n_samples >= 1, ErrorKind::InvalidParameter, "n_samples must be >= 1");
    detail::require(probe.dim() == lm.dim(), ErrorKind::Shape, "probe dimension does not match the LM");
    SelectiveResult out;
    for (std::size_t i = 0; i < n_samples; ++i) {
        auto tokens = sample_response(lm, query, temperature, max_len, detail::derive_seed(seed, {static_cast<std::uint64_t>(i)}));
        std::optional<double> conf;
        if (!tokens.empty()) conf = response_confidence(probe, activations(lm, query, tokens));
        out.samples.push_back(std::move(tokens));
        out.confidences.push_back(conf);
    }
    for (std::size_t i = 1; i < n_samples; ++i) {
        const auto& c = out.confidences[i];
        const auto& b = out.confidences[out.chosen];
        if (c && (!b || *c > *b)) out.chosen = i;
    }
    out.tokens = out.samples[out.chosen];
    out.confidence = out.confidences[out.chosen];
    return out;
}

// --- trace serialization ----------------------------------------------------

inline nlohmann::ordered_json to_json(const LmCounters& c) {
    return nlohmann::ordered_json{{"prefill_tokens", c.prefill_tokens},
                                  {"token_computations", c.token_computations},
                                  {"candidate_batches", c.candidate_batches},
                                  {"pooling_requests", c.pooling_requests}};
}

/// One JSON line per step followed by a summary line with `"final": true`.
inline std::vector<nlohmann::ordered_json> trace_lines(const DecodeTrace& tr, const Vocabulary& vocab, const std::string& query_id,
                                                       double lambda) {
    std::vector<nlohmann::ordered_json> lines;
    auto surfaces = [&](std::span<const TokenId> ids) {
        std::vector<std::string> s;
        for (auto id : ids) s.push_back(vocab.surface(id));
        return s;
    };
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        const auto& s = tr.steps[t];
        lines.push_back({{"query_id", query_id},
                         {"step", t},
                         {"lambda", lambda},
                         {"candidates", s.candidates},
                         {"candidate_surfaces", surfaces(s.candidates)},
                         {"lm_probs", s.lm_probs},
                         {"confidences", s.confidences},
                         {"scores", s.scores},
                         {"chosen", s.chosen}});
    }
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
    lines.push_back({{"query_id", query_id},
                     {"final", true},
                     {"guided_tokens", tr.guided_tokens},
                     {"guided_confidence", opt(tr.guided_confidence)},
                     {"greedy_tokens", tr.greedy_tokens},
                     {"greedy_confidence", opt(tr.greedy_confidence)},
                     {"gate", to_string(tr.gate)},
                     {"response", surfaces(tr.response)},
                     {"response_confidence", opt(tr.response_confidence)},
                     {"guided_counters", to_json(tr.guided_counters)},
                     {"greedy_counters", to_json(tr.greedy_counters)}});
    return lines;
}

}  // namespace actcab
