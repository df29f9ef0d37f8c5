#pragma once

// Glue between labeled responses, the LM, and the probe/metrics layers.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "actcab/data.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"
#include "actcab/metrics.hpp"
#include "actcab/probe.hpp"
#include "actcab/trainer.hpp"

namespace actcab {

inline std::string instance_id(const SampledResponse& r) {
    return r.record_id + "#" + std::to_string(r.sample_index);
}

inline std::map<std::string, const QARecord*> index_records(const std::vector<QARecord>& records) {
    std::map<std::string, const QARecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    return by_id;
}

inline const QARecord& record_for(const std::map<std::string, const QARecord*>& by_id, const SampledResponse& r) {
    auto it = by_id.find(r.record_id);
    detail::require(it != by_id.end(), ErrorKind::InvalidParameter, "response refers to unknown record '" + r.record_id + "'");
    return *it->second;
}

struct InstanceSet {
    std::vector<LabeledInstance> instances;
    std::vector<std::size_t> response_index;  // source response of each instance
    std::size_t skipped_unlabeled = 0;
    std::size_t skipped_empty = 0;
};

/// Pools answer-token activations of every labeled, non-empty response.
inline InstanceSet build_instances(const LanguageModel& lm, const std::vector<SampledResponse>& responses) {
    InstanceSet out;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        const auto& r = responses[i];
        if (!r.correctness) {
            ++out.skipped_unlabeled;
            continue;
        }
        if (r.tokens.empty()) {
            ++out.skipped_empty;
            continue;
        }
        auto acts = activations(lm, r.prompt_tokens, r.tokens);
        out.instances.push_back(LabeledInstance{instance_id(r), mean_pool(acts), *r.correctness, std::nullopt});
        out.response_index.push_back(i);
    }
    return out;
}

/// LM probability of each response token given the prompt and earlier tokens.
inline std::vector<double> token_probabilities(const LanguageModel& lm, std::span<const TokenId> prompt,
                                               std::span<const TokenId> tokens) {
    std::vector<double> probs;
    auto pre = lm.start(prompt);
    auto state = pre.state;
    auto next = pre.next_probs;
    for (auto tok : tokens) {
        detail::require(tok < next.size(), ErrorKind::InvalidParameter, "token id out of range");
        probs.push_back(next[tok]);
        auto step = lm.feed(state, tok);
        state = std::move(step.state);
        next = std::move(step.next_probs);
    }
    return probs;
}

/// Log-probability logits restricted to the support of each step's distribution.
inline std::vector<LogitObservation> logit_observations(const LanguageModel& lm, std::span<const TokenId> prompt,
                                                        std::span<const TokenId> tokens) {
    std::vector<LogitObservation> out;
    auto pre = lm.start(prompt);
    auto state = pre.state;
    auto next = pre.next_probs;
    for (auto tok : tokens) {
        LogitObservation obs;
        bool seen = false;
        for (std::size_t id = 0; id < next.size(); ++id) {
            if (next[id] <= 0.0) continue;
            if (id == tok) {
                obs.observed = obs.logits.size();
                seen = true;
            }
            obs.logits.push_back(std::log(next[id]));
        }
        detail::require(seen, ErrorKind::InvalidParameter, "observed token has zero probability");
        if (obs.logits.size() >= 2) out.push_back(std::move(obs));
        auto step = lm.feed(state, tok);
        state = std::move(step.state);
        next = std::move(step.next_probs);
    }
    return out;
}

/// Geometric mean of temperature-scaled token probabilities.
inline double scaled_sequence_likelihood(const LanguageModel& lm, std::span<const TokenId> prompt, std::span<const TokenId> tokens,
                                         double temperature) {
    std::vector<double> probs;
    auto pre = lm.start(prompt);
    auto state = pre.state;
    auto next = pre.next_probs;
    for (auto tok : tokens) {
        std::vector<double> logits;
        std::size_t observed = 0;
        for (std::size_t id = 0; id < next.size(); ++id) {
            if (next[id] <= 0.0) continue;
            if (id == tok) observed = logits.size();
            logits.push_back(std::log(next[id]));
        }
        detail::require(next.at(tok) > 0.0, ErrorKind::InvalidParameter, "observed token has zero probability");
        probs.push_back(softmax_with_temperature(logits, temperature)[observed]);
        auto step = lm.feed(state, tok);
        state = std::move(step.state);
        next = std::move(step.next_probs);
    }
    return sequence_likelihood(probs);
}

}  // namespace actcab
