#pragma once

// Language-model interface consumed by the probe, trainer and decoder, plus a
// deterministic tabular n-gram model that stores one activation vector per
// (context, token) pair.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"

namespace actcab {

using TokenId = std::uint32_t;
using Vector = std::vector<double>;

struct Token {
    TokenId id = 0;
    std::string surface;

    friend bool operator==(const Token&, const Token&) = default;
};

/// Splits on ASCII whitespace.
inline std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) out.push_back(word);
    return out;
}

class Vocabulary {
public:
    Vocabulary() = default;

    Vocabulary(std::vector<std::string> surfaces, TokenId eos) : surfaces_(std::move(surfaces)), eos_(eos) {
        detail::require(!surfaces_.empty(), ErrorKind::InvalidSpec, "vocabulary is empty");
        detail::require(eos_ < surfaces_.size(), ErrorKind::InvalidSpec, "end-of-sequence id out of range");
        for (TokenId id = 0; id < surfaces_.size(); ++id) {
            const auto& s = surfaces_[id];
            detail::require(!s.empty(), ErrorKind::InvalidSpec, "empty token surface at id " + std::to_string(id));
            auto [it, inserted] = index_.emplace(s, id);
            detail::require(inserted, ErrorKind::InvalidSpec, "duplicate token surface '" + s + "'");
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return surfaces_.size(); }
    [[nodiscard]] TokenId eos() const noexcept { return eos_; }
    [[nodiscard]] const std::vector<std::string>& surfaces() const noexcept { return surfaces_; }

    [[nodiscard]] const std::string& surface(TokenId id) const {
        detail::require(id < surfaces_.size(), ErrorKind::InvalidParameter, "token id out of range");
        return surfaces_[id];
    }

    [[nodiscard]] Token token(TokenId id) const { return Token{id, surface(id)}; }

    [[nodiscard]] std::optional<TokenId> find(std::string_view surface) const {
        auto it = index_.find(std::string(surface));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    /// Whitespace tokenization; every word must already be in the vocabulary.
    [[nodiscard]] std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        for (const auto& word : split_whitespace(text)) {
            auto id = find(word);
            detail::require(id.has_value(), ErrorKind::InvalidParameter, "word '" + word + "' is not in the vocabulary");
            ids.push_back(*id);
        }
        return ids;
    }

    /// Joins surfaces with single spaces; end-of-sequence tokens are dropped.
    [[nodiscard]] std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (auto id : ids) {
            if (id == eos_) continue;
            if (!out.empty()) out += ' ';
            out += surface(id);
        }
        return out;
    }

private:
    std::vector<std::string> surfaces_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId eos_ = 0;
};

/// Per-token hidden vectors for a span of tokens, all of one dimension.
class ActivationSequence {
public:
    explicit ActivationSequence(std::size_t dim = 0) : dim_(dim) {}

    void push_back(Vector v) {
        detail::require(v.size() == dim_, ErrorKind::Shape,
                        "activation has dimension " + std::to_string(v.size()) + ", expected " + std::to_string(dim_));
        detail::require(detail::all_finite(v), ErrorKind::MalformedModel, "activation has non-finite entries");
        vectors_.push_back(std::move(v));
    }

    [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
    [[nodiscard]] std::size_t size() const noexcept { return vectors_.size(); }
    [[nodiscard]] bool empty() const noexcept { return vectors_.empty(); }
    [[nodiscard]] const Vector& operator[](std::size_t i) const { return vectors_[i]; }
    [[nodiscard]] auto begin() const noexcept { return vectors_.begin(); }
    [[nodiscard]] auto end() const noexcept { return vectors_.end(); }

    friend bool operator==(const ActivationSequence&, const ActivationSequence&) = default;

private:
    std::size_t dim_;
    std::vector<Vector> vectors_;
};

/// Model state after consuming a prefix. For n-gram models this is the trailing
/// context window; other models may store whatever they need in `window`.
struct LmState {
    std::vector<TokenId> window;

    friend bool operator==(const LmState&, const LmState&) = default;
};

/// Result of consuming one token: its activation and the distribution it induces
/// over the following token (empty after end-of-sequence).
struct TokenStep {
    TokenId token = 0;
    LmState state;
    Vector activation;
    std::vector<double> next_probs;
};

struct Prefill {
    LmState state;
    std::vector<double> next_probs;
};

class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    [[nodiscard]] virtual const Vocabulary& vocab() const = 0;
    [[nodiscard]] virtual std::size_t dim() const = 0;

    /// Consumes a prompt; an empty prompt is the begin-of-sequence state.
    [[nodiscard]] virtual Prefill start(std::span<const TokenId> prompt) const = 0;

    /// One per-token state computation: feeds `token` after `state`.
    [[nodiscard]] virtual TokenStep feed(const LmState& state, TokenId token) const = 0;
};

/// Work counters for one decoding run.
struct LmCounters {
    std::size_t prefill_tokens = 0;
    std::size_t token_computations = 0;
    std::size_t candidate_batches = 0;
    std::size_t pooling_requests = 0;

    friend bool operator==(const LmCounters&, const LmCounters&) = default;
};

/// Incremental decoding over a LanguageModel. Committing a pre-computed step
/// reuses its state instead of feeding the token again.
class DecodingSession {
public:
    DecodingSession(const LanguageModel& lm, std::span<const TokenId> prompt) : lm_(&lm), acts_(lm.dim()) {
        auto pre = lm.start(prompt);
        state_ = std::move(pre.state);
        next_probs_ = std::move(pre.next_probs);
        counters_.prefill_tokens = prompt.size();
    }

    [[nodiscard]] const LanguageModel& lm() const noexcept { return *lm_; }
    [[nodiscard]] const std::vector<double>& next_probs() const noexcept { return next_probs_; }
    [[nodiscard]] const std::vector<TokenId>& tokens() const noexcept { return tokens_; }
    [[nodiscard]] const LmCounters& counters() const noexcept { return counters_; }
    [[nodiscard]] bool finished() const noexcept { return finished_; }

    /// Computes the states of all candidates in one batched request.
    [[nodiscard]] std::vector<TokenStep> expand(std::span<const TokenId> candidates) {
        std::vector<TokenStep> steps;
        steps.reserve(candidates.size());
        for (auto tok : candidates) steps.push_back(lm_->feed(state_, tok));
        counters_.token_computations += candidates.size();
        ++counters_.candidate_batches;
        return steps;
    }

    void commit(TokenStep step) {
        detail::require(!finished_, ErrorKind::Internal, "commit after end of sequence");
        if (step.token == lm_->vocab().eos()) {
            finished_ = true;
        } else {
            tokens_.push_back(step.token);
            acts_.push_back(std::move(step.activation));
        }
        state_ = std::move(step.state);
        next_probs_ = std::move(step.next_probs);
    }

    void advance(TokenId token) {
        auto step = lm_->feed(state_, token);
        ++counters_.token_computations;
        commit(std::move(step));
    }

    /// Activations of the committed non-EOS tokens, counted as one pooling request.
    [[nodiscard]] const ActivationSequence& response_activations() {
        ++counters_.pooling_requests;
        return acts_;
    }

private:
    const LanguageModel* lm_;
    LmState state_;
    std::vector<double> next_probs_;
    std::vector<TokenId> tokens_;
    ActivationSequence acts_;
    LmCounters counters_;
    bool finished_ = false;
};

struct ScoredToken {
    Token token;
    double probability = 0.0;
};

/// Indices of the k largest probabilities, descending, ties by ascending id.
inline std::vector<TokenId> topk_indices(std::span<const double> probs, std::size_t k) {
    std::vector<TokenId> ids(probs.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    ids.resize(k);
    return ids;
}

inline std::vector<ScoredToken> next_token_topk(const LanguageModel& lm, std::span<const TokenId> context, std::size_t k) {
    detail::require(k >= 1, ErrorKind::InvalidParameter, "k must be >= 1");
    auto pre = lm.start(context);
    std::vector<ScoredToken> out;
    for (auto id : topk_indices(pre.next_probs, k)) out.push_back({lm.vocab().token(id), pre.next_probs[id]});
    return out;
}

/// Activations of `tokens` when they follow `prefix`.
inline ActivationSequence activations(const LanguageModel& lm, std::span<const TokenId> prefix, std::span<const TokenId> tokens) {
    ActivationSequence acts(lm.dim());
    if (tokens.empty()) return acts;
    auto state = lm.start(prefix).state;
    for (auto tok : tokens) {
        auto step = lm.feed(state, tok);
        acts.push_back(std::move(step.activation));
        state = std::move(step.state);
    }
    return acts;
}

inline ActivationSequence activations(const LanguageModel& lm, std::span<const TokenId> tokens) {
    return activations(lm, std::span<const TokenId>{}, tokens);
}

namespace detail {

inline TokenId argmax_token(std::span<const double> probs) {
    return topk_indices(probs, 1).front();
}

/// Samples from p^(1/T) renormalized; T must be > 0.
inline TokenId sample_tempered(std::span<const double> probs, double temperature, std::mt19937_64& rng) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double p : probs)
        if (p > 0.0) max_logit = std::max(max_logit, std::log(p) / temperature);
    std::vector<double> weights(probs.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] > 0.0) {
            weights[i] = std::exp(std::log(probs[i]) / temperature - max_logit);
            total += weights[i];
        }
    }
    require(total > 0.0, ErrorKind::MalformedModel, "distribution has no positive mass");
    std::uniform_real_distribution<double> unif(0.0, total);
    double u = unif(rng);
    double cum = 0.0;
    TokenId last = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        cum += weights[i];
        last = static_cast<TokenId>(i);
        if (u < cum) return last;
    }
    return last;
}

}  // namespace detail

/// Samples a continuation of `query`. The returned tokens exclude the
/// end-of-sequence token; temperature 0 is greedy argmax.
inline std::vector<TokenId> sample_response(const LanguageModel& lm, std::span<const TokenId> query, double temperature,
                                            std::size_t max_len, std::uint64_t seed) {
    detail::require(temperature >= 0.0 && std::isfinite(temperature), ErrorKind::InvalidParameter,
                    "temperature must be a finite value >= 0");
    detail::require(max_len >= 1, ErrorKind::InvalidParameter, "max_len must be >= 1");
    std::mt19937_64 rng(seed);
    DecodingSession session(lm, query);
    for (std::size_t t = 0; t < max_len && !session.finished(); ++t) {
        const auto& probs = session.next_probs();
        TokenId tok = temperature == 0.0 ? detail::argmax_token(probs) : detail::sample_tempered(probs, temperature, rng);
        session.advance(tok);
    }
    return session.tokens();
}

/// Deterministic n-gram LM with a stored activation for every reachable
/// (context, token) pair. Contexts are the last `context_order` tokens.
class TabularLM final : public LanguageModel {
public:
    using Context = std::vector<TokenId>;
    /// Sparse distribution: ascending token ids with positive probabilities.
    using Distribution = std::vector<std::pair<TokenId, double>>;
    using ActivationKey = std::pair<Context, TokenId>;

    static constexpr int kFormatVersion = 1;

    TabularLM(Vocabulary vocab, std::size_t context_order, std::size_t dim, std::map<Context, Distribution> transitions,
              std::map<ActivationKey, Vector> activation_table)
        : vocab_(std::move(vocab)),
          order_(context_order),
          dim_(dim),
          transitions_(std::move(transitions)),
          activations_(std::move(activation_table)) {
        validate();
    }

    [[nodiscard]] const Vocabulary& vocab() const override { return vocab_; }
    [[nodiscard]] std::size_t dim() const override { return dim_; }
    [[nodiscard]] std::size_t context_order() const noexcept { return order_; }
    [[nodiscard]] const std::map<Context, Distribution>& transitions() const noexcept { return transitions_; }
    [[nodiscard]] const std::map<ActivationKey, Vector>& activation_table() const noexcept { return activations_; }

    [[nodiscard]] Context window(std::span<const TokenId> prefix) const {
        auto n = std::min(order_, prefix.size());
        return Context(prefix.end() - static_cast<std::ptrdiff_t>(n), prefix.end());
    }

    [[nodiscard]] const Distribution& distribution(const Context& ctx) const {
        auto it = transitions_.find(ctx);
        if (it == transitions_.end()) detail::fail(ErrorKind::MalformedModel, "no transition entry for context " + describe(ctx));
        return it->second;
    }

    [[nodiscard]] const Vector& activation(const Context& ctx, TokenId token) const {
        auto it = activations_.find(ActivationKey{ctx, token});
        if (it == activations_.end())
            detail::fail(ErrorKind::MalformedModel,
                         "no activation entry for token '" + vocab_.surface(token) + "' after context " + describe(ctx));
        return it->second;
    }

    [[nodiscard]] std::vector<double> dense(const Distribution& dist) const {
        std::vector<double> probs(vocab_.size(), 0.0);
        for (auto [id, p] : dist) probs[id] = p;
        return probs;
    }

    [[nodiscard]] Prefill start(std::span<const TokenId> prompt) const override {
        for (auto id : prompt)
            detail::require(id < vocab_.size(), ErrorKind::InvalidParameter, "prompt token id out of range");
        Prefill pre;
        pre.state.window = window(prompt);
        pre.next_probs = dense(distribution(pre.state.window));
        return pre;
    }

    [[nodiscard]] TokenStep feed(const LmState& state, TokenId token) const override {
        detail::require(token < vocab_.size(), ErrorKind::InvalidParameter, "token id out of range");
        TokenStep step;
        step.token = token;
        step.activation = activation(state.window, token);
        Context extended = state.window;
        extended.push_back(token);
        step.state.window = window(extended);
        if (token != vocab_.eos()) step.next_probs = dense(distribution(step.state.window));
        return step;
    }

    [[nodiscard]] nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["format"] = "actcab.tabular_lm";
        j["version"] = kFormatVersion;
        j["context_order"] = order_;
        j["dim"] = dim_;
        j["eos"] = vocab_.eos();
        j["vocab"] = vocab_.surfaces();
        auto trans = nlohmann::ordered_json::array();
        for (const auto& [ctx, dist] : transitions_) {
            auto next = nlohmann::ordered_json::array();
            for (auto [id, p] : dist) next.push_back({id, p});
            trans.push_back({{"context", ctx}, {"next", next}});
        }
        j["transitions"] = std::move(trans);
        auto acts = nlohmann::ordered_json::array();
        for (const auto& [key, vec] : activations_)
            acts.push_back({{"context", key.first}, {"token", key.second}, {"vector", vec}});
        j["activations"] = std::move(acts);
        return j;
    }

    static TabularLM from_json(const nlohmann::json& j) {
        try {
            detail::require(j.value("format", std::string{}) == "actcab.tabular_lm", ErrorKind::Load,
                            "not a tabular LM document");
            detail::require(j.at("version").get<int>() == kFormatVersion, ErrorKind::Load, "unsupported LM format version");
            Vocabulary vocab(j.at("vocab").get<std::vector<std::string>>(), j.at("eos").get<TokenId>());
            std::map<Context, Distribution> trans;
            for (const auto& t : j.at("transitions")) {
                Distribution dist;
                for (const auto& entry : t.at("next")) dist.emplace_back(entry.at(0).get<TokenId>(), entry.at(1).get<double>());
                auto [it, inserted] = trans.emplace(t.at("context").get<Context>(), std::move(dist));
                detail::require(inserted, ErrorKind::Load, "duplicate transition context");
            }
            std::map<ActivationKey, Vector> acts;
            for (const auto& a : j.at("activations")) {
                auto [it, inserted] = acts.emplace(ActivationKey{a.at("context").get<Context>(), a.at("token").get<TokenId>()},
                                                   a.at("vector").get<Vector>());
                detail::require(inserted, ErrorKind::Load, "duplicate activation entry");
            }
            return TabularLM(std::move(vocab), j.at("context_order").get<std::size_t>(), j.at("dim").get<std::size_t>(),
                             std::move(trans), std::move(acts));
        } catch (const nlohmann::json::exception& e) {
            detail::fail(ErrorKind::Load, std::string("malformed LM document: ") + e.what());
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Load) throw;
            detail::fail(ErrorKind::Load, e.what());
        }
    }

private:
    [[nodiscard]] std::string describe(const Context& ctx) const {
        std::string out = "[";
        for (std::size_t i = 0; i < ctx.size(); ++i) {
            if (i) out += ' ';
            out += ctx[i] < vocab_.size() ? vocab_.surface(ctx[i]) : "#" + std::to_string(ctx[i]);
        }
        return out + "]";
    }

    void validate() const {
        using detail::require;
        require(order_ >= 1, ErrorKind::InvalidSpec, "context order must be >= 1");
        require(dim_ >= 1, ErrorKind::InvalidSpec, "activation dimension must be >= 1");
        for (const auto& [ctx, dist] : transitions_) {
            require(ctx.size() <= order_, ErrorKind::MalformedModel, "context longer than the context order");
            for (auto id : ctx) require(id < vocab_.size(), ErrorKind::MalformedModel, "context token out of range");
            require(!dist.empty(), ErrorKind::MalformedModel, "empty distribution at context " + describe(ctx));
            double total = 0.0;
            TokenId prev = 0;
            for (std::size_t i = 0; i < dist.size(); ++i) {
                auto [id, p] = dist[i];
                require(id < vocab_.size(), ErrorKind::MalformedModel, "distribution token out of range");
                require(i == 0 || id > prev, ErrorKind::MalformedModel, "distribution ids must be strictly ascending");
                require(std::isfinite(p) && p > 0.0, ErrorKind::MalformedModel, "distribution entries must be positive");
                require(activations_.count(ActivationKey{ctx, id}) == 1, ErrorKind::MalformedModel,
                        "reachable pair without activation: '" + vocab_.surface(id) + "' after " + describe(ctx));
                prev = id;
                total += p;
            }
            require(std::abs(total - 1.0) <= 1e-9, ErrorKind::MalformedModel,
                    "distribution at " + describe(ctx) + " sums to " + detail::format_double(total));
        }
        for (const auto& [key, vec] : activations_) {
            require(vec.size() == dim_, ErrorKind::MalformedModel, "activation dimension mismatch");
            require(detail::all_finite(vec), ErrorKind::MalformedModel, "activation has non-finite entries");
        }
    }

    Vocabulary vocab_;
    std::size_t order_;
    std::size_t dim_;
    std::map<Context, Distribution> transitions_;
    std::map<ActivationKey, Vector> activations_;
};

}  // namespace actcab
