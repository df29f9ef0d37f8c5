#pragma once

// Synthetic QA worlds: builds a TabularLM whose answer-path activations encode
// correctness with a controllable amount of noise, plus the matching queries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "actcab/data.hpp"
#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"

namespace actcab {

struct FactSpec {
    std::string question;
    std::string answer;
    std::vector<std::string> distractors;
};

struct WorldSpec {
    std::vector<FactSpec> facts;
    double knowledge_noise = 0.0;
    std::uint64_t seed = 0;
    std::size_t dim = 8;
    std::size_t context_order = 2;

    // Activation geometry: class means sit at ±signal along a random unit
    // direction, with isotropic Gaussian noise of the given scale.
    double signal = 1.0;
    double activation_noise = 0.5;
    // Range for the LM's probability of starting the correct answer.
    double correct_prob_min = 0.2;
    double correct_prob_max = 0.9;
    // Makes the first distractor the argmax and the correct answer second.
    bool planted_distractor = false;
};

inline constexpr const char* kEosSurface = "</s>";

/// Generated facts with answer tokens unique to each fact, so any context order works.
inline std::vector<FactSpec> synthetic_facts(std::size_t n_facts, std::size_t n_distractors, std::size_t answer_len,
                                             std::size_t offset = 0) {
    detail::require(n_distractors >= 1, ErrorKind::InvalidSpec, "every fact needs at least one distractor");
    detail::require(answer_len >= 1, ErrorKind::InvalidSpec, "answer length must be >= 1");
    std::vector<FactSpec> facts;
    for (std::size_t f = offset; f < offset + n_facts; ++f) {
        auto id = std::to_string(f);
        FactSpec fact;
        fact.question = "what is item" + id + " ?";
        auto make = [&](const std::string& stem) {
            std::string a;
            for (std::size_t t = 0; t < answer_len; ++t) {
                if (t) a += ' ';
                a += stem + "_" + std::to_string(t);
            }
            return a;
        };
        fact.answer = make("ans" + id);
        for (std::size_t d = 0; d < n_distractors; ++d) fact.distractors.push_back(make("alt" + id + "x" + std::to_string(d)));
        facts.push_back(std::move(fact));
    }
    return facts;
}

inline void validate(const WorldSpec& spec) {
    using detail::require;
    require(!spec.facts.empty(), ErrorKind::InvalidSpec, "world has no facts");
    require(spec.knowledge_noise >= 0.0 && spec.knowledge_noise <= 1.0, ErrorKind::InvalidSpec,
            "knowledge_noise must be in [0, 1]");
    require(spec.dim >= 1, ErrorKind::InvalidSpec, "dim must be >= 1");
    require(spec.context_order >= 1, ErrorKind::InvalidSpec, "context_order must be >= 1");
    require(spec.signal >= 0.0 && std::isfinite(spec.signal), ErrorKind::InvalidSpec, "signal must be >= 0");
    require(spec.activation_noise >= 0.0 && std::isfinite(spec.activation_noise), ErrorKind::InvalidSpec,
            "activation_noise must be >= 0");
    require(0.0 < spec.correct_prob_min && spec.correct_prob_min <= spec.correct_prob_max && spec.correct_prob_max < 1.0,
            ErrorKind::InvalidSpec, "need 0 < correct_prob_min <= correct_prob_max < 1");
    for (std::size_t i = 0; i < spec.facts.size(); ++i) {
        const auto& f = spec.facts[i];
        auto where = "fact " + std::to_string(i);
        require(!split_whitespace(f.question).empty(), ErrorKind::InvalidSpec, where + " has an empty question");
        require(!split_whitespace(f.answer).empty(), ErrorKind::InvalidSpec, where + " has an empty answer");
        require(!f.distractors.empty(), ErrorKind::InvalidSpec, where + " needs at least one distractor");
        for (const auto& d : f.distractors) {
            require(!split_whitespace(d).empty(), ErrorKind::InvalidSpec, where + " has an empty distractor");
            require(split_whitespace(d) != split_whitespace(f.answer), ErrorKind::InvalidSpec,
                    where + " has a distractor equal to the answer");
        }
    }
}

struct World {
    TabularLM lm;
    std::vector<QARecord> queries;
};

namespace detail {

struct AnswerTrieNode {
    std::map<TokenId, std::size_t> children;  // token -> node index
    double mass = 0.0;
    double end_mass = 0.0;
    bool on_correct_path = false;
    bool ends_correct = false;
};

class WorldBuilder {
public:
    explicit WorldBuilder(const WorldSpec& spec) : spec_(spec), rng_(spec.seed) {
        std::normal_distribution<double> normal(0.0, 1.0);
        direction_.resize(spec.dim);
        double norm = 0.0;
        for (double& x : direction_) {
            x = normal(rng_);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) direction_[0] = norm = 1.0;
        for (double& x : direction_) x /= norm;

        surfaces_.push_back(kEosSurface);
        index_.emplace(kEosSurface, 0);
    }

    World build() {
        for (std::size_t i = 0; i < spec_.facts.size(); ++i) add_fact(i, spec_.facts[i]);
        World world{TabularLM(Vocabulary(surfaces_, 0), spec_.context_order, spec_.dim, std::move(transitions_),
                              std::move(activations_)),
                    std::move(queries_)};
        return world;
    }

private:
    TokenId intern(const std::string& word) {
        require(word != kEosSurface, ErrorKind::InvalidSpec, std::string("'") + kEosSurface + "' is reserved");
        auto [it, inserted] = index_.emplace(word, static_cast<TokenId>(surfaces_.size()));
        if (inserted) surfaces_.push_back(word);
        return it->second;
    }

    std::vector<TokenId> encode(const std::string& text) {
        std::vector<TokenId> ids;
        for (const auto& w : split_whitespace(text)) ids.push_back(intern(w));
        return ids;
    }

    /// Probability of each answer (correct first) starting the response.
    std::vector<double> answer_masses(std::size_t n_distractors) {
        std::vector<double> mass(n_distractors + 1, 0.0);
        if (spec_.planted_distractor) {
            mass[0] = 0.3;
            if (n_distractors == 1) {
                mass[1] = 0.7;
            } else {
                mass[1] = 0.5;
                for (std::size_t d = 2; d <= n_distractors; ++d) mass[d] = 0.2 / static_cast<double>(n_distractors - 1);
            }
            return mass;
        }
        std::uniform_real_distribution<double> pc(spec_.correct_prob_min, spec_.correct_prob_max);
        std::uniform_real_distribution<double> w(0.1, 1.0);
        mass[0] = pc(rng_);
        double total = 0.0;
        for (std::size_t d = 1; d <= n_distractors; ++d) total += mass[d] = w(rng_);
        for (std::size_t d = 1; d <= n_distractors; ++d) mass[d] *= (1.0 - mass[0]) / total;
        return mass;
    }

    Vector draw_activation(bool truthful) {
        std::bernoulli_distribution scramble(spec_.knowledge_noise);
        std::bernoulli_distribution coin(0.5);
        bool flip = scramble(rng_);
        bool cls = flip ? coin(rng_) : truthful;
        std::normal_distribution<double> normal(0.0, 1.0);
        Vector v(spec_.dim);
        double sign = cls ? 1.0 : -1.0;
        for (std::size_t i = 0; i < spec_.dim; ++i)
            v[i] = sign * spec_.signal * direction_[i] + spec_.activation_noise * normal(rng_);
        return v;
    }

    void add_fact(std::size_t index, const FactSpec& fact) {
        auto question = encode(fact.question);
        std::vector<std::vector<TokenId>> answers{encode(fact.answer)};
        for (const auto& d : fact.distractors) answers.push_back(encode(d));
        auto mass = answer_masses(fact.distractors.size());

        std::vector<AnswerTrieNode> trie(1);
        trie[0].on_correct_path = true;
        for (std::size_t a = 0; a < answers.size(); ++a) {
            std::size_t node = 0;
            trie[0].mass += mass[a];
            for (auto tok : answers[a]) {
                auto it = trie[node].children.find(tok);
                if (it == trie[node].children.end()) {
                    trie.emplace_back();
                    it = trie[node].children.emplace(tok, trie.size() - 1).first;
                }
                node = it->second;
                trie[node].mass += mass[a];
                if (a == 0) trie[node].on_correct_path = true;
            }
            trie[node].end_mass += mass[a];
            if (a == 0) trie[node].ends_correct = true;
        }
        emit(trie, 0, question);

        QARecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "q%05zu", index);
        rec.id = buf;
        rec.question = fact.question;
        rec.references = {fact.answer};
        queries_.push_back(std::move(rec));
    }

    void emit(const std::vector<AnswerTrieNode>& trie, std::size_t node, const std::vector<TokenId>& prefix) {
        const auto& n = trie[node];
        auto ctx = window(prefix);
        TabularLM::Distribution dist;
        if (n.end_mass > 0.0) dist.emplace_back(TokenId{0}, n.end_mass / n.mass);
        for (auto [tok, child] : n.children) dist.emplace_back(tok, trie[child].mass / n.mass);
        // Children are visited in ascending token id and EOS is id 0, so dist is sorted.
        auto [it, inserted] = transitions_.emplace(ctx, dist);
        require(inserted || it->second == dist, ErrorKind::InvalidSpec,
                "facts conflict at a shared context; increase context_order or make the question endings distinct");
        if (n.end_mass > 0.0) add_activation(ctx, 0, n.ends_correct);
        for (auto [tok, child] : n.children) add_activation(ctx, tok, trie[child].on_correct_path);
        for (auto [tok, child] : n.children) {
            auto next = prefix;
            next.push_back(tok);
            emit(trie, child, next);
        }
    }

    void add_activation(const TabularLM::Context& ctx, TokenId tok, bool truthful) {
        TabularLM::ActivationKey key{ctx, tok};
        auto cls = truth_.find(key);
        if (cls != truth_.end()) {
            require(cls->second == truthful, ErrorKind::InvalidSpec,
                    "facts conflict on the truth of a shared (context, token) pair; increase context_order");
            return;
        }
        truth_.emplace(key, truthful);
        activations_.emplace(key, draw_activation(truthful));
    }

    [[nodiscard]] TabularLM::Context window(const std::vector<TokenId>& prefix) const {
        auto n = std::min(spec_.context_order, prefix.size());
        return TabularLM::Context(prefix.end() - static_cast<std::ptrdiff_t>(n), prefix.end());
    }

    const WorldSpec& spec_;
    std::mt19937_64 rng_;
    Vector direction_;
    std::vector<std::string> surfaces_;
    std::map<std::string, TokenId> index_;
    std::map<TabularLM::Context, TabularLM::Distribution> transitions_;
    std::map<TabularLM::ActivationKey, Vector> activations_;
    std::map<TabularLM::ActivationKey, bool> truth_;
    std::vector<QARecord> queries_;
};

}  // namespace detail

/// Builds the LM and the query list; fully determined by the world spec (including its seed).
inline World build_world(const WorldSpec& spec) {
    validate(spec);
    return detail::WorldBuilder(spec).build();
}

inline nlohmann::ordered_json to_json(const WorldSpec& spec) {
    auto facts = nlohmann::ordered_json::array();
    for (const auto& f : spec.facts)
        facts.push_back({{"question", f.question}, {"answer", f.answer}, {"distractors", f.distractors}});
    return nlohmann::ordered_json{{"facts", facts},
                                  {"knowledge_noise", spec.knowledge_noise},
                                  {"seed", spec.seed},
                                  {"dim", spec.dim},
                                  {"context_order", spec.context_order},
                                  {"signal", spec.signal},
                                  {"activation_noise", spec.activation_noise},
                                  {"correct_prob_min", spec.correct_prob_min},
                                  {"correct_prob_max", spec.correct_prob_max},
                                  {"planted_distractor", spec.planted_distractor}};
}

/// Parses a world spec. Besides explicit `facts`, an optional `synthetic`
/// block {n_facts, n_distractors, answer_len} appends generated facts.
inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
    try {
        detail::require(j.is_object(), ErrorKind::InvalidSpec, "world spec must be a JSON object");
        WorldSpec spec;
        if (auto facts = j.find("facts"); facts != j.end()) {
            for (const auto& f : *facts) {
                FactSpec fact{f.at("question").get<std::string>(), f.at("answer").get<std::string>(),
                              f.at("distractors").get<std::vector<std::string>>()};
                spec.facts.push_back(std::move(fact));
            }
        }
        if (auto syn = j.find("synthetic"); syn != j.end()) {
            auto more = synthetic_facts(syn->at("n_facts").get<std::size_t>(), syn->value("n_distractors", std::size_t{3}),
                                        syn->value("answer_len", std::size_t{2}), spec.facts.size());
            spec.facts.insert(spec.facts.end(), more.begin(), more.end());
        }
        spec.knowledge_noise = j.at("knowledge_noise").get<double>();
        spec.seed = j.at("seed").get<std::uint64_t>();
        spec.dim = j.value("dim", spec.dim);
        spec.context_order = j.value("context_order", spec.context_order);
        spec.signal = j.value("signal", spec.signal);
        spec.activation_noise = j.value("activation_noise", spec.activation_noise);
        spec.correct_prob_min = j.value("correct_prob_min", spec.correct_prob_min);
        spec.correct_prob_max = j.value("correct_prob_max", spec.correct_prob_max);
        spec.planted_distractor = j.value("planted_distractor", spec.planted_distractor);
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::InvalidSpec, std::string("malformed world spec: ") + e.what());
    }
}

inline WorldSpec load_world_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require(static_cast<bool>(in), ErrorKind::InvalidSpec, "cannot open world spec '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::InvalidSpec, "world spec '" + path + "' is not valid JSON: " + e.what());
    }
    return world_spec_from_json(j);
}

inline void save_lm(const TabularLM& lm, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    detail::require(static_cast<bool>(out), ErrorKind::Load, "cannot open '" + path + "' for writing");
    out << lm.to_json().dump() << '\n';
}

inline TabularLM load_lm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    detail::require(static_cast<bool>(in), ErrorKind::Load, "cannot open LM file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, "LM file '" + path + "' is not valid JSON: " + e.what());
    }
    return TabularLM::from_json(j);
}

}  // namespace actcab
