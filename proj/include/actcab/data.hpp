#pragma once

// QA dataset ingestion, response sampling, and ROUGE-L correctness labeling.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "actcab/detail/util.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"

namespace actcab {

struct Demonstration {
    std::string question;
    std::string answer;

    friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

struct QARecord {
    std::string id;
    std::string question;
    std::vector<std::string> references;
    std::vector<Demonstration> demonstrations;

    friend bool operator==(const QARecord&, const QARecord&) = default;
};

inline nlohmann::ordered_json to_json(const QARecord& r) {
    nlohmann::ordered_json j{{"id", r.id}, {"question", r.question}, {"references", r.references}};
    if (!r.demonstrations.empty()) {
        auto demos = nlohmann::ordered_json::array();
        for (const auto& d : r.demonstrations) demos.push_back({{"question", d.question}, {"answer", d.answer}});
        j["demonstrations"] = std::move(demos);
    }
    return j;
}

namespace detail {

inline std::string required_string(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    require(it != j.end(), ErrorKind::Load, std::string("missing `") + key + "`");
    require(it->is_string(), ErrorKind::Load, std::string("`") + key + "` must be a string");
    return it->get<std::string>();
}

inline QARecord record_from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorKind::Load, "record must be a JSON object");
    QARecord r;
    r.id = required_string(j, "id");
    require(!r.id.empty(), ErrorKind::Load, "`id` must be non-empty");
    r.question = required_string(j, "question");
    require(!split_whitespace(r.question).empty(), ErrorKind::Load, "`question` must be non-empty");
    auto refs = j.find("references");
    require(refs != j.end(), ErrorKind::Load, "missing `references`");
    require(refs->is_array() && !refs->empty(), ErrorKind::Load, "`references` must be a non-empty array");
    for (const auto& ref : *refs) {
        require(ref.is_string(), ErrorKind::Load, "`references` entries must be strings");
        r.references.push_back(ref.get<std::string>());
    }
    if (auto demos = j.find("demonstrations"); demos != j.end() && !demos->is_null()) {
        require(demos->is_array(), ErrorKind::Load, "`demonstrations` must be an array");
        for (const auto& d : *demos) {
            require(d.is_object(), ErrorKind::Load, "demonstrations must be objects");
            r.demonstrations.push_back({required_string(d, "question"), required_string(d, "answer")});
        }
    }
    return r;
}

/// Calls `fn(json, line_number)` for every non-blank line, wrapping errors with the line number.
template <class Fn>
void for_each_jsonl(std::istream& in, const std::string& source, Fn&& fn) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            fn(nlohmann::json::parse(line), line_no);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Load, source + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Load) throw;
            fail(ErrorKind::Load, source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Load, "cannot open '" + path + "'");
    return in;
}

}  // namespace detail

inline std::vector<QARecord> read_dataset(std::istream& in, const std::string& source = "<dataset>") {
    std::vector<QARecord> records;
    std::set<std::string> ids;
    detail::for_each_jsonl(in, source, [&](const nlohmann::json& j, std::size_t) {
        auto r = detail::record_from_json(j);
        detail::require(ids.insert(r.id).second, ErrorKind::Load, "duplicate id '" + r.id + "'");
        records.push_back(std::move(r));
    });
    return records;
}

inline std::vector<QARecord> load_dataset(const std::string& path) {
    auto in = detail::open_input(path);
    return read_dataset(in, path);
}

/// Demonstration pairs followed by the question, as one token sequence.
inline std::vector<TokenId> prompt_tokens(const Vocabulary& vocab, const QARecord& record) {
    std::vector<TokenId> out;
    for (const auto& d : record.demonstrations) {
        for (auto id : vocab.encode(d.question)) out.push_back(id);
        for (auto id : vocab.encode(d.answer)) out.push_back(id);
    }
    for (auto id : vocab.encode(record.question)) out.push_back(id);
    return out;
}

// --- sampled responses ------------------------------------------------------

enum class Labeler { Rouge, Judge };

inline const char* to_string(Labeler l) { return l == Labeler::Rouge ? "rouge" : "judge"; }

struct SampledResponse {
    std::string record_id;
    std::size_t sample_index = 0;
    std::vector<TokenId> prompt_tokens;
    std::string text;
    std::vector<TokenId> tokens;
    std::optional<int> correctness;
    std::optional<Labeler> labeler;
    std::optional<double> rouge_score;
};

inline nlohmann::ordered_json to_json(const SampledResponse& r) {
    nlohmann::ordered_json j{{"record_id", r.record_id}, {"sample_index", r.sample_index},
                             {"prompt_tokens", r.prompt_tokens}, {"text", r.text}, {"tokens", r.tokens}};
    if (r.correctness) {
        j["correctness"] = *r.correctness;
        j["labeler"] = to_string(*r.labeler);
        if (r.labeler == Labeler::Rouge) j["rouge_variant"] = "rouge-l-f1";
    }
    if (r.rouge_score) j["rouge_score"] = *r.rouge_score;
    return j;
}

inline SampledResponse response_from_json(const nlohmann::json& j) {
    detail::require(j.is_object(), ErrorKind::Load, "response must be a JSON object");
    SampledResponse r;
    r.record_id = detail::required_string(j, "record_id");
    r.sample_index = j.value("sample_index", std::size_t{0});
    r.text = detail::required_string(j, "text");
    detail::require(j.contains("tokens") && j.at("tokens").is_array(), ErrorKind::Load, "missing `tokens` array");
    r.tokens = j.at("tokens").get<std::vector<TokenId>>();
    detail::require(j.contains("prompt_tokens") && j.at("prompt_tokens").is_array(), ErrorKind::Load,
                    "missing `prompt_tokens` array");
    r.prompt_tokens = j.at("prompt_tokens").get<std::vector<TokenId>>();
    if (auto c = j.find("correctness"); c != j.end() && !c->is_null()) {
        detail::require(c->is_number_integer() && (c->get<int>() == 0 || c->get<int>() == 1), ErrorKind::Load,
                        "`correctness` must be 0 or 1");
        r.correctness = c->get<int>();
        auto lab = detail::required_string(j, "labeler");
        detail::require(lab == "rouge" || lab == "judge", ErrorKind::Load, "`labeler` must be rouge or judge");
        r.labeler = lab == "rouge" ? Labeler::Rouge : Labeler::Judge;
    }
    if (auto s = j.find("rouge_score"); s != j.end() && !s->is_null()) r.rouge_score = s->get<double>();
    return r;
}

inline std::vector<SampledResponse> read_responses(std::istream& in, const std::string& source = "<responses>") {
    std::vector<SampledResponse> out;
    detail::for_each_jsonl(in, source, [&](const nlohmann::json& j, std::size_t) { out.push_back(response_from_json(j)); });
    return out;
}

inline std::vector<SampledResponse> load_responses(const std::string& path) {
    auto in = detail::open_input(path);
    return read_responses(in, path);
}

/// Seed for all sampling done on behalf of one record.
inline std::uint64_t record_seed(std::uint64_t seed, std::string_view record_id) {
    return detail::derive_seed(seed, {detail::fnv1a(record_id)});
}

inline std::uint64_t sample_seed(std::uint64_t record_seed_value, std::size_t index) {
    return detail::derive_seed(record_seed_value, {static_cast<std::uint64_t>(index)});
}

struct SamplingConfig {
    std::size_t n = 4;
    double temperature = 1.0;
    std::size_t max_len = 16;
    std::uint64_t seed = 0;
};

inline std::vector<SampledResponse> sample_training_responses(const LanguageModel& lm, std::span<const QARecord> records,
                                                              const SamplingConfig& cfg) {
    detail::require(cfg.n >= 1, ErrorKind::InvalidParameter, "n must be >= 1");
    std::vector<SampledResponse> out;
    for (const auto& rec : records) {
        auto prompt = prompt_tokens(lm.vocab(), rec);
        auto rs = record_seed(cfg.seed, rec.id);
        for (std::size_t i = 0; i < cfg.n; ++i) {
            SampledResponse r;
            r.record_id = rec.id;
            r.sample_index = i;
            r.prompt_tokens = prompt;
            r.tokens = sample_response(lm, prompt, cfg.temperature, cfg.max_len, sample_seed(rs, i));
            r.text = lm.vocab().decode(r.tokens);
            out.push_back(std::move(r));
        }
    }
    return out;
}

// --- ROUGE-L ----------------------------------------------------------------

/// Lowercased whitespace tokens with punctuation stripped from both ends.
inline std::vector<std::string> rouge_tokens(std::string_view text) {
    std::vector<std::string> out;
    for (auto word : split_whitespace(text)) {
        std::size_t b = 0, e = word.size();
        while (b < e && std::ispunct(static_cast<unsigned char>(word[b]))) ++b;
        while (e > b && std::ispunct(static_cast<unsigned char>(word[e - 1]))) --e;
        if (b == e) continue;
        std::string tok = word.substr(b, e - b);
        for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(std::move(tok));
    }
    return out;
}

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l_f1_tokens(std::span<const std::string> cand, std::span<const std::string> ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    auto lcs = static_cast<double>(lcs_length(cand, ref));
    if (lcs == 0.0) return 0.0;
    double p = lcs / static_cast<double>(cand.size());
    double r = lcs / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

inline double rouge_l_f1(std::string_view candidate, std::string_view reference) {
    auto c = rouge_tokens(candidate);
    auto r = rouge_tokens(reference);
    return rouge_l_f1_tokens(c, r);
}

/// Maximum ROUGE-L F1 over the references.
inline double best_rouge(std::string_view candidate, std::span<const std::string> references) {
    double best = 0.0;
    for (const auto& ref : references) best = std::max(best, rouge_l_f1(candidate, ref));
    return best;
}

inline constexpr double kDefaultRougeThreshold = 0.3;

/// Correct iff the best ROUGE-L F1 over references is strictly above `threshold`.
inline int label_correctness(std::string_view response, const QARecord& record, double threshold = kDefaultRougeThreshold) {
    detail::require(!record.references.empty(), ErrorKind::InvalidParameter, "record has no references");
    return best_rouge(response, record.references) > threshold ? 1 : 0;
}

inline void label_with_rouge(SampledResponse& resp, const QARecord& record, double threshold = kDefaultRougeThreshold) {
    double score = best_rouge(resp.text, record.references);
    resp.rouge_score = score;
    resp.correctness = score > threshold ? 1 : 0;
    resp.labeler = Labeler::Rouge;
}

}  // namespace actcab
