#pragma once

// HTTP client for an external semantic-equivalence judge. The request is a JSON
// POST {question, reference, response, prompt}; the reply is either a JSON
// object with a string `reply` field or plain text. Only the leading Yes/No of
// the reply is interpreted.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstddef>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "actcab/data.hpp"
#include "actcab/errors.hpp"

namespace actcab {

inline constexpr const char* kJudgePromptTemplate =
    "Are the following two answers to my question \n"
    "\"[Question]\" semantically equivalent? (Answer \n"
    "\"Yes\" or \"No\" first, and then explain your \n"
    "answer.)\n"
    "1. [Reference]\n"
    "2. [Model Response]";

inline std::string build_judge_prompt(std::string_view question, std::string_view reference, std::string_view response) {
    std::string out = kJudgePromptTemplate;
    auto fill = [&out](std::string_view slot, std::string_view value) {
        auto pos = out.find(slot);
        if (pos != std::string::npos) out.replace(pos, slot.size(), value);
    };
    fill("[Question]", question);
    fill("[Reference]", reference);
    fill("[Model Response]", response);
    return out;
}

/// 1 for a leading "yes", 0 for a leading "no", nothing otherwise.
inline std::optional<int> parse_judge_reply(std::string_view reply) {
    std::size_t i = 0;
    while (i < reply.size() && (std::isspace(static_cast<unsigned char>(reply[i])) || std::ispunct(static_cast<unsigned char>(reply[i]))))
        ++i;
    std::string word;
    while (i < reply.size() && std::isalpha(static_cast<unsigned char>(reply[i])))
        word += static_cast<char>(std::tolower(static_cast<unsigned char>(reply[i++])));
    if (word == "yes") return 1;
    if (word == "no") return 0;
    return std::nullopt;
}

struct JudgeEndpoint {
    std::string base;  // scheme://host[:port]
    std::string path = "/";

    static JudgeEndpoint parse(const std::string& url) {
        auto scheme = url.find("://");
        detail::require(scheme != std::string::npos, ErrorKind::InvalidParameter, "judge endpoint must be a URL: '" + url + "'");
        auto slash = url.find('/', scheme + 3);
        JudgeEndpoint ep;
        ep.base = url.substr(0, slash);
        if (slash != std::string::npos) ep.path = url.substr(slash);
        return ep;
    }
};

struct JudgeOptions {
    std::chrono::seconds timeout{30};
    std::size_t max_concurrency = 4;
};

/// One judge request. Network failures and unparseable replies throw Error(Judge).
inline int judge_equivalence(const std::string& endpoint, const std::string& question, const std::string& reference,
                             const std::string& response, const JudgeOptions& opts = {}) {
    auto ep = JudgeEndpoint::parse(endpoint);
    httplib::Client client(ep.base);
    client.set_connection_timeout(opts.timeout);
    client.set_read_timeout(opts.timeout);
    nlohmann::json body{{"question", question},
                        {"reference", reference},
                        {"response", response},
                        {"prompt", build_judge_prompt(question, reference, response)}};
    auto res = client.Post(ep.path, body.dump(), "application/json");
    if (!res) detail::fail(ErrorKind::Judge, "request to " + endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) detail::fail(ErrorKind::Judge, "judge returned HTTP " + std::to_string(res->status));
    std::string reply = res->body;
    auto parsed = nlohmann::json::parse(res->body, nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) {
        auto it = parsed.find("reply");
        if (it == parsed.end() || !it->is_string()) detail::fail(ErrorKind::Judge, "judge JSON reply has no string `reply`");
        reply = it->get<std::string>();
    }
    auto verdict = parse_judge_reply(reply);
    if (!verdict) detail::fail(ErrorKind::Judge, "cannot parse judge reply: '" + reply.substr(0, 80) + "'");
    return *verdict;
}

struct JudgeFailure {
    std::size_t response_index = 0;
    std::string message;
};

/// Labels every response against its record's first reference. Failed
/// instances stay unlabeled and are reported; at most `max_concurrency`
/// requests are in flight.
inline std::vector<JudgeFailure> label_with_judge(std::vector<SampledResponse>& responses, const std::vector<QARecord>& records,
                                                  const std::string& endpoint, const JudgeOptions& opts = {}) {
    detail::require(opts.max_concurrency >= 1, ErrorKind::InvalidParameter, "judge concurrency must be >= 1");
    JudgeEndpoint::parse(endpoint);
    std::map<std::string, const QARecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    for (const auto& resp : responses)
        detail::require(by_id.count(resp.record_id) == 1, ErrorKind::InvalidParameter,
                        "response refers to unknown record '" + resp.record_id + "'");

    std::vector<std::optional<int>> verdicts(responses.size());
    std::vector<std::string> errors(responses.size());
    for (std::size_t start = 0; start < responses.size(); start += opts.max_concurrency) {
        auto stop = std::min(start + opts.max_concurrency, responses.size());
        std::vector<std::future<void>> inflight;
        for (auto i = start; i < stop; ++i) {
            inflight.push_back(std::async(std::launch::async, [&, i] {
                const auto& rec = *by_id.at(responses[i].record_id);
                try {
                    verdicts[i] = judge_equivalence(endpoint, rec.question, rec.references.front(), responses[i].text, opts);
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }));
        }
        for (auto& f : inflight) f.get();
    }

    std::vector<JudgeFailure> failures;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        if (verdicts[i]) {
            responses[i].correctness = *verdicts[i];
            responses[i].labeler = Labeler::Judge;
        } else {
            responses[i].correctness.reset();
            responses[i].labeler.reset();
            failures.push_back({i, errors[i]});
        }
    }
    return failures;
}

}  // namespace actcab
