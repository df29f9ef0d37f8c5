#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "actcab/judge.hpp"

using namespace actcab;

namespace {

// Replies with whatever the response text asks for, so one server covers every case.
class MockJudge {
public:
    MockJudge() {
        server_.Post("/judge", [this](const httplib::Request& req, httplib::Response& res) {
            ++requests_;
            auto body = nlohmann::json::parse(req.body);
            {
                std::lock_guard lock(mu_);
                last_prompt_ = body.at("prompt").get<std::string>();
            }
            auto response = body.at("response").get<std::string>();
            if (response == "json-yes") {
                res.set_content(R"({"reply":"Yes. They match."})", "application/json");
            } else if (response == "server-error") {
                res.status = 500;
            } else {
                res.set_content(response, "text/plain");
            }
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockJudge() {
        server_.stop();
        thread_.join();
    }
    [[nodiscard]] std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/judge"; }
    [[nodiscard]] int requests() const { return requests_; }
    [[nodiscard]] std::string last_prompt() {
        std::lock_guard lock(mu_);
        return last_prompt_;
    }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> requests_{0};
    std::mutex mu_;
    std::string last_prompt_;
};

}  // namespace

TEST(JudgeReply, LeadingYesNo) {
    EXPECT_EQ(parse_judge_reply("Yes, because they match"), 1);
    EXPECT_EQ(parse_judge_reply("No."), 0);
    EXPECT_EQ(parse_judge_reply("  **yes** "), 1);
    EXPECT_EQ(parse_judge_reply("\"NO\""), 0);
    EXPECT_FALSE(parse_judge_reply("Maybe").has_value());
    EXPECT_FALSE(parse_judge_reply("Yesterday").has_value());
    EXPECT_FALSE(parse_judge_reply("").has_value());
}

TEST(JudgePrompt, TemplateFilled) {
    auto p = build_judge_prompt("Who wrote it?", "Ann", "Bob");
    EXPECT_EQ(p,
              "Are the following two answers to my question \n\"Who wrote it?\" semantically equivalent? (Answer \n"
              "\"Yes\" or \"No\" first, and then explain your \nanswer.)\n1. Ann\n2. Bob");
}

TEST(Judge, MockServerVerdicts) {
    MockJudge mock;
    EXPECT_EQ(judge_equivalence(mock.url(), "q", "r", "Yes, because..."), 1);
    EXPECT_EQ(judge_equivalence(mock.url(), "q", "r", "No."), 0);
    EXPECT_EQ(judge_equivalence(mock.url(), "q", "r", "json-yes"), 1);
    EXPECT_EQ(mock.last_prompt(), build_judge_prompt("q", "r", "json-yes"));
    try {
        (void)judge_equivalence(mock.url(), "q", "r", "Maybe");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Judge);
    }
    EXPECT_THROW((void)judge_equivalence(mock.url(), "q", "r", "server-error"), Error);
}

TEST(Judge, UnreachableEndpoint) {
    JudgeOptions opts;
    opts.timeout = std::chrono::seconds(2);
    EXPECT_THROW((void)judge_equivalence("http://127.0.0.1:1/judge", "q", "r", "x", opts), Error);
    EXPECT_THROW((void)judge_equivalence("not a url", "q", "r", "x", opts), Error);
}

TEST(Judge, BatchLeavesFailuresUnlabeled) {
    MockJudge mock;
    std::vector<QARecord> records{{"a", "who ?", {"ann"}, {}}};
    std::vector<SampledResponse> responses;
    for (std::string text : {"Yes", "No", "Maybe", "json-yes", "server-error", "yes!"}) {
        SampledResponse r;
        r.record_id = "a";
        r.sample_index = responses.size();
        r.text = text;
        responses.push_back(r);
    }
    JudgeOptions opts;
    opts.max_concurrency = 2;
    auto failures = label_with_judge(responses, records, mock.url(), opts);
    EXPECT_EQ(mock.requests(), 6);
    ASSERT_EQ(failures.size(), 2u);
    EXPECT_EQ(failures[0].response_index, 2u);
    EXPECT_EQ(failures[1].response_index, 4u);
    EXPECT_EQ(responses[0].correctness, 1);
    EXPECT_EQ(responses[1].correctness, 0);
    EXPECT_FALSE(responses[2].correctness.has_value());
    EXPECT_FALSE(responses[2].labeler.has_value());
    EXPECT_EQ(responses[3].correctness, 1);
    EXPECT_EQ(responses[5].labeler, Labeler::Judge);
}
