// actcab: command-line pipeline for probe calibration and confidence-guided decoding.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "actcab/actcab.hpp"
#include "actcab/judge.hpp"
#include "manifest.hpp"

namespace {

using namespace actcab;
using cli::Manifest;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr const char* kJudgeEnv = "ACTCAB_JUDGE_ENDPOINT";

const std::set<std::string> kPathOptions{"--spec", "--out",    "--data",     "--lm",      "--probe",
                                         "--responses", "--config", "--fit-data", "--metrics", "--manifest"};

struct Options {
    std::string spec, out, data, lm, probe, responses, config, fit_data, manifest;
    double test_fraction = 0.0;

    std::size_t n = 4;
    double temperature = 1.0;
    std::size_t max_len = 16;
    std::uint64_t seed = 0;

    std::string labeler = "rouge";
    double rouge_threshold = kDefaultRougeThreshold;
    std::string judge_endpoint;
    std::size_t judge_concurrency = 4;
    int judge_timeout = 30;

    std::string loss = "mse";
    std::size_t k = 5;
    std::size_t epochs = 100;
    std::size_t batch_size = 128;
    double lr = 1e-5;
    std::size_t bins = 10;
    double val_fraction = 0.2;

    std::string method = "probe";

    std::string mode = "greedy";
    double lambda = 0.3;
    std::size_t candidate_k = 7;
    std::size_t n_samples = 4;
    bool trace = false;

    std::vector<std::string> metrics;
    std::vector<std::string> names;
};

std::string absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

/// Explicitly given options of a subcommand, with paths made absolute.
std::vector<std::string> canonical_argv(CLI::App* sub) {
    std::vector<std::string> out{sub->get_name()};
    for (const auto* opt : sub->get_options()) {
        if (opt->count() == 0 || opt->get_lnames().empty()) continue;
        auto name = "--" + opt->get_lnames().front();
        if (name == "--help") continue;
        out.push_back(name);
        if (opt->get_expected_min() == 0) continue;
        for (const auto& v : opt->results()) out.push_back(kPathOptions.count(name) ? absolute_path(v) : v);
    }
    return out;
}

void require_file(const std::string& path, const std::string& what) {
    detail::require(!path.empty(), ErrorKind::InvalidParameter, what + " path is required");
    detail::require(fs::is_regular_file(path), ErrorKind::Load, what + " '" + path + "' does not exist or is not a file");
}

fs::path prepare_out(const std::string& dir) {
    detail::require(!dir.empty(), ErrorKind::InvalidParameter, "--out is required");
    fs::path p = fs::absolute(dir).lexically_normal();
    detail::require(!fs::exists(p) || fs::is_directory(p), ErrorKind::InvalidParameter,
                    "output path '" + p.string() + "' exists and is not a directory");
    fs::create_directories(p);
    return p;
}

template <class Rows>
std::string jsonl(const Rows& rows) {
    std::string s;
    for (const auto& r : rows) s += r.dump() + '\n';
    return s;
}

ojson opt_number(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

// --- gen-world --------------------------------------------------------------

int cmd_gen_world(const Options& o, const std::vector<std::string>& argv) {
    require_file(o.spec, "world spec");
    detail::require(o.test_fraction >= 0.0 && o.test_fraction < 1.0, ErrorKind::InvalidParameter,
                    "--test-fraction must be in [0, 1)");
    auto out = prepare_out(o.out);
    auto spec = load_world_spec(o.spec);
    auto world = build_world(spec);

    Manifest m("gen-world", argv, out);
    m.input("spec", absolute_path(o.spec));
    auto cfg = to_json(spec);
    cfg.erase("facts");
    cfg["n_facts"] = spec.facts.size();
    m.config()["world"] = cfg;
    m.config()["test_fraction"] = o.test_fraction;
    m.seeds()["world"] = spec.seed;

    m.output("lm.json", world.lm.to_json().dump() + '\n');
    std::vector<ojson> rows;
    for (const auto& q : world.queries) rows.push_back(to_json(q));
    m.output("dataset.jsonl", jsonl(rows));

    if (o.test_fraction > 0.0) {
        const auto n = world.queries.size();
        detail::require(n >= 2, ErrorKind::InvalidParameter, "a train/test split needs at least two facts");
        auto n_test = static_cast<std::size_t>(std::floor(o.test_fraction * static_cast<double>(n)));
        n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto split_seed = detail::derive_seed(spec.seed, {detail::fnv1a("train-test-split")});
        std::mt19937_64 rng(split_seed);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<bool> is_test(n, false);
        for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
        std::vector<ojson> train, test;
        for (std::size_t i = 0; i < n; ++i) (is_test[i] ? test : train).push_back(rows[i]);
        m.seeds()["split"] = split_seed;
        m.output("train.jsonl", jsonl(train));
        m.output("test.jsonl", jsonl(test));
        m.summary()["n_train"] = train.size();
        m.summary()["n_test"] = test.size();
    }
    m.summary()["n_queries"] = world.queries.size();
    m.summary()["vocab_size"] = world.lm.vocab().size();
    m.write();
    std::cerr << "gen-world: " << world.queries.size() << " queries, vocabulary " << world.lm.vocab().size() << " -> "
              << out.string() << '\n';
    return 0;
}

// --- sample -----------------------------------------------------------------

int cmd_sample(const Options& o, const std::vector<std::string>& argv) {
    require_file(o.data, "dataset");
    require_file(o.lm, "LM");
    auto out = prepare_out(o.out);
    auto records = load_dataset(o.data);
    auto lm = load_lm(o.lm);
    SamplingConfig sc{o.n, o.temperature, o.max_len, o.seed};

    Manifest m("sample", argv, out);
    m.input("data", absolute_path(o.data));
    m.input("lm", absolute_path(o.lm));
    m.config() = {{"n", sc.n}, {"temperature", sc.temperature}, {"max_len", sc.max_len}};
    m.seeds()["seed"] = sc.seed;

    auto responses = sample_training_responses(lm, records, sc);
    std::vector<ojson> rows;
    for (const auto& r : responses) rows.push_back(to_json(r));
    m.output("responses.jsonl", jsonl(rows));
    m.summary()["n_responses"] = responses.size();
    m.write();
    std::cerr << "sample: " << responses.size() << " responses\n";
    return 0;
}

// --- label ------------------------------------------------------------------

int cmd_label(const Options& o, const std::vector<std::string>& argv) {
    require_file(o.data, "dataset");
    require_file(o.responses, "responses");
    detail::require(o.rouge_threshold >= 0.0 && o.rouge_threshold <= 1.0, ErrorKind::InvalidParameter,
                    "--rouge-threshold must be in [0, 1]");
    std::string endpoint = o.judge_endpoint;
    if (o.labeler == "judge") {
        if (endpoint.empty())
            if (const char* env = std::getenv(kJudgeEnv)) endpoint = env;
        detail::require(!endpoint.empty(), ErrorKind::InvalidParameter,
                        std::string("judge labeling needs --judge-endpoint or ") + kJudgeEnv);
        JudgeEndpoint::parse(endpoint);
        detail::require(o.judge_concurrency >= 1, ErrorKind::InvalidParameter, "--judge-concurrency must be >= 1");
    }
    auto out = prepare_out(o.out);
    auto records = load_dataset(o.data);
    auto responses = load_responses(o.responses);

    Manifest m("label", argv, out);
    m.input("data", absolute_path(o.data));
    m.input("responses", absolute_path(o.responses));
    m.config()["labeler"] = o.labeler;
    if (o.labeler == "rouge") {
        m.config()["rouge_variant"] = "rouge-l-f1";
        m.config()["rouge_threshold"] = o.rouge_threshold;
    } else {
        m.config()["judge_endpoint"] = endpoint;
        m.config()["judge_concurrency"] = o.judge_concurrency;
        m.config()["judge_timeout_s"] = o.judge_timeout;
    }

    auto by_id = index_records(records);
    std::vector<JudgeFailure> failures;
    if (o.labeler == "rouge") {
        for (auto& r : responses) label_with_rouge(r, record_for(by_id, r), o.rouge_threshold);
    } else {
        JudgeOptions jo;
        jo.max_concurrency = o.judge_concurrency;
        jo.timeout = std::chrono::seconds(o.judge_timeout);
        failures = label_with_judge(responses, records, endpoint, jo);
    }

    std::vector<ojson> rows;
    std::size_t correct = 0, labeled = 0;
    for (const auto& r : responses) {
        rows.push_back(to_json(r));
        if (r.correctness) {
            ++labeled;
            correct += static_cast<std::size_t>(*r.correctness);
        }
    }
    m.output("labeled.jsonl", jsonl(rows));
    auto fail_rows = ojson::array();
    for (const auto& f : failures) {
        const auto& r = responses[f.response_index];
        fail_rows.push_back({{"record_id", r.record_id}, {"sample_index", r.sample_index}, {"error", f.message}});
        std::cerr << "label: " << instance_id(r) << " left unlabeled: " << f.message << '\n';
    }
    ojson summary{{"labeler", o.labeler},
                  {"n", responses.size()},
                  {"labeled", labeled},
                  {"unlabeled", responses.size() - labeled},
                  {"correct", correct},
                  {"failures", fail_rows}};
    m.output("label_summary.json", summary.dump(2) + '\n');
    m.summary() = {{"labeled", labeled}, {"unlabeled", responses.size() - labeled}, {"correct", correct}};
    m.write();
    std::cerr << "label: " << labeled << "/" << responses.size() << " labeled, " << correct << " correct\n";
    return 0;
}

// --- train ------------------------------------------------------------------

LossKind parse_loss(const std::string& s) {
    if (s == "mse") return LossKind::MSE;
    if (s == "ece") return LossKind::ECE;
    detail::fail(ErrorKind::InvalidParameter, "loss must be mse or ece, got '" + s + "'");
}

TrainConfig train_config_from_file(const std::string& path) {
    require_file(path, "train config");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(cli::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, "train config '" + path + "' is not valid JSON: " + e.what());
    }
    detail::require(j.is_object(), ErrorKind::Load, "train config must be a JSON object");
    TrainConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "loss") cfg.loss = parse_loss(value.get<std::string>());
            else if (key == "epochs") cfg.epochs = value.get<std::size_t>();
            else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
            else if (key == "learning_rate") cfg.learning_rate = value.get<double>();
            else if (key == "k") cfg.folds = value.get<std::size_t>();
            else if (key == "n_bins") cfg.n_bins = value.get<std::size_t>();
            else if (key == "validation_fraction") cfg.validation_fraction = value.get<double>();
            else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else detail::fail(ErrorKind::Load, "unknown train config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, "train config '" + path + "': " + e.what());
    }
    return cfg;
}

int cmd_train(const Options& o, CLI::App* sub, const std::vector<std::string>& argv) {
    require_file(o.data, "labeled data");
    require_file(o.lm, "LM");
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : train_config_from_file(o.config);
    if (o.config.empty() || sub->count("--loss")) cfg.loss = parse_loss(o.loss);
    if (o.config.empty() || sub->count("--k")) cfg.folds = o.k;
    if (o.config.empty() || sub->count("--epochs")) cfg.epochs = o.epochs;
    if (o.config.empty() || sub->count("--batch-size")) cfg.batch_size = o.batch_size;
    if (o.config.empty() || sub->count("--lr")) cfg.learning_rate = o.lr;
    if (o.config.empty() || sub->count("--bins")) cfg.n_bins = o.bins;
    if (o.config.empty() || sub->count("--val-fraction")) cfg.validation_fraction = o.val_fraction;
    if (o.config.empty() || sub->count("--seed")) cfg.seed = o.seed;
    validate(cfg);
    auto out = prepare_out(o.out);

    auto responses = load_responses(o.data);
    auto lm = load_lm(o.lm);
    auto set = build_instances(lm, responses);
    if (set.skipped_unlabeled) std::cerr << "train: skipping " << set.skipped_unlabeled << " unlabeled responses\n";
    if (set.skipped_empty) std::cerr << "train: skipping " << set.skipped_empty << " empty responses\n";
    detail::require(!set.instances.empty(), ErrorKind::InvalidParameter, "no labeled, non-empty responses in '" + o.data + "'");

    Manifest m("train", argv, out);
    m.input("data", absolute_path(o.data));
    m.input("lm", absolute_path(o.lm));
    if (!o.config.empty()) m.input("config", absolute_path(o.config));
    m.config() = {{"loss", to_string(cfg.loss)},
                  {"epochs", cfg.epochs},
                  {"batch_size", cfg.batch_size},
                  {"learning_rate", cfg.learning_rate},
                  {"k", cfg.folds},
                  {"n_bins", cfg.n_bins},
                  {"validation_fraction", cfg.validation_fraction},
                  {"soft_label_fold_loss", "mse"}};
    m.seeds()["seed"] = cfg.seed;

    std::vector<LabeledInstance> train_set = set.instances;
    if (cfg.loss == LossKind::ECE) {
        auto soft = build_soft_labels_detailed(set.instances, cfg);
        std::vector<ojson> rows;
        for (std::size_t i = 0; i < soft.instances.size(); ++i) {
            auto row = to_json(responses[set.response_index[i]]);
            row["fold"] = soft.folds.fold_of[i];
            row["held_out_confidence"] = soft.held_out_confidences[i];
            row["soft_label"] = *soft.instances[i].soft_label;
            rows.push_back(std::move(row));
        }
        m.output("soft_labels.jsonl", jsonl(rows));
        train_set = std::move(soft.instances);
    }
    auto res = fit_probe(train_set, cfg);
    m.output("probe.json", probe_to_json(res.probe).dump(2) + '\n');
    std::string csv = "epoch,train_loss,validation_loss\n";
    for (const auto& rec : res.curve)
        csv += std::to_string(rec.epoch) + ',' + detail::format_double(rec.train_loss) + ',' +
               (rec.validation_loss ? detail::format_double(*rec.validation_loss) : std::string()) + '\n';
    m.output("training_curve.csv", csv);
    m.summary() = {{"n_instances", set.instances.size()},
                   {"n_train", res.n_train},
                   {"n_validation", res.n_validation},
                   {"best_epoch", res.best_epoch},
                   {"skipped_unlabeled", set.skipped_unlabeled},
                   {"skipped_empty", set.skipped_empty}};
    m.write();
    std::cerr << "train: " << to_string(cfg.loss) << " probe on " << res.n_train << " instances, best epoch " << res.best_epoch
              << '\n';
    return 0;
}

// --- eval-calibration -------------------------------------------------------

struct Scored {
    std::string id;
    Prediction pred;
};

std::vector<Scored> precomputed_predictions(const std::string& path) {
    auto in = detail::open_input(path);
    std::vector<Scored> out;
    detail::for_each_jsonl(in, path, [&](const nlohmann::json& j, std::size_t line) {
        detail::require(j.is_object() && j.contains("confidence") && j.at("confidence").is_number(), ErrorKind::Load,
                        "missing numeric `confidence`");
        const char* key = j.contains("correctness") ? "correctness" : "correct";
        detail::require(j.contains(key) && j.at(key).is_number_integer(), ErrorKind::Load, "missing integer `correctness`");
        std::string id = j.contains("id") && j.at("id").is_string() ? j.at("id").get<std::string>() : std::to_string(line);
        out.push_back({id, {j.at("confidence").get<double>(), j.at(key).get<int>()}});
    });
    return out;
}

int cmd_eval(const Options& o, const std::vector<std::string>& argv) {
    require_file(o.data, "evaluation data");
    const bool needs_lm = o.method != "precomputed";
    if (needs_lm) require_file(o.lm, "LM");
    if (o.method == "probe") require_file(o.probe, "probe");
    if (o.method == "temperature") require_file(o.fit_data, "temperature fit data");
    detail::require(o.bins >= 1, ErrorKind::InvalidParameter, "--bins must be >= 1");
    auto out = prepare_out(o.out);

    Manifest m("eval-calibration", argv, out);
    m.input("data", absolute_path(o.data));
    m.config() = {{"method", o.method}, {"bins", o.bins}};

    std::vector<Scored> scored;
    std::optional<double> temperature;
    if (o.method == "precomputed") {
        scored = precomputed_predictions(o.data);
    } else {
        auto lm = load_lm(o.lm);
        m.input("lm", absolute_path(o.lm));
        auto responses = load_responses(o.data);
        auto set = build_instances(lm, responses);
        if (set.skipped_unlabeled || set.skipped_empty)
            std::cerr << "eval-calibration: skipping " << set.skipped_unlabeled << " unlabeled and " << set.skipped_empty
                      << " empty responses\n";
        std::optional<Probe> probe;
        if (o.method == "probe") {
            probe = load_probe(o.probe);
            m.input("probe", absolute_path(o.probe));
            detail::require(probe->dim() == lm.dim(), ErrorKind::Shape,
                            "probe dimension " + std::to_string(probe->dim()) + " does not match LM dimension " +
                                std::to_string(lm.dim()));
        }
        if (o.method == "temperature") {
            m.input("fit_data", absolute_path(o.fit_data));
            std::vector<LogitObservation> obs;
            for (const auto& r : load_responses(o.fit_data)) {
                auto more = logit_observations(lm, r.prompt_tokens, r.tokens);
                obs.insert(obs.end(), more.begin(), more.end());
            }
            detail::require(!obs.empty(), ErrorKind::InvalidParameter, "temperature fit data has no usable token observations");
            temperature = fit_temperature(obs);
        }
        for (std::size_t i = 0; i < set.instances.size(); ++i) {
            const auto& inst = set.instances[i];
            const auto& r = responses[set.response_index[i]];
            double conf = 0.0;
            if (probe) conf = probe_confidence(*probe, inst.pooled);
            else if (temperature) conf = scaled_sequence_likelihood(lm, r.prompt_tokens, r.tokens, *temperature);
            else conf = sequence_likelihood(token_probabilities(lm, r.prompt_tokens, r.tokens));
            scored.push_back({inst.id, {conf, inst.hard_label}});
        }
    }
    detail::require(!scored.empty(), ErrorKind::InvalidParameter, "no labeled predictions to evaluate in '" + o.data + "'");

    std::vector<Prediction> preds;
    std::vector<ojson> rows;
    for (const auto& s : scored) {
        preds.push_back(s.pred);
        rows.push_back({{"id", s.id}, {"confidence", s.pred.confidence}, {"correctness", s.pred.correct}});
    }
    auto rb = reliability_bins(preds, o.bins);
    MetricSummary summary{ece(rb), brier(preds), accuracy(preds), preds.size()};
    auto metrics = to_json(summary);
    metrics["method"] = o.method;
    if (temperature) metrics["temperature"] = *temperature;
    m.output("metrics.json", metrics.dump(2) + '\n');
    std::ostringstream csv;
    write_reliability_csv(csv, rb);
    m.output("reliability.csv", csv.str());
    m.output("predictions.jsonl", jsonl(rows));
    m.summary() = metrics;
    m.write();
    std::cerr << "eval-calibration: " << o.method << " ece " << summary.ece << " brier " << summary.brier << " n " << summary.n
              << '\n';
    return 0;
}

// --- decode -----------------------------------------------------------------

bool exact_match(const std::string& answer, const QARecord& rec) {
    auto a = rouge_tokens(answer);
    return std::any_of(rec.references.begin(), rec.references.end(), [&](const std::string& ref) { return rouge_tokens(ref) == a; });
}

int cmd_decode(const Options& o, const std::vector<std::string>& argv) {
    require_file(o.data, "dataset");
    require_file(o.lm, "LM");
    if (o.mode != "greedy" || !o.probe.empty()) require_file(o.probe, "probe");
    DecodeConfig cfg{o.lambda, o.candidate_k, o.max_len, o.seed};
    validate(cfg);
    detail::require(o.n_samples >= 1, ErrorKind::InvalidParameter, "--n-samples must be >= 1");
    auto out = prepare_out(o.out);

    auto records = load_dataset(o.data);
    auto lm = load_lm(o.lm);
    std::optional<Probe> probe;
    if (!o.probe.empty()) {
        probe = load_probe(o.probe);
        detail::require(probe->dim() == lm.dim(), ErrorKind::Shape,
                        "probe dimension " + std::to_string(probe->dim()) + " does not match LM dimension " +
                            std::to_string(lm.dim()));
    }

    Manifest m("decode", argv, out);
    m.input("data", absolute_path(o.data));
    m.input("lm", absolute_path(o.lm));
    if (probe) m.input("probe", absolute_path(o.probe));
    m.config() = {{"mode", o.mode}, {"max_len", cfg.max_len}, {"rouge_threshold", o.rouge_threshold}};
    if (o.mode == "codec") {
        m.config()["lambda"] = cfg.lambda;
        m.config()["k"] = cfg.candidate_k;
    }
    if (o.mode == "selective") {
        m.config()["n_samples"] = o.n_samples;
        m.config()["temperature"] = o.temperature;
        m.seeds()["seed"] = o.seed;
    }

    std::vector<ojson> answers, traces;
    double n_correct = 0.0, n_exact = 0.0;
    LmCounters totals;
    std::size_t n_codec_kept = 0;
    for (const auto& rec : records) {
        auto prompt = prompt_tokens(lm.vocab(), rec);
        std::vector<TokenId> tokens;
        std::optional<double> confidence;
        ojson gate_field = nullptr;
        if (o.mode == "greedy") {
            tokens = greedy_decode(lm, prompt, cfg.max_len);
            if (probe && !tokens.empty()) confidence = response_confidence(*probe, activations(lm, prompt, tokens));
            gate_field = to_string(GateChoice::Greedy);
        } else if (o.mode == "codec") {
            auto res = codec_decode(lm, *probe, prompt, cfg);
            tokens = res.tokens;
            confidence = res.trace.response_confidence;
            gate_field = to_string(res.trace.gate);
            n_codec_kept += res.trace.gate == GateChoice::Codec;
            const auto& c = res.trace.guided_counters;
            totals.prefill_tokens += c.prefill_tokens;
            totals.token_computations += c.token_computations;
            totals.candidate_batches += c.candidate_batches;
            totals.pooling_requests += c.pooling_requests;
            if (o.trace)
                for (auto& line : trace_lines(res.trace, lm.vocab(), rec.id, cfg.lambda)) traces.push_back(std::move(line));
        } else {
            auto res = selective_generation(lm, *probe, prompt, o.n_samples, o.temperature, record_seed(o.seed, rec.id), cfg.max_len);
            tokens = res.tokens;
            confidence = res.confidence;
        }
        auto answer = lm.vocab().decode(tokens);
        bool exact = exact_match(answer, rec);
        int correct = label_correctness(answer, rec, o.rouge_threshold);
        n_exact += exact;
        n_correct += correct;
        answers.push_back({{"id", rec.id},
                           {"mode", o.mode},
                           {"answer", answer},
                           {"tokens", tokens},
                           {"confidence", opt_number(confidence)},
                           {"gate", gate_field},
                           {"exact_match", exact ? 1 : 0},
                           {"correctness", correct}});
    }
    const auto n = static_cast<double>(std::max<std::size_t>(records.size(), 1));
    m.output("answers.jsonl", jsonl(answers));
    if (o.trace && o.mode == "codec") m.output("traces.jsonl", jsonl(traces));
    ojson summary{{"mode", o.mode},
                  {"n", records.size()},
                  {"accuracy", n_correct / n},
                  {"exact_match", n_exact / n}};
    if (o.mode == "codec") {
        summary["codec_kept"] = n_codec_kept;
        summary["counters"] = to_json(totals);
    }
    m.output("decode_summary.json", summary.dump(2) + '\n');
    m.summary() = summary;
    m.write();
    std::cerr << "decode: " << o.mode << " exact match " << n_exact / n << " over " << records.size() << " queries\n";
    return 0;
}

// --- report -----------------------------------------------------------------

std::string run_name(const std::string& path) {
    fs::path p(path);
    if (p.stem() == "metrics" && p.has_parent_path()) return p.parent_path().filename().string();
    return p.stem().string();
}

int cmd_report(const Options& o, const std::vector<std::string>& argv) {
    detail::require(!o.metrics.empty(), ErrorKind::InvalidParameter, "report needs at least one metrics file");
    detail::require(o.names.empty() || o.names.size() == o.metrics.size(), ErrorKind::InvalidParameter,
                    "--names must match the number of metrics files");
    for (const auto& f : o.metrics) require_file(f, "metrics file");
    auto out = prepare_out(o.out);
    Manifest m("report", argv, out);

    const std::vector<std::string> fields{"ece", "brier", "accuracy", "n"};
    std::vector<std::vector<std::string>> table{{"run", "ece", "brier", "accuracy", "n"}};
    for (std::size_t i = 0; i < o.metrics.size(); ++i) {
        const auto& path = o.metrics[i];
        m.input("metrics", absolute_path(path));
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(cli::read_file(path));
        } catch (const nlohmann::json::exception& e) {
            detail::fail(ErrorKind::Load, "metrics file '" + path + "' is not valid JSON: " + e.what());
        }
        detail::require(j.is_object(), ErrorKind::Load, "metrics file '" + path + "' must hold a JSON object");
        std::vector<std::string> row{o.names.empty() ? run_name(path) : o.names[i]};
        for (const auto& f : fields) {
            auto it = j.find(f);
            detail::require(it != j.end(), ErrorKind::Load, "metrics file '" + path + "' has no `" + f + "` field");
            bool ok = f == "n" ? it->is_number_unsigned() : it->is_number();
            detail::require(ok, ErrorKind::Load, "metrics file '" + path + "': `" + f + "` has the wrong type");
            row.push_back(it->dump());
        }
        table.push_back(std::move(row));
    }

    std::string csv;
    for (const auto& row : table) {
        for (std::size_t c = 0; c < row.size(); ++c) csv += (c ? "," : "") + row[c];
        csv += '\n';
    }
    std::vector<std::size_t> width(table.front().size(), 3);
    for (const auto& row : table)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    auto md_row = [&](const std::vector<std::string>& row) {
        std::string s = "|";
        for (std::size_t c = 0; c < row.size(); ++c) {
            auto pad = std::string(width[c] - row[c].size(), ' ');
            s += ' ' + (c ? pad + row[c] : row[c] + pad) + " |";
        }
        return s + '\n';
    };
    std::string md = md_row(table.front()) + "|";
    for (std::size_t c = 0; c < width.size(); ++c) md += c ? ' ' + std::string(width[c] - 1, '-') + ": |" : ' ' + std::string(width[c], '-') + " |";
    md += '\n';
    for (std::size_t r = 1; r < table.size(); ++r) md += md_row(table[r]);

    m.output("report.csv", csv);
    m.output("report.md", md);
    m.summary()["rows"] = table.size() - 1;
    m.write();
    std::cout << md;
    return 0;
}

// --- rerun ------------------------------------------------------------------

int run(const std::vector<std::string>& args);

int cmd_rerun(const Options& o) {
    require_file(o.manifest, "manifest");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(cli::read_file(o.manifest));
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, "manifest '" + o.manifest + "' is not valid JSON: " + e.what());
    }
    detail::require(j.is_object() && j.value("format", "") == "actcab.manifest" && j.value("version", 0) == 1, ErrorKind::Load,
                    "'" + o.manifest + "' is not an actcab manifest");
    std::vector<std::string> argv;
    fs::path out_dir;
    try {
        argv = j.at("argv").get<std::vector<std::string>>();
        for (const auto& in : j.at("inputs")) {
            auto path = in.at("path").get<std::string>();
            require_file(path, "recorded input");
            detail::require(cli::sha256_file(path) == in.at("sha256").get<std::string>(), ErrorKind::InvalidParameter,
                            "input '" + path + "' changed since the recorded run");
        }
    } catch (const nlohmann::json::exception& e) {
        detail::fail(ErrorKind::Load, std::string("malformed manifest: ") + e.what());
    }
    auto out_it = std::find(argv.begin(), argv.end(), "--out");
    detail::require(out_it != argv.end() && out_it + 1 != argv.end(), ErrorKind::Load, "manifest argv has no --out");
    if (!o.out.empty()) *(out_it + 1) = absolute_path(o.out);
    out_dir = *(out_it + 1);

    std::cerr << "rerun: actcab";
    for (const auto& a : argv) std::cerr << ' ' << a;
    std::cerr << '\n';
    if (int code = run(argv); code != 0) return code;

    bool all_same = true;
    for (const auto& rec : j.at("outputs")) {
        auto name = rec.at("path").get<std::string>();
        auto path = out_dir / name;
        bool same = fs::is_regular_file(path) && cli::sha256_file(path) == rec.at("sha256").get<std::string>();
        all_same &= same;
        std::cout << (same ? "identical " : "DIFFERS   ") << name << '\n';
    }
    return all_same ? 0 : kExitRuntime;
}

// --- entry ------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
    CLI::App app{"Activation-probe calibration and confidence-guided decoding over tabular LMs", "actcab"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("gen-world", "Build a synthetic QA world: LM tables and dataset");
    gen->add_option("--spec", o.spec, "World spec JSON")->required();
    gen->add_option("--out", o.out, "Output directory")->required();
    gen->add_option("--test-fraction", o.test_fraction, "Also write a train/test split with this test share");

    auto* sample = app.add_subcommand("sample", "Sample responses for every record");
    sample->add_option("--data", o.data, "Dataset JSONL")->required();
    sample->add_option("--lm", o.lm, "LM JSON")->required();
    sample->add_option("--out", o.out, "Output directory")->required();
    sample->add_option("--n", o.n, "Responses per record")->capture_default_str();
    sample->add_option("--temperature", o.temperature, "Sampling temperature")->capture_default_str();
    sample->add_option("--max-len", o.max_len, "Maximum response length")->capture_default_str();
    sample->add_option("--seed", o.seed, "Sampling seed")->capture_default_str();

    auto* label = app.add_subcommand("label", "Label sampled responses as correct or incorrect");
    label->add_option("--data", o.data, "Dataset JSONL")->required();
    label->add_option("--responses", o.responses, "Responses JSONL")->required();
    label->add_option("--out", o.out, "Output directory")->required();
    label->add_option("--labeler", o.labeler, "rouge or judge")->check(CLI::IsMember({"rouge", "judge"}))->capture_default_str();
    label->add_option("--rouge-threshold", o.rouge_threshold, "Correct iff ROUGE-L F1 exceeds this")->capture_default_str();
    label->add_option("--judge-endpoint", o.judge_endpoint, std::string("Judge URL (default: $") + kJudgeEnv + ")");
    label->add_option("--judge-concurrency", o.judge_concurrency, "Concurrent judge requests")->capture_default_str();
    label->add_option("--judge-timeout", o.judge_timeout, "Judge request timeout in seconds")->capture_default_str();

    auto* train = app.add_subcommand("train", "Train a calibration probe");
    train->add_option("--data", o.data, "Labeled responses JSONL")->required();
    train->add_option("--lm", o.lm, "LM JSON")->required();
    train->add_option("--out", o.out, "Output directory")->required();
    train->add_option("--config", o.config, "Train config JSON; flags given explicitly override it");
    train->add_option("--loss", o.loss, "mse or ece")->check(CLI::IsMember({"mse", "ece"}))->capture_default_str();
    train->add_option("--k", o.k, "Folds for soft labels")->capture_default_str();
    train->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
    train->add_option("--batch-size", o.batch_size, "Mini-batch size")->capture_default_str();
    train->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
    train->add_option("--bins", o.bins, "Soft-label bins")->capture_default_str();
    train->add_option("--val-fraction", o.val_fraction, "Validation share")->capture_default_str();
    train->add_option("--seed", o.seed, "Training seed")->capture_default_str();

    auto* eval = app.add_subcommand("eval-calibration", "Compute ECE, Brier and reliability bins");
    eval->add_option("--data", o.data, "Labeled responses JSONL (or predictions for --method precomputed)")->required();
    eval->add_option("--lm", o.lm, "LM JSON");
    eval->add_option("--probe", o.probe, "Probe JSON (method probe)");
    eval->add_option("--out", o.out, "Output directory")->required();
    eval->add_option("--method", o.method, "probe, seq-likelihood, temperature or precomputed")
        ->check(CLI::IsMember({"probe", "seq-likelihood", "temperature", "precomputed"}))
        ->capture_default_str();
    eval->add_option("--fit-data", o.fit_data, "Responses JSONL used to fit the temperature");
    eval->add_option("--bins", o.bins, "Number of bins")->capture_default_str();

    auto* decode = app.add_subcommand("decode", "Answer every record");
    decode->add_option("--data", o.data, "Dataset JSONL")->required();
    decode->add_option("--lm", o.lm, "LM JSON")->required();
    decode->add_option("--probe", o.probe, "Probe JSON (required for codec and selective)");
    decode->add_option("--out", o.out, "Output directory")->required();
    decode->add_option("--mode", o.mode, "greedy, codec or selective")
        ->check(CLI::IsMember({"greedy", "codec", "selective"}))
        ->capture_default_str();
    decode->add_option("--lambda", o.lambda, "Weight of the LM probability in candidate scores")->capture_default_str();
    decode->add_option("--k", o.candidate_k, "Candidates per step")->capture_default_str();
    decode->add_option("--max-len", o.max_len, "Maximum response length")->capture_default_str();
    decode->add_option("--n-samples", o.n_samples, "Samples for selective generation")->capture_default_str();
    decode->add_option("--temperature", o.temperature, "Sampling temperature for selective generation")->capture_default_str();
    decode->add_option("--seed", o.seed, "Sampling seed")->capture_default_str();
    decode->add_option("--rouge-threshold", o.rouge_threshold, "Correctness threshold")->capture_default_str();
    decode->add_flag("--trace", o.trace, "Write per-step traces (codec)");

    auto* report = app.add_subcommand("report", "Tabulate metrics files");
    report->add_option("--metrics", o.metrics, "metrics.json files")->required()->expected(1, -1);
    report->add_option("--names", o.names, "Row names")->expected(1, -1);
    report->add_option("--out", o.out, "Output directory")->required();

    auto* rerun = app.add_subcommand("rerun", "Replay a run from its manifest and compare outputs");
    rerun->add_option("--manifest", o.manifest, "Manifest JSON")->required();
    rerun->add_option("--out", o.out, "Output directory (default: the recorded one)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitValidation;
    }

    try {
        if (*gen) return cmd_gen_world(o, canonical_argv(gen));
        if (*sample) return cmd_sample(o, canonical_argv(sample));
        if (*label) return cmd_label(o, canonical_argv(label));
        if (*train) return cmd_train(o, train, canonical_argv(train));
        if (*eval) return cmd_eval(o, canonical_argv(eval));
        if (*decode) return cmd_decode(o, canonical_argv(decode));
        if (*report) return cmd_report(o, canonical_argv(report));
        if (*rerun) return cmd_rerun(o);
    } catch (const Error& e) {
        std::cerr << "actcab: error: " << e.what() << '\n';
        return e.is_validation() ? kExitValidation : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "actcab: error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
    return run(std::vector<std::string>(argv + 1, argv + argc));
}
