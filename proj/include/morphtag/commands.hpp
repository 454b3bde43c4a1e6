#pragma once

// Subcommand implementations shared by the CLI and the tests. Each command reads
// its inputs from a RunConfig, writes files, and prints a JSON report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphtag/corpus.hpp"
#include "morphtag/evalkit.hpp"
#include "morphtag/model.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitUsage = 2, kExitInternal = 3 };

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string scheme;  // empty: built-in standard scheme
    std::string train, dev, test, unseen, model, output, log, report;
    std::vector<std::string> predictions;
    std::vector<std::string> orders;
    ModelConfig model_config;
    TrainOptions training;
    std::size_t jobs = 1;
    std::size_t threshold = 100;
    std::optional<std::size_t> sample;
    std::size_t top_k = 10;
    Averaging averaging = Averaging::Category;
    SynthOptions synth;

    /// Keys mirror the long flag names; "model_config" holds a ModelConfig object.
    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        auto get = [&](const char* key, auto& out) {
            if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
        };
        get("scheme", c.scheme);
        get("train", c.train);
        get("dev", c.dev);
        get("test", c.test);
        get("unseen", c.unseen);
        get("model", c.model);
        get("output", c.output);
        get("log", c.log);
        get("report", c.report);
        get("predictions", c.predictions);
        get("orders", c.orders);
        if (j.contains("model_config")) c.model_config = ModelConfig::from_json(j.at("model_config"));
        get("epochs", c.training.epochs);
        get("patience", c.training.patience);
        get("stop_when_perfect", c.training.stop_when_perfect);
        get("jobs", c.jobs);
        get("threshold", c.threshold);
        if (j.contains("sample")) c.sample = j.at("sample").get<std::size_t>();
        get("top_k", c.top_k);
        if (j.contains("averaging")) {
            const auto a = j.at("averaging").get<std::string>();
            if (a == "category") c.averaging = Averaging::Category;
            else if (a == "value") c.averaging = Averaging::Value;
            else throw UsageError("averaging must be 'category' or 'value', got '" + a + "'");
        }
        if (j.contains("seed")) c.model_config.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open config file: " + path);
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("config " + path + ": " + e.what());
        }
    }
};

namespace detail {

inline void require_path(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string("missing required option ") + flag);
}

inline void require_file(const std::string& path, const char* flag) {
    require_path(path, flag);
    if (!std::filesystem::is_regular_file(path)) throw ValidationError(std::string(flag) + ": no such file: " + path);
}

inline TagScheme load_scheme(const RunConfig& cfg) {
    if (cfg.scheme.empty()) return TagScheme::standard();
    require_file(cfg.scheme, "--scheme");
    return TagScheme::load(cfg.scheme);
}

inline Corpus load_corpus(const std::string& path, const char* flag, const TagScheme& scheme) {
    require_file(path, flag);
    return load_tsv(path, scheme);
}

inline void emit(const RunConfig& cfg, std::ostream& out, const nlohmann::json& report) {
    if (cfg.report.empty()) {
        out << report.dump(2) << '\n';
        return;
    }
    std::ofstream f(cfg.report);
    if (!f) throw ValidationError("cannot write report: " + cfg.report);
    f << report.dump(2) << '\n';
}

inline TagScheme model_scheme_checked(const RunConfig& cfg, const TaggerModel& model) {
    if (!cfg.scheme.empty()) {
        const auto given = load_scheme(cfg);
        if (!(given == model.scheme()))
            throw ValidationError("scheme mismatch: " + cfg.scheme + " differs from the scheme stored in " + cfg.model);
    }
    return model.scheme();
}

}  // namespace detail

/// Coverage check over --train; optional greedy sample (--sample N to --output);
/// optional unseen split of --test against --train written to --unseen.
inline int cmd_prepare(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    const auto scheme = detail::load_scheme(cfg);
    const auto corpus = detail::load_corpus(cfg.train, "--train", scheme);
    if (cfg.threshold < 1) throw UsageError("--threshold must be >= 1");

    nlohmann::json report = {{"schema", "morphtag.prepare/1"}, {"sentences", corpus.size()}, {"tokens", corpus.token_count()}};
    Corpus checked = corpus;
    if (cfg.sample) {
        detail::require_path(cfg.output, "--output");
        checked = sample_for_coverage(corpus, scheme, cfg.threshold, *cfg.sample);
        save_tsv(cfg.output, checked, scheme);
        report["sample"] = {{"path", cfg.output}, {"sentences", checked.size()}, {"tokens", checked.token_count()}};
    }
    const auto coverage = check_feature_coverage(checked, scheme, cfg.threshold);
    report["coverage"] = coverage_to_json(coverage, scheme);

    if (!cfg.test.empty()) {
        detail::require_path(cfg.unseen, "--unseen");
        const auto pool = detail::load_corpus(cfg.test, "--test", scheme);
        const auto unseen = split_unseen(checked, pool, scheme);
        save_tsv(cfg.unseen, unseen, scheme);
        if (unseen.empty()) err << "warning: unseen split is empty (every label in " << cfg.test << " occurs in training)\n";
        report["unseen"] = {{"path", cfg.unseen}, {"sentences", unseen.size()}, {"tokens", unseen.token_count()}};
    }
    detail::emit(cfg, out, report);
    return coverage.passed() ? kExitOk : kExitValidation;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    const auto scheme = detail::load_scheme(cfg);
    const auto train_corpus = detail::load_corpus(cfg.train, "--train", scheme);
    const Corpus dev = cfg.dev.empty() ? Corpus{} : detail::load_corpus(cfg.dev, "--dev", scheme);
    detail::require_path(cfg.model, "--model");

    auto model = TaggerModel::build(cfg.model_config, train_corpus, scheme);
    const std::string log_path = cfg.log.empty() ? cfg.model + ".log.jsonl" : cfg.log;
    std::ofstream log_out(log_path);
    if (!log_out) throw ValidationError("cannot write training log: " + log_path);
    const auto log = train(model, train_corpus, dev, cfg.training, &log_out);
    model.save(cfg.model);

    const auto train_metrics = evaluate_model(model, train_corpus, cfg.jobs);
    nlohmann::json report = {{"schema", "morphtag.train/1"},
                             {"kind", std::string(kind_name(model.kind()))},
                             {"model", cfg.model},
                             {"log", log_path},
                             {"parameters", model.params().total_entries()},
                             {"epochs_run", log.epochs.size()},
                             {"best_epoch", log.best_epoch},
                             {"train", metrics_to_json(train_metrics)}};
    if (!dev.empty()) report["dev"] = metrics_to_json(evaluate_model(model, dev, cfg.jobs));
    detail::emit(cfg, out, report);
    return kExitOk;
}

/// Tags --test with --model and writes the prediction file to --output.
inline int cmd_tag(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    detail::require_file(cfg.model, "--model");
    detail::require_path(cfg.output, "--output");
    const auto model = TaggerModel::load(cfg.model);
    const auto scheme = detail::model_scheme_checked(cfg, model);
    const auto corpus = detail::load_corpus(cfg.test, "--test", scheme);
    const auto file = align(corpus, predict_corpus(model, corpus, cfg.jobs));
    std::ofstream f(cfg.output);
    if (!f) throw ValidationError("cannot write predictions: " + cfg.output);
    write_predictions(f, file, scheme);
    nlohmann::json report = {{"schema", "morphtag.tag/1"},
                             {"output", cfg.output},
                             {"sentences", file.sentences.size()},
                             {"tokens", file.token_count()}};
    detail::emit(cfg, out, report);
    return kExitOk;
}

namespace detail {
inline PredictionFile load_single_predictions(const RunConfig& cfg, const TagScheme& scheme) {
    if (cfg.predictions.size() != 1) throw UsageError("expected exactly one prediction file");
    require_file(cfg.predictions.front(), "--predictions");
    return load_predictions(cfg.predictions.front(), scheme);
}
}  // namespace detail

inline int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    const auto scheme = detail::load_scheme(cfg);
    const auto file = detail::load_single_predictions(cfg, scheme);
    detail::emit(cfg, out, metrics_to_json(evaluate(scheme, file, {cfg.averaging, cfg.jobs})));
    return kExitOk;
}

/// Metrics plus top-k misprediction pairs, syncretism-restricted F1 and, with
/// --train, the unseen-label report. Syncretism is judged on train + the gold side
/// of the prediction file.
inline int cmd_analyze(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    const auto scheme = detail::load_scheme(cfg);
    const auto file = detail::load_single_predictions(cfg, scheme);

    Corpus reference;
    if (!cfg.train.empty()) reference = detail::load_corpus(cfg.train, "--train", scheme);
    for (const auto& s : file.sentences) {
        Sentence copy;
        for (const auto& t : s.tokens) copy.tokens.push_back({t.surface, t.gold});
        reference.sentences.push_back(std::move(copy));
    }
    const auto index = SyncretismIndex::build(reference, scheme);
    const auto top = misprediction_pairs(scheme, file, cfg.top_k);

    nlohmann::json report = {{"schema", "morphtag.analyze/1"},
                             {"metrics", metrics_to_json(evaluate(scheme, file, {cfg.averaging, cfg.jobs}))},
                             {"top_k", cfg.top_k},
                             {"mispredictions", pairs_to_json(top)},
                             {"syncretism", restricted_to_json(syncretism_f1(scheme, file, index, top))}};
    if (!cfg.train.empty()) {
        const auto train_corpus = detail::load_corpus(cfg.train, "--train", scheme);
        report["unseen"] = restricted_to_json(unseen_report(scheme, file, label_set(train_corpus, scheme)));
    } else {
        report["unseen"] = nullptr;
    }
    detail::emit(cfg, out, report);
    return kExitOk;
}

/// Pairwise paired t-tests on per-sentence macro F1 over >= 2 aligned prediction files.
inline int cmd_compare(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    if (cfg.predictions.size() < 2) throw UsageError("compare needs at least two prediction files");
    const auto scheme = detail::load_scheme(cfg);
    std::vector<PredictionFile> files;
    std::vector<std::vector<double>> scores;
    for (const auto& path : cfg.predictions) {
        detail::require_file(path, "--predictions");
        files.push_back(load_predictions(path, scheme));
        scores.push_back(sentence_macro_f1(scheme, files.back(), cfg.averaging));
    }
    for (std::size_t i = 1; i < files.size(); ++i) {
        const auto& a = files.front().sentences;
        const auto& b = files[i].sentences;
        bool same = a.size() == b.size();
        for (std::size_t s = 0; same && s < a.size(); ++s) {
            same = a[s].tokens.size() == b[s].tokens.size();
            for (std::size_t t = 0; same && t < a[s].tokens.size(); ++t)
                same = a[s].tokens[t].surface == b[s].tokens[t].surface && a[s].tokens[t].gold == b[s].tokens[t].gold;
        }
        if (!same) throw MisalignedError(cfg.predictions[i] + " is not aligned with " + cfg.predictions.front());
    }
    nlohmann::json systems = nlohmann::json::array();
    for (std::size_t i = 0; i < files.size(); ++i)
        systems.push_back({{"path", cfg.predictions[i]}, {"metrics", metrics_to_json(evaluate(scheme, files[i], {cfg.averaging, cfg.jobs}))}});
    nlohmann::json matrix = nlohmann::json::array();
    for (std::size_t i = 0; i < files.size(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < files.size(); ++j) row.push_back(ttest_to_json(paired_ttest(scores[i], scores[j])));
        matrix.push_back(row);
    }
    detail::emit(cfg, out, {{"schema", "morphtag.compare/1"}, {"systems", systems}, {"ttest", matrix}});
    return kExitOk;
}

/// Trains MTL-Hierarchy once per order (shared seed) and scores --test (or --dev).
inline int cmd_hierarchy_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    if (cfg.orders.empty()) throw UsageError("sweep needs at least one hierarchy order");
    for (const auto& o : cfg.orders) Hierarchy::parse(o);
    const auto scheme = detail::load_scheme(cfg);
    const auto train_corpus = detail::load_corpus(cfg.train, "--train", scheme);
    const Corpus dev = cfg.dev.empty() ? Corpus{} : detail::load_corpus(cfg.dev, "--dev", scheme);
    const Corpus eval_corpus = cfg.test.empty() ? dev : detail::load_corpus(cfg.test, "--test", scheme);
    if (eval_corpus.empty()) throw UsageError("sweep needs --test or --dev to score against");

    nlohmann::json rows = nlohmann::json::object();
    for (const auto& order : cfg.orders) {
        ModelConfig mc = cfg.model_config;
        mc.kind = ModelKind::MtlHierarchy;
        mc.hierarchy = order;
        auto model = TaggerModel::build(mc, train_corpus, scheme);
        train(model, train_corpus, dev, cfg.training);
        const auto m = evaluate_model(model, eval_corpus, cfg.jobs);
        nlohmann::json per_cat = nlohmann::json::object();
        for (auto c : kCategories) per_cat[std::string(category_name(c))] = optional_json(m.category_f1(c));
        rows[order] = {{"token_accuracy", optional_json(m.token_accuracy)},
                       {"macro_f1", optional_json(m.macro_f1)},
                       {"micro_f1", optional_json(m.micro_f1)},
                       {"categories", per_cat}};
        err << "sweep: " << order << " done\n";
    }
    detail::emit(cfg, out, {{"schema", "morphtag.sweep/1"}, {"orders", cfg.orders}, {"results", rows}});
    return kExitOk;
}

/// Writes a synthetic corpus to --output.
inline int cmd_synth(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    detail::require_path(cfg.output, "--output");
    const auto scheme = detail::load_scheme(cfg);
    const auto corpus = synthesize_corpus(scheme, cfg.synth);
    save_tsv(cfg.output, corpus, scheme);
    detail::emit(cfg, out,
                 {{"schema", "morphtag.synth/1"}, {"output", cfg.output}, {"sentences", corpus.size()}, {"tokens", corpus.token_count()}});
    return kExitOk;
}

/// Runs `fn` and maps exceptions to exit codes with a one-line message on `err`.
template <class Fn>
int run_guarded(Fn&& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const CorpusError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const TagError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const MisalignedError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
}

}  // namespace morphtag
