#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "morphtag/commands.hpp"

using namespace morphtag;

namespace {

struct Flags {
    std::string config;
    std::string scheme, train, dev, test, unseen, model, output, log, report;
    std::vector<std::string> predictions, orders;
    std::string kind, hierarchy, averaging;
    std::uint64_t seed = 42;
    std::size_t jobs = 1, epochs = 300, patience = 10, threshold = 100, sample = 0, top_k = 10;
    std::size_t sentences = 20, min_value_count = 0, min_length = 3, max_length = 8;
};

// Options explicitly given on the command line override the --config file.
RunConfig resolve(const Flags& f, CLI::App& sub) {
    RunConfig c = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
    auto given = [&](const char* name) {
        auto* opt = sub.get_option_no_throw(name);
        return opt && opt->count() > 0;
    };
    auto take = [&](const char* name, auto& dst, const auto& src) {
        if (given(name)) dst = src;
    };
    take("--scheme", c.scheme, f.scheme);
    take("--train", c.train, f.train);
    take("--dev", c.dev, f.dev);
    take("--test", c.test, f.test);
    take("--unseen", c.unseen, f.unseen);
    take("--model", c.model, f.model);
    take("--output", c.output, f.output);
    take("--log", c.log, f.log);
    take("--report", c.report, f.report);
    take("--predictions", c.predictions, f.predictions);
    take("--orders", c.orders, f.orders);
    take("--seed", c.model_config.seed, f.seed);
    take("--jobs", c.jobs, f.jobs);
    take("--epochs", c.training.epochs, f.epochs);
    take("--patience", c.training.patience, f.patience);
    take("--threshold", c.threshold, f.threshold);
    take("--top-k", c.top_k, f.top_k);
    take("--hierarchy", c.model_config.hierarchy, f.hierarchy);
    take("--sentences", c.synth.sentences, f.sentences);
    take("--min-value-count", c.synth.min_value_count, f.min_value_count);
    take("--min-length", c.synth.min_length, f.min_length);
    take("--max-length", c.synth.max_length, f.max_length);
    if (given("--seed")) c.synth.seed = f.seed;
    if (given("--sample")) c.sample = f.sample;
    if (given("--kind")) {
        auto k = kind_from_name(f.kind);
        if (!k) throw UsageError("unknown model kind '" + f.kind + "' (MonSeq, FCRF, Seq, MTL-Shared, MTL-Hierarchy)");
        c.model_config.kind = *k;
    }
    if (given("--averaging")) c.averaging = f.averaging == "value" ? Averaging::Value : Averaging::Category;
    if (c.jobs == 0) throw UsageError("--jobs must be >= 1");
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Morphological tagging with composite labels"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", f.config, "JSON run config; flags override it");
        s->add_option("--scheme", f.scheme, "tag scheme JSON (default: built-in)");
        s->add_option("--jobs", f.jobs, "worker threads for tagging/evaluation");
        s->add_option("--report", f.report, "write the JSON report here instead of stdout");
    };
    auto model_flags = [&](CLI::App* s) {
        s->add_option("--kind", f.kind, "MonSeq | FCRF | Seq | MTL-Shared | MTL-Hierarchy");
        s->add_option("--hierarchy", f.hierarchy, "MTL-Hierarchy order, e.g. N-G-C-T-L or N+G-C");
        s->add_option("--seed", f.seed);
        s->add_option("--epochs", f.epochs);
        s->add_option("--patience", f.patience, "0 disables early stopping");
    };

    std::vector<std::pair<CLI::App*, std::function<int(const RunConfig&, std::ostream&, std::ostream&)>>> commands;

    auto* prepare = app.add_subcommand("prepare", "coverage check, greedy sampling, unseen split");
    common(prepare);
    prepare->add_option("--train", f.train, "raw corpus TSV");
    prepare->add_option("--threshold", f.threshold, "minimum instances per feature value");
    prepare->add_option("--sample", f.sample, "greedy-sample at most N sentences into --output");
    prepare->add_option("--output", f.output);
    prepare->add_option("--test", f.test, "pool for the unseen split");
    prepare->add_option("--unseen", f.unseen, "where to write the unseen split");
    commands.emplace_back(prepare, cmd_prepare);

    auto* trainc = app.add_subcommand("train", "train a model");
    common(trainc);
    model_flags(trainc);
    trainc->add_option("--train", f.train);
    trainc->add_option("--dev", f.dev);
    trainc->add_option("--model", f.model, "output model file");
    trainc->add_option("--log", f.log, "training log (default: <model>.log.jsonl)");
    commands.emplace_back(trainc, cmd_train);

    auto* tag = app.add_subcommand("tag", "tag a corpus");
    common(tag);
    tag->add_option("--model", f.model);
    tag->add_option("--test", f.test, "input corpus TSV");
    tag->add_option("--output", f.output, "prediction file");
    commands.emplace_back(tag, cmd_tag);

    for (auto [name, fn] : {std::pair{"eval", cmd_eval}, std::pair{"analyze", cmd_analyze}}) {
        auto* s = app.add_subcommand(name, std::string(name) == "eval" ? "score a prediction file" : "error analysis");
        common(s);
        s->add_option("--predictions", f.predictions, "prediction file")->expected(1);
        s->add_option("--averaging", f.averaging, "category | value")->check(CLI::IsMember({"category", "value"}));
        if (std::string(name) == "analyze") {
            s->add_option("--train", f.train, "training corpus (unseen labels, syncretism reference)");
            s->add_option("--top-k", f.top_k);
        }
        commands.emplace_back(s, fn);
    }

    auto* compare = app.add_subcommand("compare", "paired t-tests between systems");
    common(compare);
    compare->add_option("--predictions", f.predictions, "two or more prediction files")->expected(2, 1 << 20);
    compare->add_option("--averaging", f.averaging)->check(CLI::IsMember({"category", "value"}));
    commands.emplace_back(compare, cmd_compare);

    auto* sweep = app.add_subcommand("sweep", "MTL-Hierarchy order sweep");
    common(sweep);
    model_flags(sweep);
    sweep->add_option("--orders", f.orders, "hierarchy orders")->expected(1, 1 << 20);
    sweep->add_option("--train", f.train);
    sweep->add_option("--dev", f.dev);
    sweep->add_option("--test", f.test);
    commands.emplace_back(sweep, cmd_hierarchy_sweep);

    auto* synth = app.add_subcommand("synth", "write a synthetic corpus");
    common(synth);
    synth->add_option("--output", f.output);
    synth->add_option("--sentences", f.sentences);
    synth->add_option("--min-value-count", f.min_value_count, "keep generating until every value occurs this often");
    synth->add_option("--min-length", f.min_length);
    synth->add_option("--max-length", f.max_length);
    synth->add_option("--seed", f.seed);
    commands.emplace_back(synth, cmd_synth);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }
    for (auto& [sub, fn] : commands) {
        if (!sub->parsed()) continue;
        return run_guarded([&] { return fn(resolve(f, *sub), std::cout, std::cerr); }, std::cerr);
    }
    return kExitUsage;
}
