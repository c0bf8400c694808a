// cstransfer command-line entry point.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cstransfer/errors.hpp"
#include "cstransfer/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cstransfer;
using json = nlohmann::ordered_json;

namespace {

// Options shared by every subcommand.
struct Common {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    bool json = false;
    std::string summary_path;

    void attach(CLI::App* app) {
        app->add_option("--seed", seed, "Master seed (overrides the config file)");
        app->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
        app->add_flag("--json", json, "Print a JSON summary to stdout");
        app->add_option("--summary", summary_path, "Write the JSON summary to this file");
    }

    RunConfig load() const {
        RunConfig c = config_path.empty() ? default_run_config() : load_run_config(config_path);
        if (seed) c.seed = *seed;
        c.validate();
        return c;
    }

    void emit(const std::string& summary) const {
        if (json) std::cout << summary << "\n";
        if (!summary_path.empty()) {
            std::ofstream out(summary_path, std::ios::binary);
            if (!out) throw DataError("cannot write " + summary_path);
            out << summary << "\n";
        }
    }
};

std::string header_json(json body) {
    json j{{"schema_version", kSummarySchemaVersion}, {"checkpoint_version", kCheckpointVersion}};
    for (auto& [k, v] : body.items()) j[k] = v;
    return j.dump(2);
}

const std::vector<ParallelPair>& split_named(const Corpus& c, const std::string& split) {
    if (split == "train") return c.train;
    if (split == "dev") return c.dev;
    if (split == "test") return c.test;
    if (split == "parallel") return c.parallel;
    throw ConfigError("unknown split '" + split + "'");
}

std::vector<Example> side(const std::vector<ParallelPair>& pairs, const std::string& lang) {
    if (lang == kSourceLang) return source_side(pairs);
    if (lang == kTargetLang) return target_side(pairs);
    throw ConfigError("unknown language '" + lang + "' (expected EN or DE)");
}

InputFormat parse_format(const std::string& s, int stage) {
    if (s == "auto") return stage_format(stage);
    if (s == "statement") return InputFormat::Statement;
    if (s == "qa") return InputFormat::QA;
    throw ConfigError("unknown input format '" + s + "' (expected auto, statement or qa)");
}

Checkpoint load_ckpt(const std::string& path) {
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        if (msg.find(path) != std::string::npos) throw;
        throw FormatError(path + ": " + msg);
    }
}

Corpus load_corpus(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("corpus directory not found: " + dir);
    return read_corpus(dir);
}

int run_gen_corpus(const Common& common, const std::string& out) {
    RunConfig c = common.load();
    if (common.seed) c.world.seed = *common.seed;
    const auto world = generate_synthetic_world(c.world);
    const auto corpus = corpus_from_world(world);
    write_corpus(corpus, out);
    {
        const auto world_cfg = json::parse(run_config_json(c)).at("world");
        std::ofstream(fs::path(out) / "world.json", std::ios::binary) << json{{"world", world_cfg}}.dump(2) << "\n";
    }
    std::cerr << "wrote corpus to " << out << " (" << corpus.vocab.size() << " vocabulary entries)\n";
    common.emit(header_json({{"out", out},
                             {"world_seed", c.world.seed},
                             {"vocab_size", corpus.vocab.size()},
                             {"categories", world.n_categories},
                             {"density", world.realized_density()},
                             {"train", corpus.train.size()},
                             {"dev", corpus.dev.size()},
                             {"test", corpus.test.size()},
                             {"parallel", corpus.parallel.size()}}));
    return 0;
}

struct TrainArgs {
    int stage = 1;
    std::string corpus, init, out, log, losses;
    std::optional<std::size_t> steps, stop_after;
};

int run_train(const Common& common, const TrainArgs& a) {
    RunConfig c = common.load();
    if (!a.losses.empty()) {
        c.losses = a.losses;
        c.validate();
    }
    const Corpus corpus = load_corpus(a.corpus);
    Checkpoint cp;
    if (a.init.empty()) {
        if (a.stage != 1) throw ConfigError("stage " + std::to_string(a.stage) + " needs --init <checkpoint>");
        cp = initial_checkpoint(c.encoder_config(), c.head_config(), corpus.vocab);
    } else {
        cp = load_ckpt(a.init);
        if (!(cp.vocab == corpus.vocab)) {
            throw DataError("vocabulary mismatch between checkpoint " + a.init + " and corpus " + a.corpus);
        }
    }
    cp.config_json = run_config_json(c);
    TrainConfig tc = c.stage_config(a.stage);
    if (a.steps) {
        tc.total_steps = *a.steps;
        tc.warmup_steps = std::min(tc.warmup_steps, tc.total_steps);
    }
    tc.stop_after = a.stop_after;
    StageOptions opts;
    if (!a.log.empty()) opts.log_path = fs::path(a.log);
    StageResult r;
    if (a.stage == 1) {
        r = run_stage1(std::move(cp), tc, mixed_pool(corpus.train), corpus.dev, opts);
    } else if (a.stage == 2) {
        r = run_stage2(std::move(cp), tc, corpus.parallel, corpus.dev, opts);
    } else {
        r = run_stage3(std::move(cp), tc, corpus.train, corpus.dev, opts);
    }
    save_checkpoint(r.checkpoint, a.out);
    std::cerr << "stage " << a.stage << ": " << r.checkpoint.stage_step << "/" << tc.total_steps << " steps, saved "
              << a.out << "\n";
    json last = nullptr;
    if (!r.log.empty()) {
        const auto& row = r.log.back();
        last = {{"step", row.step}, {"ce", row.ce}, {"align", row.align}, {"diff", row.diff},
                {"nc", row.nc},     {"total", row.total}};
        if (row.dev_acc_src) last["dev_acc_src"] = *row.dev_acc_src;
        if (row.dev_acc_tgt) last["dev_acc_tgt"] = *row.dev_acc_tgt;
    }
    common.emit(header_json({{"checkpoint", a.out},
                             {"stage", a.stage},
                             {"stage_step", r.checkpoint.stage_step},
                             {"total_steps", tc.total_steps},
                             {"global_step", r.checkpoint.global_step},
                             {"last_row", last}}));
    return 0;
}

struct EvalArgs {
    std::string checkpoint, corpus, split = "dev", lang = kTargetLang, mode = "commonsense", format = "auto";
};

int run_evaluate(const Common& common, const EvalArgs& a) {
    const Checkpoint cp = load_ckpt(a.checkpoint);
    const Corpus corpus = load_corpus(a.corpus);
    const auto items = side(split_named(corpus, a.split), a.lang);
    const auto mode = parse_input_mode(a.mode);
    const auto report = evaluate(cp, items, mode, parse_format(a.format, static_cast<int>(cp.stage)),
                                 a.split + "_" + a.lang);
    std::printf("%s %s %s: %.1f%% (%zu/%zu)\n", report.dataset.c_str(), a.lang.c_str(), a.mode.c_str(),
                report.accuracy, report.correct(), report.count);
    common.emit(report_json(report));
    return 0;
}

int run_heatmap(const Common& common, const EvalArgs& a, const std::string& item, const std::string& out) {
    const Checkpoint cp = load_ckpt(a.checkpoint);
    const Corpus corpus = load_corpus(a.corpus);
    const auto items = side(split_named(corpus, a.split), a.lang);
    const Example* ex = nullptr;
    for (const auto& e : items) {
        if (item.empty() || e.id == item) {
            ex = &e;
            break;
        }
    }
    if (!ex) throw DataError("item '" + item + "' not found in " + a.split + "_" + a.lang);
    const auto files = export_heatmap(cp, *ex, out, parse_format(a.format, static_cast<int>(cp.stage)));
    json paths = json::array();
    for (const auto& f : files) {
        std::cerr << "wrote " << f.string() << "\n";
        paths.push_back(f.string());
    }
    common.emit(header_json({{"item", ex->id}, {"files", paths}}));
    return 0;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    return {std::istreambuf_iterator<char>(in), {}};
}

int run_report(const Common& common, const std::vector<std::string>& inputs, std::vector<std::string> labels,
               std::string baseline, const std::string& title, const std::string& out) {
    if (inputs.empty()) throw ConfigError("report needs at least one --input");
    if (labels.empty()) {
        for (const auto& p : inputs) labels.push_back(fs::path(p).stem().string());
    }
    if (labels.size() != inputs.size()) throw ConfigError("--label count must match --input count");
    if (baseline.empty()) baseline = labels.front();
    std::vector<EvalReport> reports;
    for (const auto& p : inputs) reports.push_back(parse_report_json(read_text(p), p));
    const auto table = report_ablation(labels, reports, baseline);
    const auto md = table.to_markdown(title);
    if (out.empty()) {
        std::cout << md;
    } else {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw DataError("cannot write " + out);
        f << md;
    }
    json rows = json::array();
    for (const auto& r : table.rows) rows.push_back({{"label", r.label}, {"accuracy", r.accuracy}, {"delta", r.delta}});
    common.emit(header_json({{"baseline", baseline}, {"rows", rows}}));
    return 0;
}

int run_pipeline_cmd(const Common& common, const std::string& out, const std::string& corpus_dir, bool ablation,
                     bool quiet) {
    const RunConfig c = common.load();
    Corpus corpus;
    if (corpus_dir.empty()) {
        corpus = corpus_from_world(generate_synthetic_world(c.world));
        write_corpus(corpus, fs::path(out) / "corpus");
    } else {
        corpus = load_corpus(corpus_dir);
    }
    PipelineOptions opts;
    opts.out_dir = out;
    if (!quiet) {
        opts.on_row = [](const LogRow& row) {
            if (row.dev_acc_tgt) {
                std::fprintf(stderr, "step %llu total %.4f dev %.1f/%.1f\n", static_cast<unsigned long long>(row.step),
                             row.total, row.dev_acc_src.value_or(0.0), *row.dev_acc_tgt);
            }
        };
    }
    const auto result = run_pipeline(c, corpus, opts);
    for (const auto* reports : {&result.dev_reports, &result.test_reports}) {
        for (const auto& r : *reports) {
            std::printf("%-10s %-16s %.1f\n", r.dataset.c_str(), std::string(to_string(r.mode)).c_str(), r.accuracy);
        }
    }
    std::string summary = pipeline_summary_json(c, result);
    if (ablation) {
        const std::vector<std::string> presets{"base", "align", "align+diff", "nc", "align+nc"};
        const auto ab = run_ablation(c, corpus, result.stage1, presets);
        const auto md = ab.table.to_markdown();
        std::ofstream(fs::path(out) / "ablation.md", std::ios::binary) << md;
        std::cout << md;
        auto j = json::parse(summary);
        j["ablation"] = json::parse(ablation_summary_json(ab));
        summary = j.dump(2);
        std::ofstream(fs::path(out) / "summary.json", std::ios::binary) << summary << "\n";
    }
    common.emit(summary);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-lingual commonsense transfer toolkit"};
    app.require_subcommand(1);

    Common c_gen, c_train, c_eval, c_heat, c_report, c_pipe;

    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic bilingual corpus");
    c_gen.attach(gen);
    std::string gen_out;
    gen->add_option("--out", gen_out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Run one training stage");
    c_train.attach(train);
    TrainArgs ta;
    train->add_option("--stage", ta.stage, "Stage 1, 2 or 3")->required()->check(CLI::Range(1, 3));
    train->add_option("--corpus", ta.corpus, "Corpus directory")->required();
    train->add_option("--init", ta.init, "Checkpoint to start from (required for stages 2 and 3)");
    train->add_option("--out", ta.out, "Checkpoint to write")->required();
    train->add_option("--losses", ta.losses, "Loss preset: base, align, align+diff, nc, align+nc or custom");
    train->add_option("--log", ta.log, "Append CSV training log here");
    train->add_option("--steps", ta.steps, "Override the stage's total steps");
    train->add_option("--stop-after", ta.stop_after, "Stop (resumably) after this many stage steps");

    auto* eval = app.add_subcommand("evaluate", "Accuracy of a checkpoint on a corpus split");
    c_eval.attach(eval);
    EvalArgs ea;
    auto add_eval_opts = [](CLI::App* sub, EvalArgs& a) {
        sub->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
        sub->add_option("--corpus", a.corpus, "Corpus directory")->required();
        sub->add_option("--split", a.split, "train, dev, test or parallel")->capture_default_str();
        sub->add_option("--lang", a.lang, "EN or DE")->capture_default_str();
        sub->add_option("--format", a.format, "auto, statement or qa")->capture_default_str();
    };
    add_eval_opts(eval, ea);
    eval->add_option("--mode", ea.mode, "commonsense, non-commonsense or both")->capture_default_str();

    auto* heat = app.add_subcommand("heatmap", "Export attention-gate heatmaps for one item");
    c_heat.attach(heat);
    EvalArgs ha;
    add_eval_opts(heat, ha);
    std::string heat_item, heat_out;
    heat->add_option("--item", heat_item, "Item id (default: first item)");
    heat->add_option("--out", heat_out, "Output directory")->required();

    auto* report = app.add_subcommand("report", "Ablation table from evaluation summaries");
    c_report.attach(report);
    std::vector<std::string> rep_inputs, rep_labels;
    std::string rep_baseline, rep_title = "Accuracy", rep_out;
    report->add_option("--input", rep_inputs, "Evaluation summary JSON (repeatable)")->required();
    report->add_option("--label", rep_labels, "Row label per input");
    report->add_option("--baseline", rep_baseline, "Baseline label (default: first)");
    report->add_option("--title", rep_title, "Accuracy column title")->capture_default_str();
    report->add_option("--out", rep_out, "Write the markdown table here");

    auto* pipe = app.add_subcommand("pipeline", "Generate, train all stages, evaluate and report");
    c_pipe.attach(pipe);
    std::string pipe_out, pipe_corpus;
    bool pipe_ablation = false, pipe_quiet = false;
    pipe->add_option("--out", pipe_out, "Output directory")->required();
    pipe->add_option("--corpus", pipe_corpus, "Use this corpus instead of generating one");
    pipe->add_flag("--ablation", pipe_ablation, "Also run the loss-preset ablation");
    pipe->add_flag("--quiet", pipe_quiet, "No progress output");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen_corpus(c_gen, gen_out);
        if (train->parsed()) return run_train(c_train, ta);
        if (eval->parsed()) return run_evaluate(c_eval, ea);
        if (heat->parsed()) return run_heatmap(c_heat, ha, heat_item, heat_out);
        if (report->parsed()) return run_report(c_report, rep_inputs, rep_labels, rep_baseline, rep_title, rep_out);
        if (pipe->parsed()) return run_pipeline_cmd(c_pipe, pipe_out, pipe_corpus, pipe_ablation, pipe_quiet);
    } catch (const ConfigError& e) {
        std::cerr << "cstransfer: config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "cstransfer: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
