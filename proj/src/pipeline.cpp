#include "cstransfer/pipeline.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

#include "cstransfer/errors.hpp"

namespace cstransfer {

using json = nlohmann::ordered_json;

namespace {

constexpr const char* kSplits[] = {"train", "dev", "test", "parallel"};

std::vector<ParallelPair>& split_of(Corpus& c, std::string_view name) {
    if (name == "train") return c.train;
    if (name == "dev") return c.dev;
    if (name == "test") return c.test;
    return c.parallel;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

json report_to_json(const EvalReport& r) {
    return json{{"dataset", r.dataset},         {"language", r.language},     {"mode", std::string(to_string(r.mode))},
                {"accuracy", r.accuracy},       {"count", r.count},           {"correct", r.correct()},
                {"predictions", r.predictions}, {"gold", r.gold}};
}

json row_to_json(const LogRow& r) {
    json j{{"step", r.step}, {"lr", r.lr}, {"ce", r.ce}, {"align", r.align}, {"diff", r.diff}, {"nc", r.nc},
           {"total", r.total}};
    j["dev_acc_src"] = r.dev_acc_src ? json(*r.dev_acc_src) : json(nullptr);
    j["dev_acc_tgt"] = r.dev_acc_tgt ? json(*r.dev_acc_tgt) : json(nullptr);
    return j;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

Corpus corpus_from_world(const SynthWorld& world) {
    return {world.train, world.dev, world.test, world.parallel, world.vocab()};
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    Corpus& c = const_cast<Corpus&>(corpus);
    for (const char* split : kSplits) {
        const auto& pairs = split_of(c, split);
        std::vector<Example> src, tgt;
        for (const auto& p : pairs) {
            src.push_back(p.source);
            tgt.push_back(p.target);
        }
        save_jsonl(dir / (std::string(split) + "_" + kSourceLang + ".jsonl"), src);
        save_jsonl(dir / (std::string(split) + "_" + kTargetLang + ".jsonl"), tgt);
    }
    corpus.vocab.save(dir / "vocab.txt");
}

Corpus read_corpus(const std::filesystem::path& dir) {
    Corpus c;
    for (const char* split : kSplits) {
        const auto src = load_jsonl(dir / (std::string(split) + "_" + kSourceLang + ".jsonl"));
        const auto tgt = load_jsonl(dir / (std::string(split) + "_" + kTargetLang + ".jsonl"));
        split_of(c, split) = pair_by_id(src, tgt);
    }
    c.vocab = Vocab::load(dir / "vocab.txt");
    return c;
}

std::vector<Example> mixed_pool(std::span<const ParallelPair> pairs) {
    std::vector<Example> out;
    out.reserve(2 * pairs.size());
    for (const auto& p : pairs) {
        out.push_back(p.source);
        out.push_back(p.target);
    }
    return out;
}

const EvalReport& PipelineResult::dev_report(const std::string& lang, InputMode mode) const {
    for (const auto& r : dev_reports) {
        if (r.language == lang && r.mode == mode) return r;
    }
    throw DataError("no dev report for " + lang + " / " + std::string(to_string(mode)));
}

PipelineResult run_pipeline(const RunConfig& config, const Corpus& corpus, const PipelineOptions& options) {
    config.validate();
    PipelineResult result;
    StageOptions stage_opts;
    stage_opts.on_row = options.on_row;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        const auto log = *options.out_dir / "train_log.csv";
        std::filesystem::remove(log);
        stage_opts.log_path = log;
    }
    const auto append = [&](const StageResult& s) {
        result.log.insert(result.log.end(), s.log.begin(), s.log.end());
    };

    Checkpoint cp = initial_checkpoint(config.encoder_config(), config.head_config(), corpus.vocab);
    cp.config_json = run_config_json(config);
    const auto pool = mixed_pool(corpus.train);
    auto s1 = run_stage1(std::move(cp), config.stage_config(1), pool, corpus.dev, stage_opts);
    append(s1);
    result.stage1 = std::move(s1.checkpoint);
    auto s2 = run_stage2(result.stage1, config.stage_config(2), corpus.parallel, corpus.dev, stage_opts);
    append(s2);
    result.stage2 = std::move(s2.checkpoint);
    auto s3 = run_stage3(result.stage2, config.stage_config(3), corpus.train, corpus.dev, stage_opts);
    append(s3);
    result.final = std::move(s3.checkpoint);

    const InputFormat qa = stage_format(3);
    for (const auto* split : {&corpus.dev, &corpus.test}) {
        const std::string name = split == &corpus.dev ? "dev" : "test";
        auto& reports = split == &corpus.dev ? result.dev_reports : result.test_reports;
        const auto src = source_side(*split), tgt = target_side(*split);
        for (auto mode : {InputMode::Commonsense, InputMode::NonCommonsense, InputMode::Both}) {
            reports.push_back(evaluate(result.final, src, mode, qa, name + "_" + kSourceLang));
            reports.push_back(evaluate(result.final, tgt, mode, qa, name + "_" + kTargetLang));
        }
    }
    result.geometry_stage1 = embedding_geometry(result.stage1, corpus.dev, InputFormat::Statement);
    result.geometry_stage2 = embedding_geometry(result.stage2, corpus.dev, InputFormat::Statement);
    const auto dev_tgt = target_side(corpus.dev);
    const std::size_t n_diag = std::min(config.diagnostic_items, dev_tgt.size());
    result.gates = gate_contrast(result.final, std::span(dev_tgt).first(n_diag), qa);

    if (options.out_dir) {
        const auto& dir = *options.out_dir;
        save_checkpoint(result.stage1, dir / "stage1.ckpt");
        save_checkpoint(result.stage2, dir / "stage2.ckpt");
        save_checkpoint(result.final, dir / "final.ckpt");
        if (!dev_tgt.empty()) export_heatmap(result.final, dev_tgt.front(), dir / "heatmaps", qa);
        write_text(dir / "summary.json", pipeline_summary_json(config, result) + "\n");
        std::string md = "# Pipeline report\n\n| Split | Language | Mode | Accuracy | Items |\n|---|---|---|---|---|\n";
        char buf[32];
        for (const auto* reports : {&result.dev_reports, &result.test_reports}) {
            for (const auto& r : *reports) {
                std::snprintf(buf, sizeof buf, "%.1f", r.accuracy);
                md += "| " + r.dataset + " | " + r.language + " | " + std::string(to_string(r.mode)) + " | " + buf +
                      " | " + std::to_string(r.count) + " |\n";
            }
        }
        write_text(dir / "report.md", md);
    }
    return result;
}

AblationResult run_ablation(const RunConfig& config, const Corpus& corpus, const Checkpoint& stage1,
                            std::span<const std::string> presets) {
    if (presets.empty()) throw ConfigError("ablation needs at least one preset");
    AblationResult result;
    const auto test_tgt = target_side(corpus.test);
    std::vector<std::string> labels;
    std::vector<EvalReport> reports;
    for (const auto& preset : presets) {
        RunConfig c = config;
        c.losses = preset;
        auto s2 = run_stage2(stage1, c.stage_config(2), corpus.parallel, {});
        auto s3 = run_stage3(std::move(s2.checkpoint), c.stage_config(3), corpus.train, {});
        AblationRun run;
        run.preset = preset;
        run.log = std::move(s2.log);
        run.log.insert(run.log.end(), s3.log.begin(), s3.log.end());
        run.report = evaluate(s3.checkpoint, test_tgt, InputMode::Commonsense, stage_format(3),
                              std::string("test_") + kTargetLang);
        run.checkpoint_digest = checkpoint_digest(s3.checkpoint);
        labels.push_back(preset);
        reports.push_back(run.report);
        result.runs.push_back(std::move(run));
    }
    result.table = report_ablation(labels, reports, presets.front());
    return result;
}

std::uint64_t checkpoint_digest(const Checkpoint& cp) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : checkpoint_bytes(cp)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string report_json(const EvalReport& report) {
    json j{{"schema_version", kSummarySchemaVersion}, {"checkpoint_version", kCheckpointVersion}};
    j["report"] = report_to_json(report);
    return j.dump(2);
}

EvalReport parse_report_json(std::string_view text, const std::string& source) {
    try {
        const json j = json::parse(text);
        if (j.at("schema_version").get<int>() != kSummarySchemaVersion) {
            throw FormatError(source + ": unsupported summary schema version");
        }
        const json& r = j.at("report");
        EvalReport out;
        out.dataset = r.at("dataset").get<std::string>();
        out.language = r.at("language").get<std::string>();
        out.mode = parse_input_mode(r.at("mode").get<std::string>());
        out.accuracy = r.at("accuracy").get<double>();
        out.count = r.at("count").get<std::size_t>();
        out.predictions = r.at("predictions").get<std::vector<std::size_t>>();
        out.gold = r.at("gold").get<std::vector<std::size_t>>();
        if (out.predictions.size() != out.count || out.gold.size() != out.count) {
            throw FormatError(source + ": prediction count does not match item count");
        }
        if (rounded_accuracy(out.correct(), out.count) != out.accuracy) {
            throw FormatError(source + ": accuracy does not match the stored predictions");
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError(source + ": malformed evaluation summary: " + e.what());
    }
}

std::string pipeline_summary_json(const RunConfig& config, const PipelineResult& r) {
    json j{{"schema_version", kSummarySchemaVersion}, {"checkpoint_version", kCheckpointVersion}};
    j["config"] = json::parse(run_config_json(config));
    j["steps"] = {{"stage1", r.stage1.stage_step},
                  {"stage2", r.stage2.stage_step},
                  {"stage3", r.final.stage_step},
                  {"global", r.final.global_step}};
    json accs = json::array();
    for (const auto* reports : {&r.dev_reports, &r.test_reports}) {
        for (const auto& rep : *reports) {
            accs.push_back({{"dataset", rep.dataset},
                            {"language", rep.language},
                            {"mode", std::string(to_string(rep.mode))},
                            {"accuracy", rep.accuracy},
                            {"count", rep.count}});
        }
    }
    j["accuracy"] = accs;
    j["geometry"] = {{"stage1", {{"mean_gold_cosine", r.geometry_stage1.mean_gold_cosine},
                                 {"mean_hinge", r.geometry_stage1.mean_hinge}}},
                     {"stage2", {{"mean_gold_cosine", r.geometry_stage2.mean_gold_cosine},
                                 {"mean_hinge", r.geometry_stage2.mean_hinge}}},
                     {"items", r.geometry_stage2.items}};
    j["gates"] = {{"concept_mean", r.gates.concept_mean},
                  {"filler_mean", r.gates.filler_mean},
                  {"concept_tokens", r.gates.concept_tokens},
                  {"filler_tokens", r.gates.filler_tokens},
                  {"items", r.gates.items}};
    j["final_log_row"] = r.log.empty() ? json(nullptr) : row_to_json(r.log.back());
    j["final_checkpoint"] = hex64(checkpoint_digest(r.final));
    return j.dump(2);
}

std::string ablation_summary_json(const AblationResult& result) {
    json j{{"schema_version", kSummarySchemaVersion}, {"checkpoint_version", kCheckpointVersion}};
    json runs = json::array();
    for (const auto& run : result.runs) {
        runs.push_back({{"preset", run.preset},
                        {"accuracy", run.report.accuracy},
                        {"count", run.report.count},
                        {"checkpoint", hex64(run.checkpoint_digest)}});
    }
    j["runs"] = runs;
    j["baseline"] = result.table.baseline;
    j["table"] = result.table.to_markdown();
    return j.dump(2);
}

}  // namespace cstransfer
