#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cstransfer/eval.hpp"
#include "cstransfer/run_config.hpp"
#include "cstransfer/synth_world.hpp"
#include "cstransfer/trainer.hpp"

namespace cstransfer {

// A bilingual corpus: four splits of parallel items plus the vocabulary.
struct Corpus {
    std::vector<ParallelPair> train, dev, test, parallel;
    Vocab vocab;
};

Corpus corpus_from_world(const SynthWorld& world);

// Directory layout: {train,dev,test,parallel}_{EN,DE}.jsonl and vocab.txt.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

// Mixed-language statement pool used by stage 1.
std::vector<Example> mixed_pool(std::span<const ParallelPair> pairs);

struct PipelineOptions {
    // When set, checkpoints, the CSV log, heatmaps and the report land here.
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const LogRow&)> on_row;
};

struct PipelineResult {
    Checkpoint stage1, stage2, final;
    std::vector<LogRow> log;
    std::vector<EvalReport> dev_reports;   // final model, both languages, every mode
    std::vector<EvalReport> test_reports;  // final model, both languages, every mode
    EmbeddingGeometry geometry_stage1, geometry_stage2;  // dev pairs
    GateContrast gates;                                  // target-language dev items

    const EvalReport& dev_report(const std::string& lang, InputMode mode) const;
};

// Stage 1 -> stage 2 -> stage 3 with shared weights, then evaluation and
// diagnostics on the final checkpoint.
PipelineResult run_pipeline(const RunConfig& config, const Corpus& corpus, const PipelineOptions& options = {});

struct AblationRun {
    std::string preset;
    EvalReport report;  // target-language test set, commonsense mode
    std::vector<LogRow> log;
    std::uint64_t checkpoint_digest = 0;
};

struct AblationResult {
    std::vector<AblationRun> runs;
    AblationTable table;
};

// Stages 2 and 3 once per preset, each starting from the same stage-1
// checkpoint. The first preset is the baseline row.
AblationResult run_ablation(const RunConfig& config, const Corpus& corpus, const Checkpoint& stage1,
                            std::span<const std::string> presets);

// FNV-1a over the serialized checkpoint.
std::uint64_t checkpoint_digest(const Checkpoint& cp);

// Versioned machine-readable summaries.
std::string report_json(const EvalReport& report);
EvalReport parse_report_json(std::string_view text, const std::string& source);
std::string pipeline_summary_json(const RunConfig& config, const PipelineResult& result);
std::string ablation_summary_json(const AblationResult& result);

}  // namespace cstransfer
