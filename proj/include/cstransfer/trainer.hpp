#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cstransfer/dataset.hpp"
#include "cstransfer/head.hpp"
#include "cstransfer/model.hpp"
#include "cstransfer/vocab.hpp"

namespace cstransfer {

struct TrainConfig {
    int stage = 1;
    double learning_rate = 3e-4;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 16;  // items per step; each item brings all its choices
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    LossWeights losses;
    std::size_t eval_every = 100;  // 0: evaluate only after the last step
    std::size_t eval_limit = 0;    // dev items per evaluation, 0 for all
    std::uint64_t seed = 1;
    // Stop once this many stage steps are done, as if interrupted; the
    // schedule still follows total_steps.
    std::optional<std::size_t> stop_after;

    void validate() const;
};

// Learning rate of the k-th update (1-based): linear warmup to the base
// rate, then linear decay reaching 0 exactly at total_steps.
double scheduled_lr(const TrainConfig& config, std::size_t k);

struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;  // empty until the first update
};

// One decoupled-weight-decay adaptive-moment update of every parameter from
// its accumulated gradient. NumericError if any update is non-finite.
void optimizer_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config, double lr);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Model model;
    Vocab vocab;
    OptimizerState optimizer;
    std::uint64_t global_step = 0;
    int stage = 0;  // 0 before any training
    std::uint64_t stage_step = 0;
    std::string config_json;  // echo of the producing configuration
};

Checkpoint initial_checkpoint(const EncoderConfig& encoder, const HeadConfig& head, const Vocab& vocab);

// Container: "CSCK", version, stage, steps, architecture, config echo,
// vocabulary, named tensor records, optimizer moments, "CEND".
void write_checkpoint(std::ostream& out, const Checkpoint& cp);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& cp);

struct LogRow {
    std::uint64_t step = 0;
    double lr = 0, ce = 0, align = 0, diff = 0, nc = 0, total = 0;
    std::optional<double> dev_acc_src, dev_acc_tgt;

    bool operator==(const LogRow&) const = default;
};

inline constexpr const char* kLogHeader = "step,lr,ce,align,diff,nc,total,dev_acc_src,dev_acc_tgt";
// Values use 17 significant digits so logs round-trip exactly.
std::string format_log_row(const LogRow& row);

struct StageOptions {
    // When set, rows are appended to this CSV (header written if the file is new).
    std::optional<std::filesystem::path> log_path;
    std::function<void(const LogRow&)> on_row;
};

struct StageResult {
    Checkpoint checkpoint;
    std::vector<LogRow> log;
};

// Input format of each stage: statements for 1 and 2, QA for 3.
InputFormat stage_format(int stage);

// Stage 1: CE-only training on a mixed-language pool of statement items.
StageResult run_stage1(Checkpoint cp, const TrainConfig& config, std::span<const Example> train,
                       std::span<const ParallelPair> dev, const StageOptions& options = {});
// Stage 2: joint objective on parallel statement pairs.
StageResult run_stage2(Checkpoint cp, const TrainConfig& config, std::span<const ParallelPair> parallel,
                       std::span<const ParallelPair> dev, const StageOptions& options = {});
// Stage 3: joint objective with both-language CE on parallel QA pairs.
StageResult run_stage3(Checkpoint cp, const TrainConfig& config, std::span<const ParallelPair> train,
                       std::span<const ParallelPair> dev, const StageOptions& options = {});

// Accuracy in percent of predictions against gold labels.
double accuracy_percent(std::span<const std::size_t> predictions, std::span<const Example> items);

}  // namespace cstransfer
