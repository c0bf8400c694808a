#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "cstransfer/encoder.hpp"
#include "cstransfer/head.hpp"
#include "cstransfer/synth_world.hpp"
#include "cstransfer/trainer.hpp"

namespace cstransfer {

// Everything a CLI command or pipeline run needs. Serialized as JSON with
// sections "world", "model", "train" (with "stage1".."stage3") and a master
// "seed". Every key is optional; unknown keys are rejected.
struct RunConfig {
    std::uint64_t seed = 1;  // model initialization and batch order
    SynthWorldConfig world;
    EncoderConfig encoder;  // vocab_size comes from the corpus
    HeadConfig head;
    std::string losses = "custom";  // a preset name, or custom to use loss_weights
    LossWeights loss_weights;
    TrainConfig stage1, stage2, stage3;
    std::size_t diagnostic_items = 100;  // dev items used for gate diagnostics

    void validate() const;

    // Loss weights for stages 2 and 3.
    LossWeights effective_losses() const;
    // Stage config with derived seed and loss weights applied.
    TrainConfig stage_config(int stage) const;
    EncoderConfig encoder_config() const;
    HeadConfig head_config() const;
};

// Defaults sized for the desk-scale synthetic pipeline.
RunConfig default_run_config();

RunConfig parse_run_config(std::string_view json_text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);
// Full config with every key, in a stable order.
std::string run_config_json(const RunConfig& config);

inline constexpr int kSummarySchemaVersion = 1;

}  // namespace cstransfer
