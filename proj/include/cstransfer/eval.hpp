#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cstransfer/dataset.hpp"
#include "cstransfer/head.hpp"
#include "cstransfer/model.hpp"
#include "cstransfer/trainer.hpp"

namespace cstransfer {

struct EvalReport {
    std::string dataset;
    std::string language;
    InputMode mode = InputMode::Commonsense;
    double accuracy = 0.0;  // percent, rounded to one decimal
    std::size_t count = 0;
    std::vector<std::size_t> predictions;
    std::vector<std::size_t> gold;

    std::size_t correct() const;
};

// 100 * correct / count rounded to one decimal place.
double rounded_accuracy(std::size_t correct, std::size_t count);

// Every content word must be in the checkpoint vocabulary (DataError names
// the first missing word and its item).
EvalReport evaluate(const Checkpoint& cp, std::span<const Example> dataset, InputMode mode, InputFormat format,
                    const std::string& dataset_id);

// One CSV per choice: a header of token strings and one row of gate values,
// named <item id>_choice<j>.csv. Returns the written paths.
std::vector<std::filesystem::path> export_heatmap(const Checkpoint& cp, const Example& example,
                                                  const std::filesystem::path& out_dir, InputFormat format);

// Gates of every non-pad token of every choice, paired with the token text.
struct TokenGates {
    std::vector<std::string> tokens;
    std::vector<double> gates;
};
std::vector<TokenGates> choice_gates(const Checkpoint& cp, const Example& example, InputFormat format);

struct AblationRow {
    std::string label;
    double accuracy = 0.0;
    double delta = 0.0;  // against the baseline row, from one-decimal accuracies
};

struct AblationTable {
    std::string baseline;
    std::vector<AblationRow> rows;

    // Two-column markdown table; cells read "50.6 (+1.8)".
    std::string to_markdown(const std::string& title = "Accuracy") const;
};

// "(+1.8)", "(+0.0)" or "(−1.2)".
std::string format_delta(double delta);

// Rows keep input order. ConfigError when the baseline label is absent.
AblationTable report_ablation(std::span<const std::string> labels, std::span<const EvalReport> reports,
                              const std::string& baseline);

// Cross-lingual geometry of commonsense embeddings over parallel pairs.
struct EmbeddingGeometry {
    double mean_gold_cosine = 0.0;  // cos(X_src[gold], X_tgt[gold])
    double mean_hinge = 0.0;        // relu(cos(X[gold], X[j])) over distractors and both languages
    std::size_t items = 0;
};
EmbeddingGeometry embedding_geometry(const Checkpoint& cp, std::span<const ParallelPair> pairs, InputFormat format);

// Mean gate on concept tokens versus filler tokens of synthetic items.
struct GateContrast {
    double concept_mean = 0.0;
    double filler_mean = 0.0;
    std::size_t concept_tokens = 0;
    std::size_t filler_tokens = 0;
    std::size_t items = 0;
};
GateContrast gate_contrast(const Checkpoint& cp, std::span<const Example> items, InputFormat format);

}  // namespace cstransfer
