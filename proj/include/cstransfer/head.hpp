#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cstransfer/encoder.hpp"
#include "cstransfer/tensor.hpp"

namespace cstransfer {

// Sigmoid gates score each token independently. Softmax gates normalize the
// scores over the tokens of a sequence; the complement pool is renormalized.
enum class GateMode { Sigmoid, Softmax };

// Which embedding the choice classifier reads.
enum class InputMode { Commonsense, NonCommonsense, Both };

std::string_view to_string(GateMode mode);
std::string_view to_string(InputMode mode);
GateMode parse_gate_mode(std::string_view text);    // ConfigError on unknown names
InputMode parse_input_mode(std::string_view text);  // "commonsense", "non-commonsense", "both"

struct HeadConfig {
    std::size_t d_model = 64;
    std::size_t d_embed = 64;
    GateMode gate_mode = GateMode::Sigmoid;
    std::uint64_t seed = 2;

    void validate() const;
    bool operator==(const HeadConfig&) const = default;
};

// relu(x W1 + b1) W2 + b2
struct FeedForward {
    Tensor w1, b1, w2, b2;
    Tensor operator()(const Tensor& x) const;
};

struct HeadWeights {
    HeadConfig config;
    Tensor w_gate;  // d_model
    Tensor b_gate;  // scalar
    FeedForward ffn_c;
    FeedForward ffn_nc;
    Tensor w_cls;  // d_embed
    Tensor b_cls;  // scalar

    NamedTensors parameters() const;
};

HeadWeights init_head(const HeadConfig& config);

// Outputs for a packed batch of sequences.
struct HeadOutputs {
    Tensor gates;  // one entry per active token
    Tensor X;      // sequences x d_embed, commonsense
    Tensor X_nc;   // sequences x d_embed, non-commonsense
    std::vector<std::size_t> lengths;
};

// Per-token gates over packed states O. `lengths` marks the active tokens of
// each sequence; a zero length is rejected.
Tensor attention_gates(const Tensor& O, std::span<const std::size_t> lengths, const HeadWeights& head);

// Gate-weighted pool into FFN_c and complement-weighted pool into FFN_nc.
HeadOutputs extract(const Tensor& O, std::span<const std::size_t> lengths, const HeadWeights& head);

// Embedding rows fed to the classifier under a mode (X, X_nc, or X + X_nc).
Tensor classifier_input(const HeadOutputs& out, InputMode mode);

// logit[j] = w_cls . rows[j] + b_cls
Tensor choice_logits(const Tensor& rows, const HeadWeights& head);

// Argmax with ties going to the lowest index.
std::size_t predict(std::span<const double> logits);

// Similarity losses. Rows are embeddings; batched forms take items x choices
// rows (item-major) with one gold index per item and average over items.
Tensor loss_align(const Tensor& x_src_gold, const Tensor& x_tgt_gold);
Tensor loss_diff(const Tensor& X_src, const Tensor& X_tgt, std::size_t gold);
Tensor loss_nc(const Tensor& Xnc_src, const Tensor& Xnc_tgt, std::size_t gold);

Tensor batch_loss_align(const Tensor& X_src, const Tensor& X_tgt, std::span<const std::size_t> gold);
Tensor batch_loss_diff(const Tensor& X_src, const Tensor& X_tgt, std::span<const std::size_t> gold);
Tensor batch_loss_nc(const Tensor& Xnc_src, const Tensor& Xnc_tgt, std::span<const std::size_t> gold);
// Mean cross-entropy of item-major logits.
Tensor batch_cross_entropy(const Tensor& logits, std::span<const std::size_t> gold);

struct LossWeights {
    double ce = 1.0;
    double align = 1.0;
    double diff = 1.0;
    double nc = 1.0;

    void validate() const;
    bool operator==(const LossWeights&) const = default;

    // base, align, align+diff, nc, align+nc. ConfigError otherwise.
    static LossWeights preset(std::string_view name);
};

inline constexpr std::string_view kLossPresets[] = {"base", "align", "align+diff", "nc", "align+nc"};

// Head outputs and logits of one language for a batch of items.
struct LanguageOutputs {
    HeadOutputs head;
    Tensor logits;  // items x choices, item-major, flattened
};

struct JointLoss {
    Tensor total;  // weighted sum of the enabled terms
    // Raw per-term values (averaged over items) before weighting.
    double ce = 0, align = 0, diff = 0, nc = 0;
};

// Stage 1: CE on `tgt` only (`src` is ignored and may be null).
// Stage 2: CE on the target language plus the similarity terms.
// Stage 3: CE on both languages, summed, plus the similarity terms.
// Terms with zero weight are reported but do not enter `total`.
JointLoss joint_loss(const LanguageOutputs* src, const LanguageOutputs& tgt, std::span<const std::size_t> gold,
                     const LossWeights& weights, int stage);

}  // namespace cstransfer
