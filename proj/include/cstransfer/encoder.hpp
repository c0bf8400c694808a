#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cstransfer/sequence.hpp"
#include "cstransfer/tensor.hpp"

namespace cstransfer {

// Small enough to push the final layer-norm variance to 1 within 1e-6 for
// any realistic activation scale.
inline constexpr double kLayerNormEps = 1e-9;

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_len = 64;
    double dropout_rate = 0.0;  // must stay 0
    std::uint64_t seed = 1;

    // Throws ConfigError.
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

struct EncoderLayer {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_gain, ln2_bias;
    Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct EncoderWeights {
    EncoderConfig config;
    Tensor token_embedding;     // vocab_size x d_model
    Tensor position_embedding;  // max_len x d_model
    std::vector<EncoderLayer> layers;
    Tensor final_gain, final_bias;

    // Every trainable tensor with a stable name, in a fixed order.
    NamedTensors parameters() const;
};

// Matrices and embeddings ~ U(-1/sqrt(d_model), 1/sqrt(d_model)); biases 0;
// layer-norm gains 1.
EncoderWeights init_encoder(const EncoderConfig& config);

// Non-pad tokens of several sequences laid end to end.
struct PackedBatch {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> positions;
    std::vector<std::size_t> lengths;  // active tokens per sequence

    std::size_t total_tokens() const { return ids.size(); }
};

PackedBatch pack_sequences(std::span<const TokenSequence> sequences);

// Pre-norm transformer over a packed batch. Returns one row of last-layer
// states per active token; padding is never computed, so it cannot leak
// into real positions. Throws DataError for ids outside the vocabulary.
Tensor encode_packed(const EncoderWeights& weights, const PackedBatch& batch);

// States for the non-pad positions of one sequence (active_length x d_model).
Tensor encode(const EncoderWeights& weights, const TokenSequence& sequence);

}  // namespace cstransfer
