#include "cstransfer/encoder.hpp"

#include <cmath>
#include <string>

#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"

namespace cstransfer {

void EncoderConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_len == 0) {
        throw ConfigError("encoder sizes must all be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (dropout_rate != 0.0) {
        throw ConfigError("dropout_rate must be 0");
    }
}

namespace {

Tensor uniform(Rng& rng, Shape shape, double bound) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

EncoderWeights init_encoder(const EncoderConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    Rng rng(derive_seed(config.seed, 101));

    EncoderWeights w;
    w.config = config;
    w.token_embedding = uniform(rng, {config.vocab_size, d}, bound);
    w.position_embedding = uniform(rng, {config.max_len, d}, bound);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        EncoderLayer layer;
        layer.ln1_gain = Tensor::full({d}, 1.0, true);
        layer.ln1_bias = Tensor::zeros({d}, true);
        layer.w_q = uniform(rng, {d, d}, bound);
        layer.b_q = Tensor::zeros({d}, true);
        layer.w_k = uniform(rng, {d, d}, bound);
        layer.b_k = Tensor::zeros({d}, true);
        layer.w_v = uniform(rng, {d, d}, bound);
        layer.b_v = Tensor::zeros({d}, true);
        layer.w_o = uniform(rng, {d, d}, bound);
        layer.b_o = Tensor::zeros({d}, true);
        layer.ln2_gain = Tensor::full({d}, 1.0, true);
        layer.ln2_bias = Tensor::zeros({d}, true);
        layer.w_ff1 = uniform(rng, {d, config.d_ff}, bound);
        layer.b_ff1 = Tensor::zeros({config.d_ff}, true);
        layer.w_ff2 = uniform(rng, {config.d_ff, d}, bound);
        layer.b_ff2 = Tensor::zeros({d}, true);
        w.layers.push_back(std::move(layer));
    }
    w.final_gain = Tensor::full({d}, 1.0, true);
    w.final_bias = Tensor::zeros({d}, true);
    return w;
}

NamedTensors EncoderWeights::parameters() const {
    NamedTensors out{{"encoder.token_embedding", token_embedding},
                     {"encoder.position_embedding", position_embedding}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string p = "encoder.layer" + std::to_string(l) + ".";
        out.insert(out.end(), {{p + "ln1_gain", L.ln1_gain},
                               {p + "ln1_bias", L.ln1_bias},
                               {p + "w_q", L.w_q},
                               {p + "b_q", L.b_q},
                               {p + "w_k", L.w_k},
                               {p + "b_k", L.b_k},
                               {p + "w_v", L.w_v},
                               {p + "b_v", L.b_v},
                               {p + "w_o", L.w_o},
                               {p + "b_o", L.b_o},
                               {p + "ln2_gain", L.ln2_gain},
                               {p + "ln2_bias", L.ln2_bias},
                               {p + "w_ff1", L.w_ff1},
                               {p + "b_ff1", L.b_ff1},
                               {p + "w_ff2", L.w_ff2},
                               {p + "b_ff2", L.b_ff2}});
    }
    out.emplace_back("encoder.final_gain", final_gain);
    out.emplace_back("encoder.final_bias", final_bias);
    return out;
}

PackedBatch pack_sequences(std::span<const TokenSequence> sequences) {
    PackedBatch b;
    for (const auto& s : sequences) {
        const std::size_t n = s.active_length();
        if (n == 0) throw DataError("cannot encode an all-pad sequence");
        for (std::size_t t = 0; t < n; ++t) {
            if (s.ids[t] < 0) throw DataError("negative token id");
            b.ids.push_back(static_cast<std::size_t>(s.ids[t]));
            b.positions.push_back(t);
        }
        b.lengths.push_back(n);
    }
    return b;
}

Tensor encode_packed(const EncoderWeights& w, const PackedBatch& batch) {
    const auto& cfg = w.config;
    if (batch.ids.empty()) throw DataError("empty batch");
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
        if (batch.ids[i] >= cfg.vocab_size) {
            throw DataError("token id " + std::to_string(batch.ids[i]) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
        }
        if (batch.positions[i] >= cfg.max_len) {
            throw DataError("sequence longer than max_len " + std::to_string(cfg.max_len));
        }
    }
    Tensor x = gather_rows(w.token_embedding, batch.ids) + gather_rows(w.position_embedding, batch.positions);
    for (const auto& L : w.layers) {
        const Tensor h = layer_norm(x, L.ln1_gain, L.ln1_bias, kLayerNormEps);
        const Tensor q = matmul(h, L.w_q) + L.b_q;
        const Tensor k = matmul(h, L.w_k) + L.b_k;
        const Tensor v = matmul(h, L.w_v) + L.b_v;
        const Tensor a = multi_head_attention(q, k, v, batch.lengths, cfg.n_heads);
        x = x + (matmul(a, L.w_o) + L.b_o);
        const Tensor h2 = layer_norm(x, L.ln2_gain, L.ln2_bias, kLayerNormEps);
        x = x + (matmul(relu(matmul(h2, L.w_ff1) + L.b_ff1), L.w_ff2) + L.b_ff2);
    }
    return layer_norm(x, w.final_gain, w.final_bias, kLayerNormEps);
}

Tensor encode(const EncoderWeights& weights, const TokenSequence& sequence) {
    return encode_packed(weights, pack_sequences(std::span(&sequence, 1)));
}

}  // namespace cstransfer
