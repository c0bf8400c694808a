#include "cstransfer/head.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"

namespace cstransfer {

std::string_view to_string(GateMode mode) { return mode == GateMode::Sigmoid ? "sigmoid" : "softmax"; }

std::string_view to_string(InputMode mode) {
    switch (mode) {
        case InputMode::Commonsense: return "commonsense";
        case InputMode::NonCommonsense: return "non-commonsense";
        case InputMode::Both: return "both";
    }
    return "?";
}

GateMode parse_gate_mode(std::string_view text) {
    if (text == "sigmoid") return GateMode::Sigmoid;
    if (text == "softmax") return GateMode::Softmax;
    throw ConfigError("unknown gate mode '" + std::string(text) + "' (expected sigmoid or softmax)");
}

InputMode parse_input_mode(std::string_view text) {
    if (text == "commonsense") return InputMode::Commonsense;
    if (text == "non-commonsense") return InputMode::NonCommonsense;
    if (text == "both") return InputMode::Both;
    throw ConfigError("unknown mode '" + std::string(text) + "' (expected commonsense, non-commonsense or both)");
}

void HeadConfig::validate() const {
    if (d_model == 0 || d_embed == 0) throw ConfigError("head sizes must be positive");
}

Tensor FeedForward::operator()(const Tensor& x) const { return matmul(relu(matmul(x, w1) + b1), w2) + b2; }

namespace {

Tensor uniform(Rng& rng, Shape shape, double bound) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

FeedForward init_ffn(Rng& rng, std::size_t d, std::size_t d_embed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    return {uniform(rng, {d, d}, bound), Tensor::zeros({d}, true), uniform(rng, {d, d_embed}, bound),
            Tensor::zeros({d_embed}, true)};
}

void check_gold(std::span<const std::size_t> gold, std::size_t rows, std::size_t& choices) {
    if (gold.empty() || rows % gold.size() != 0) {
        throw ShapeError("embedding rows (" + std::to_string(rows) + ") are not a whole number of items (" +
                         std::to_string(gold.size()) + ")");
    }
    choices = rows / gold.size();
    if (choices < 2) throw ShapeError("need at least two choices per item");
    for (auto g : gold) {
        if (g >= choices) {
            throw std::out_of_range("gold index " + std::to_string(g) + " of " + std::to_string(choices) +
                                    " choices");
        }
    }
}

// Row indices of each gold choice, and (gold, distractor) row pairs.
struct GoldRows {
    std::vector<std::size_t> gold;
    std::vector<std::size_t> pair_gold;
    std::vector<std::size_t> pair_other;
};

GoldRows gold_rows(std::span<const std::size_t> gold, std::size_t choices) {
    GoldRows r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const std::size_t g = i * choices + gold[i];
        r.gold.push_back(g);
        for (std::size_t j = 0; j < choices; ++j) {
            if (j == gold[i]) continue;
            r.pair_gold.push_back(g);
            r.pair_other.push_back(i * choices + j);
        }
    }
    return r;
}

Tensor per_item(const Tensor& total, std::size_t items) { return total * (1.0 / static_cast<double>(items)); }

Tensor as_rows(const Tensor& x) { return x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x; }

}  // namespace

HeadWeights init_head(const HeadConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, 202));
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    HeadWeights h;
    h.config = config;
    h.w_gate = uniform(rng, {config.d_model}, bound);
    h.b_gate = Tensor::scalar(0.0, true);
    h.ffn_c = init_ffn(rng, config.d_model, config.d_embed);
    h.ffn_nc = init_ffn(rng, config.d_model, config.d_embed);
    h.w_cls = uniform(rng, {config.d_embed}, 1.0 / std::sqrt(static_cast<double>(config.d_embed)));
    h.b_cls = Tensor::scalar(0.0, true);
    return h;
}

NamedTensors HeadWeights::parameters() const {
    return {{"head.w_gate", w_gate},       {"head.b_gate", b_gate},       {"head.ffn_c.w1", ffn_c.w1},
            {"head.ffn_c.b1", ffn_c.b1},   {"head.ffn_c.w2", ffn_c.w2},   {"head.ffn_c.b2", ffn_c.b2},
            {"head.ffn_nc.w1", ffn_nc.w1}, {"head.ffn_nc.b1", ffn_nc.b1}, {"head.ffn_nc.w2", ffn_nc.w2},
            {"head.ffn_nc.b2", ffn_nc.b2}, {"head.w_cls", w_cls},         {"head.b_cls", b_cls}};
}

Tensor attention_gates(const Tensor& O, std::span<const std::size_t> lengths, const HeadWeights& head) {
    if (O.rank() != 2 || O.dim(1) != head.config.d_model) {
        throw ShapeError("attention_gates: states must be (tokens x " + std::to_string(head.config.d_model) + ")");
    }
    for (auto n : lengths) {
        if (n == 0) throw DataError("attention_gates: sequence has no non-pad tokens");
    }
    const std::size_t d = head.config.d_model;
    const Tensor scores = reshape(matmul(O, reshape(head.w_gate, {d, 1})), {O.dim(0)}) + head.b_gate;
    return head.config.gate_mode == GateMode::Sigmoid ? sigmoid(scores) : segment_softmax(scores, lengths);
}

HeadOutputs extract(const Tensor& O, std::span<const std::size_t> lengths, const HeadWeights& head) {
    HeadOutputs out;
    out.gates = attention_gates(O, lengths, head);
    out.lengths.assign(lengths.begin(), lengths.end());
    const Tensor p_c = segment_weighted_mean(O, out.gates, lengths);
    const Tensor p_nc = segment_weighted_mean(O, 1.0 - out.gates, lengths);
    out.X = head.ffn_c(p_c);
    out.X_nc = head.ffn_nc(p_nc);
    return out;
}

Tensor classifier_input(const HeadOutputs& out, InputMode mode) {
    switch (mode) {
        case InputMode::Commonsense: return out.X;
        case InputMode::NonCommonsense: return out.X_nc;
        case InputMode::Both: return out.X + out.X_nc;
    }
    throw ConfigError("invalid input mode");
}

Tensor choice_logits(const Tensor& rows, const HeadWeights& head) {
    const Tensor r = as_rows(rows);
    const std::size_t d = head.config.d_embed;
    return reshape(matmul(r, reshape(head.w_cls, {d, 1})), {r.dim(0)}) + head.b_cls;
}

std::size_t predict(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("predict: no logits");
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[best]) best = j;
    }
    return best;
}

Tensor loss_align(const Tensor& x_src_gold, const Tensor& x_tgt_gold) {
    return 1.0 - cosine_similarity(x_src_gold, x_tgt_gold);
}

Tensor loss_diff(const Tensor& X_src, const Tensor& X_tgt, std::size_t gold) {
    const std::size_t g[] = {gold};
    return batch_loss_diff(X_src, X_tgt, g);
}

Tensor loss_nc(const Tensor& Xnc_src, const Tensor& Xnc_tgt, std::size_t gold) {
    const std::size_t g[] = {gold};
    return batch_loss_nc(Xnc_src, Xnc_tgt, g);
}

Tensor batch_loss_align(const Tensor& X_src, const Tensor& X_tgt, std::span<const std::size_t> gold) {
    std::size_t choices = 0;
    check_gold(gold, X_src.dim(0), choices);
    const auto rows = gold_rows(gold, choices);
    const Tensor cos = cosine_rows(gather_rows(X_src, rows.gold), gather_rows(X_tgt, rows.gold));
    return per_item(sum(1.0 - cos), gold.size());
}

Tensor batch_loss_diff(const Tensor& X_src, const Tensor& X_tgt, std::span<const std::size_t> gold) {
    std::size_t choices = 0;
    check_gold(gold, X_src.dim(0), choices);
    if (X_tgt.shape() != X_src.shape()) throw ShapeError("loss_diff: language embeddings differ in shape");
    const auto rows = gold_rows(gold, choices);
    const auto hinge = [&](const Tensor& X) {
        return sum(relu(cosine_rows(gather_rows(X, rows.pair_gold), gather_rows(X, rows.pair_other))));
    };
    return per_item(hinge(X_src) + hinge(X_tgt), gold.size());
}

Tensor batch_loss_nc(const Tensor& Xnc_src, const Tensor& Xnc_tgt, std::span<const std::size_t> gold) {
    std::size_t choices = 0;
    check_gold(gold, Xnc_src.dim(0), choices);
    if (Xnc_tgt.shape() != Xnc_src.shape()) throw ShapeError("loss_nc: language embeddings differ in shape");
    const auto rows = gold_rows(gold, choices);
    const auto within = [&](const Tensor& X) {
        return sum(1.0 - cosine_rows(gather_rows(X, rows.pair_gold), gather_rows(X, rows.pair_other)));
    };
    const Tensor across = sum(1.0 - cosine_rows(gather_rows(Xnc_src, rows.gold), gather_rows(Xnc_tgt, rows.gold)));
    return per_item(within(Xnc_src) + within(Xnc_tgt) + across, gold.size());
}

Tensor batch_cross_entropy(const Tensor& logits, std::span<const std::size_t> gold) {
    std::size_t choices = 0;
    check_gold(gold, logits.dim(0), choices);
    Tensor total;
    std::vector<std::size_t> idx(choices);
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (std::size_t j = 0; j < choices; ++j) idx[j] = i * choices + j;
        const Tensor ce = cross_entropy(take(logits, idx), gold[i]);
        total = total.defined() ? total + ce : ce;
    }
    return per_item(total, gold.size());
}

void LossWeights::validate() const {
    for (double w : {ce, align, diff, nc}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    }
    if (ce == 0.0 && align == 0.0 && diff == 0.0 && nc == 0.0) {
        throw ConfigError("at least one loss weight must be positive");
    }
}

LossWeights LossWeights::preset(std::string_view name) {
    if (name == "base") return {1, 0, 0, 0};
    if (name == "align") return {1, 1, 0, 0};
    if (name == "align+diff") return {1, 1, 1, 0};
    if (name == "nc") return {1, 0, 0, 1};
    if (name == "align+nc") return {1, 1, 0, 1};
    throw ConfigError("unknown loss preset '" + std::string(name) +
                      "' (expected base, align, align+diff, nc, align+nc or custom)");
}

JointLoss joint_loss(const LanguageOutputs* src, const LanguageOutputs& tgt, std::span<const std::size_t> gold,
                     const LossWeights& weights, int stage) {
    if (stage < 1 || stage > 3) throw ConfigError("unknown stage " + std::to_string(stage));
    weights.validate();
    JointLoss out;
    Tensor total;
    const auto accumulate = [&](const Tensor& term, double w) {
        if (w == 0.0) return;
        const Tensor t = term * w;
        total = total.defined() ? total + t : t;
    };

    Tensor ce = batch_cross_entropy(tgt.logits, gold);
    if (stage == 1) {
        out.ce = ce.item();
        accumulate(ce, weights.ce);
        out.total = total.defined() ? total : ce * 0.0;
        return out;
    }
    if (src == nullptr) throw ConfigError("stages 2 and 3 need both languages");
    if (stage == 3) ce = ce + batch_cross_entropy(src->logits, gold);
    const Tensor align = batch_loss_align(src->head.X, tgt.head.X, gold);
    const Tensor diff = batch_loss_diff(src->head.X, tgt.head.X, gold);
    const Tensor nc = batch_loss_nc(src->head.X_nc, tgt.head.X_nc, gold);
    out.ce = ce.item();
    out.align = align.item();
    out.diff = diff.item();
    out.nc = nc.item();
    accumulate(ce, weights.ce);
    accumulate(align, weights.align);
    accumulate(diff, weights.diff);
    accumulate(nc, weights.nc);
    out.total = total;
    return out;
}

}  // namespace cstransfer
