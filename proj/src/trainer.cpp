#include "cstransfer/trainer.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include "cstransfer/binary_io.hpp"
#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cstransfer {

void TrainConfig::validate() const {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps must not exceed total_steps");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    losses.validate();
}

double scheduled_lr(const TrainConfig& config, std::size_t k) {
    const double base = config.learning_rate;
    const auto w = static_cast<double>(config.warmup_steps), total = static_cast<double>(config.total_steps);
    const auto kd = static_cast<double>(k);
    if (k >= config.total_steps) return 0.0;
    if (k < config.warmup_steps) return base * kd / w;
    return base * (total - kd) / (total - w);
}

void optimizer_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& config, double lr) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
    ++state.step;
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != values.size()) throw ShapeError("optimizer moment shape mismatch");
        const bool has = params[i].has_grad();
        const auto grad = has ? params[i].grad() : std::span<const double>{};
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = has ? grad[j] : 0.0;
            if (!std::isfinite(g)) throw NumericError("non-finite gradient");
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            const double mhat = m[j] / c1, vhat = v[j] / c2;
            double p = values[j] * (1.0 - lr * config.weight_decay);
            p -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
            if (!std::isfinite(p)) throw NumericError("non-finite parameter update");
            values[j] = p;
        }
    }
}

Checkpoint initial_checkpoint(const EncoderConfig& encoder, const HeadConfig& head, const Vocab& vocab) {
    EncoderConfig enc = encoder;
    enc.vocab_size = vocab.size();
    Checkpoint cp;
    cp.model = init_model(enc, head);
    cp.vocab = vocab;
    return cp;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'C', 'S', 'C', 'K'};
constexpr std::array<char, 4> kEndMagic{'C', 'E', 'N', 'D'};

void write_magic(std::ostream& out, const std::array<char, 4>& m) { out.write(m.data(), m.size()); }

void expect_magic(std::istream& in, const std::array<char, 4>& m, std::string_view what) {
    std::array<char, 4> got{};
    binio::read_exact(in, got.data(), got.size(), what);
    if (got != m) throw FormatError("checkpoint: bad " + std::string(what));
}

std::uint64_t read_size(std::istream& in, std::string_view what, std::uint64_t limit) {
    const auto v = binio::read_u64(in, what);
    if (v > limit) throw FormatError("checkpoint: implausible " + std::string(what));
    return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& cp) {
    const auto& ec = cp.model.encoder.config;
    const auto& hc = cp.model.head.config;
    write_magic(out, kCheckpointMagic);
    binio::write_u32(out, kCheckpointVersion);
    binio::write_u32(out, static_cast<std::uint32_t>(cp.stage));
    binio::write_u64(out, cp.global_step);
    binio::write_u64(out, cp.stage_step);
    for (std::uint64_t v : {std::uint64_t{ec.vocab_size}, std::uint64_t{ec.d_model}, std::uint64_t{ec.n_layers},
                            std::uint64_t{ec.n_heads}, std::uint64_t{ec.d_ff}, std::uint64_t{ec.max_len}, ec.seed,
                            std::uint64_t{hc.d_embed}, std::uint64_t{hc.gate_mode == GateMode::Softmax}, hc.seed}) {
        binio::write_u64(out, v);
    }
    binio::write_string(out, cp.config_json);
    binio::write_u64(out, cp.vocab.size());
    for (const auto& t : cp.vocab.tokens()) binio::write_string(out, t);
    const auto params = cp.model.parameters();
    binio::write_u64(out, params.size());
    for (const auto& [name, t] : params) {
        binio::write_string(out, name);
        write_tensor(out, t);
    }
    binio::write_u64(out, cp.optimizer.step);
    binio::write_u64(out, cp.optimizer.m.size());
    for (std::size_t i = 0; i < cp.optimizer.m.size(); ++i) {
        const Shape& shape = params.at(i).second.shape();
        write_tensor(out, Tensor(shape, cp.optimizer.m[i]));
        write_tensor(out, Tensor(shape, cp.optimizer.v[i]));
    }
    write_magic(out, kEndMagic);
    if (!out) throw FormatError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
    expect_magic(in, kCheckpointMagic, "magic bytes");
    const auto version = binio::read_u32(in, "checkpoint version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint cp;
    const auto stage = binio::read_u32(in, "stage");
    if (stage > 3) throw FormatError("checkpoint: invalid stage " + std::to_string(stage));
    cp.stage = static_cast<int>(stage);
    cp.global_step = binio::read_u64(in, "global step");
    cp.stage_step = binio::read_u64(in, "stage step");

    constexpr std::uint64_t kDimLimit = std::uint64_t{1} << 24;
    EncoderConfig ec;
    HeadConfig hc;
    ec.vocab_size = read_size(in, "vocab_size", kDimLimit);
    ec.d_model = read_size(in, "d_model", kDimLimit);
    ec.n_layers = read_size(in, "n_layers", 1024);
    ec.n_heads = read_size(in, "n_heads", kDimLimit);
    ec.d_ff = read_size(in, "d_ff", kDimLimit);
    ec.max_len = read_size(in, "max_len", kDimLimit);
    ec.seed = binio::read_u64(in, "encoder seed");
    hc.d_embed = read_size(in, "d_embed", kDimLimit);
    hc.gate_mode = read_size(in, "gate mode", 1) == 1 ? GateMode::Softmax : GateMode::Sigmoid;
    hc.seed = binio::read_u64(in, "head seed");
    try {
        cp.model = init_model(ec, hc);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid architecture: ") + e.what());
    }
    cp.config_json = binio::read_string(in, "config echo");

    const auto n_tokens = read_size(in, "vocabulary size", kDimLimit);
    std::vector<std::string> tokens;
    for (std::uint64_t i = 0; i < n_tokens; ++i) tokens.push_back(binio::read_string(in, "vocabulary token", 1 << 16));
    if (tokens.size() < special::kCount) throw FormatError("checkpoint: vocabulary lacks the reserved block");
    for (std::size_t i = 0; i < special::kCount; ++i) {
        if (tokens[i] != special::kNames[i]) throw FormatError("checkpoint: vocabulary reserved block is corrupt");
    }
    for (std::size_t i = special::kCount; i < tokens.size(); ++i) cp.vocab.add(tokens[i]);
    if (cp.vocab.size() != tokens.size()) throw FormatError("checkpoint: duplicate vocabulary tokens");

    auto params = cp.model.parameters();
    const auto n_params = binio::read_u64(in, "parameter count");
    if (n_params != params.size()) {
        throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                          std::to_string(n_params));
    }
    for (auto& [name, t] : params) {
        const auto got = binio::read_string(in, "tensor name", 1 << 12);
        if (got != name) throw FormatError("checkpoint: expected tensor '" + name + "', found '" + got + "'");
        const Tensor value = read_tensor(in);
        if (value.shape() != t.shape()) throw FormatError("checkpoint: tensor '" + name + "' has the wrong shape");
        std::copy(value.values().begin(), value.values().end(), t.mutable_values().begin());
    }
    cp.optimizer.step = binio::read_u64(in, "optimizer step");
    const auto n_moments = binio::read_u64(in, "moment count");
    if (n_moments != 0 && n_moments != params.size()) throw FormatError("checkpoint: optimizer state is incomplete");
    for (std::uint64_t i = 0; i < n_moments; ++i) {
        for (auto* dst : {&cp.optimizer.m, &cp.optimizer.v}) {
            const Tensor value = read_tensor(in);
            if (value.shape() != params[i].second.shape()) throw FormatError("checkpoint: moment shape mismatch");
            dst->emplace_back(value.values().begin(), value.values().end());
        }
    }
    expect_magic(in, kEndMagic, "end marker");
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after end marker");
    return cp;
}

void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
    // Serialize fully before touching the file so a failure leaves no partial output.
    const std::string bytes = checkpoint_bytes(cp);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    try {
        return read_checkpoint(in);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string checkpoint_bytes(const Checkpoint& cp) {
    std::ostringstream out(std::ios::binary);
    write_checkpoint(out, cp);
    return std::move(out).str();
}

// ---------------------------------------------------------------------------
// Training loop

std::string format_log_row(const LogRow& r) {
    char buf[64];
    std::string line = std::to_string(r.step);
    const auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        line += ',';
        line += buf;
    };
    num(r.lr);
    num(r.ce);
    num(r.align);
    num(r.diff);
    num(r.nc);
    num(r.total);
    for (const auto& acc : {r.dev_acc_src, r.dev_acc_tgt}) {
        if (acc) {
            num(*acc);
        } else {
            line += ',';
        }
    }
    return line;
}

InputFormat stage_format(int stage) { return stage == 3 ? InputFormat::QA : InputFormat::Statement; }

double accuracy_percent(std::span<const std::size_t> predictions, std::span<const Example> items) {
    if (predictions.size() != items.size() || items.empty()) throw DataError("accuracy: prediction count mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < items.size(); ++i) correct += predictions[i] == items[i].gold ? 1 : 0;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(items.size());
}

namespace {

// Batch for each step is a pure function of (seed, stage, step): items are
// drawn from a fresh permutation every epoch.
class BatchOrder {
public:
    BatchOrder(std::size_t n, std::size_t batch, std::uint64_t seed, int stage)
        : n_(n), batch_(batch), seed_(derive_seed(seed, 7000 + static_cast<std::uint64_t>(stage))) {}

    std::vector<std::size_t> batch(std::uint64_t step) {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < batch_; ++i) {
            const std::uint64_t pos = step * batch_ + i;
            out.push_back(permutation(pos / n_)[pos % n_]);
        }
        return out;
    }

private:
    const std::vector<std::size_t>& permutation(std::uint64_t epoch) {
        auto it = cache_.find(epoch);
        if (it != cache_.end()) return it->second;
        if (cache_.size() > 4) cache_.clear();
        std::vector<std::size_t> perm(n_);
        for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
        Rng rng(derive_seed(seed_, epoch));
        rng.shuffle(std::span(perm));
        return cache_.emplace(epoch, std::move(perm)).first->second;
    }

    std::size_t n_, batch_;
    std::uint64_t seed_;
    std::map<std::uint64_t, std::vector<std::size_t>> cache_;
};

struct DevSet {
    std::vector<Example> source, target;
};

DevSet dev_subset(std::span<const ParallelPair> dev, std::size_t limit) {
    DevSet d;
    const std::size_t n = limit == 0 ? dev.size() : std::min(limit, dev.size());
    for (std::size_t i = 0; i < n; ++i) {
        d.source.push_back(dev[i].source);
        d.target.push_back(dev[i].target);
    }
    return d;
}

class LogSink {
public:
    explicit LogSink(const StageOptions& options) : options_(options) {
        if (!options.log_path) return;
        const bool fresh = !std::filesystem::exists(*options.log_path) || std::filesystem::file_size(*options.log_path) == 0;
        file_.open(*options.log_path, std::ios::app);
        if (!file_) throw DataError("cannot open training log " + options.log_path->string());
        if (fresh) file_ << kLogHeader << '\n';
    }

    void write(const LogRow& row) {
        if (file_.is_open()) file_ << format_log_row(row) << '\n' << std::flush;
        if (options_.on_row) options_.on_row(row);
    }

private:
    const StageOptions& options_;
    std::ofstream file_;
};

// Training allocates and frees many mid-sized buffers per step; keeping them
// on the heap instead of fresh mappings removes most of the system time.
void tune_allocator() {
#if defined(__GLIBC__)
    static std::once_flag once;
    std::call_once(once, [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
    });
#endif
}

using StepLoss = std::function<JointLoss(const Model&, std::span<const std::size_t> batch)>;

StageResult run_stage(Checkpoint cp, const TrainConfig& config, std::size_t n_items, const StepLoss& step_loss,
                      std::span<const ParallelPair> dev, const StageOptions& options) {
    config.validate();
    tune_allocator();
    if (n_items == 0) throw DataError("stage " + std::to_string(config.stage) + ": training data is empty");
    if (cp.vocab.size() > cp.model.encoder.config.vocab_size) throw DataError("checkpoint vocabulary exceeds model");
    // Tensors are shared handles; never update the caller's weights in place.
    cp.model = cp.model.clone();

    // Continue an interrupted run of the same stage; otherwise start the
    // stage with a fresh optimizer while keeping the global step count.
    if (cp.stage != config.stage) {
        cp.stage = config.stage;
        cp.stage_step = 0;
        cp.optimizer = {};
    }
    StageResult result;
    const std::size_t end = config.stop_after ? std::min(*config.stop_after, config.total_steps) : config.total_steps;
    if (cp.stage_step >= end) {
        result.checkpoint = std::move(cp);
        return result;
    }

    const InputFormat format = stage_format(config.stage);
    const DevSet devset = dev_subset(dev, config.eval_limit);
    BatchOrder order(n_items, config.batch_size, config.seed, config.stage);
    LogSink sink(options);
    auto named = cp.model.parameters();
    std::vector<Tensor> params;
    for (auto& [name, t] : named) params.push_back(t);

    while (cp.stage_step < end) {
        const std::uint64_t k = cp.stage_step + 1;
        for (auto& p : params) p.zero_grad();
        const auto batch = order.batch(cp.stage_step);
        LogRow row;
        row.step = cp.global_step + 1;
        row.lr = scheduled_lr(config, k);
        try {
            const JointLoss loss = step_loss(cp.model, batch);
            row.ce = loss.ce;
            row.align = loss.align;
            row.diff = loss.diff;
            row.nc = loss.nc;
            row.total = loss.total.item();
            loss.total.backward();
            optimizer_step(params, cp.optimizer, config, row.lr);
        } catch (const NumericError& e) {
            throw NumericError("training diverged at stage " + std::to_string(config.stage) + " step " +
                               std::to_string(k) + " (ce=" + std::to_string(row.ce) + "): " + e.what());
        }
        cp.stage_step = k;
        cp.global_step += 1;
        const bool eval_now =
            !dev.empty() && (k == config.total_steps || (config.eval_every != 0 && k % config.eval_every == 0));
        if (eval_now) {
            row.dev_acc_src = accuracy_percent(
                predict_items(cp.model, devset.source, cp.vocab, format, InputMode::Commonsense), devset.source);
            row.dev_acc_tgt = accuracy_percent(
                predict_items(cp.model, devset.target, cp.vocab, format, InputMode::Commonsense), devset.target);
        }
        sink.write(row);
        result.log.push_back(row);
    }
    for (auto& p : params) p.zero_grad();
    result.checkpoint = std::move(cp);
    return result;
}

void check_pairs(std::span<const ParallelPair> pairs) {
    for (const auto& p : pairs) p.validate();
}

std::vector<const Example*> side(std::span<const ParallelPair> pairs, std::span<const std::size_t> idx, bool source) {
    std::vector<const Example*> out;
    for (auto i : idx) out.push_back(source ? &pairs[i].source : &pairs[i].target);
    return out;
}

std::vector<std::size_t> gold_of(const std::vector<const Example*>& items) {
    std::vector<std::size_t> g;
    for (const auto* e : items) g.push_back(e->gold);
    return g;
}

StageResult run_parallel_stage(Checkpoint cp, const TrainConfig& config, int stage,
                               std::span<const ParallelPair> pairs, std::span<const ParallelPair> dev,
                               const StageOptions& options) {
    if (config.stage != stage) throw ConfigError("config is for stage " + std::to_string(config.stage));
    check_pairs(pairs);
    const InputFormat format = stage_format(stage);
    const Vocab vocab = cp.vocab;
    const StepLoss loss = [&](const Model& model, std::span<const std::size_t> batch) {
        const auto src = side(pairs, batch, true);
        const auto tgt = side(pairs, batch, false);
        const auto gold = gold_of(tgt);
        const LanguageOutputs out_src = forward_items(model, src, vocab, format);
        const LanguageOutputs out_tgt = forward_items(model, tgt, vocab, format);
        return joint_loss(&out_src, out_tgt, gold, config.losses, stage);
    };
    return run_stage(std::move(cp), config, pairs.size(), loss, dev, options);
}

}  // namespace

StageResult run_stage1(Checkpoint cp, const TrainConfig& config, std::span<const Example> train,
                       std::span<const ParallelPair> dev, const StageOptions& options) {
    if (config.stage != 1) throw ConfigError("config is for stage " + std::to_string(config.stage));
    for (const auto& e : train) e.validate();
    const Vocab vocab = cp.vocab;
    const StepLoss loss = [&](const Model& model, std::span<const std::size_t> batch) {
        std::vector<const Example*> items;
        for (auto i : batch) items.push_back(&train[i]);
        const auto gold = gold_of(items);
        const LanguageOutputs out = forward_items(model, items, vocab, InputFormat::Statement);
        return joint_loss(nullptr, out, gold, config.losses, 1);
    };
    return run_stage(std::move(cp), config, train.size(), loss, dev, options);
}

StageResult run_stage2(Checkpoint cp, const TrainConfig& config, std::span<const ParallelPair> parallel,
                       std::span<const ParallelPair> dev, const StageOptions& options) {
    return run_parallel_stage(std::move(cp), config, 2, parallel, dev, options);
}

StageResult run_stage3(Checkpoint cp, const TrainConfig& config, std::span<const ParallelPair> train,
                       std::span<const ParallelPair> dev, const StageOptions& options) {
    return run_parallel_stage(std::move(cp), config, 3, train, dev, options);
}

}  // namespace cstransfer
