#include "cstransfer/run_config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"

namespace cstransfer {

using json = nlohmann::ordered_json;

namespace {

// Reads keys of one JSON object, rejecting any key not consumed.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) throw ConfigError(path_ + ": unknown key '" + key + "'");
        }
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
        if constexpr (std::is_unsigned_v<T>) {
            if (!j_.at(key).is_number_unsigned()) throw ConfigError(path_ + "." + key + ": expected a non-negative integer");
        }
    }

    const json* child(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    const std::string& path() const { return path_; }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_stage(const json& j, const std::string& path, TrainConfig& s) {
    Section sec(j, path);
    sec.get("learning_rate", s.learning_rate);
    sec.get("warmup_steps", s.warmup_steps);
    sec.get("total_steps", s.total_steps);
    sec.get("batch_size", s.batch_size);
    sec.get("weight_decay", s.weight_decay);
    sec.get("beta1", s.beta1);
    sec.get("beta2", s.beta2);
    sec.get("adam_eps", s.adam_eps);
    sec.get("eval_every", s.eval_every);
    sec.get("eval_limit", s.eval_limit);
    sec.finish();
}

json stage_json(const TrainConfig& s) {
    return json{{"learning_rate", s.learning_rate}, {"warmup_steps", s.warmup_steps},
                {"total_steps", s.total_steps},     {"batch_size", s.batch_size},
                {"weight_decay", s.weight_decay},   {"beta1", s.beta1},
                {"beta2", s.beta2},                 {"adam_eps", s.adam_eps},
                {"eval_every", s.eval_every},       {"eval_limit", s.eval_limit}};
}

}  // namespace

void RunConfig::validate() const {
    world.validate();
    EncoderConfig e = encoder_config();
    e.vocab_size = std::max<std::size_t>(e.vocab_size, 1);
    e.validate();
    head_config().validate();
    if (losses != "custom") LossWeights::preset(losses);
    effective_losses().validate();
    for (int s = 1; s <= 3; ++s) stage_config(s).validate();
}

LossWeights RunConfig::effective_losses() const {
    return losses == "custom" ? loss_weights : LossWeights::preset(losses);
}

TrainConfig RunConfig::stage_config(int stage) const {
    if (stage < 1 || stage > 3) throw ConfigError("unknown stage " + std::to_string(stage));
    TrainConfig c = stage == 1 ? stage1 : stage == 2 ? stage2 : stage3;
    c.stage = stage;
    c.seed = derive_seed(seed, 10 + static_cast<std::uint64_t>(stage));
    c.losses = stage == 1 ? LossWeights{1, 0, 0, 0} : effective_losses();
    return c;
}

EncoderConfig RunConfig::encoder_config() const {
    EncoderConfig e = encoder;
    e.seed = derive_seed(seed, 1);
    return e;
}

HeadConfig RunConfig::head_config() const {
    HeadConfig h = head;
    h.d_model = encoder.d_model;
    h.seed = derive_seed(seed, 2);
    return h;
}

RunConfig default_run_config() {
    RunConfig c;
    c.stage1.total_steps = 3000;
    c.stage2.total_steps = 1000;
    c.stage3.total_steps = 1500;
    for (auto* s : {&c.stage1, &c.stage2, &c.stage3}) {
        s->batch_size = 16;
        s->eval_every = 500;
        s->eval_limit = 200;
    }
    return c;
}

RunConfig parse_run_config(std::string_view json_text, const std::string& source) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(source + ": invalid JSON: " + e.what());
    }
    RunConfig c = default_run_config();
    {
        Section top(j, source);
        top.get("seed", c.seed);
        top.get("diagnostic_items", c.diagnostic_items);
        if (const json* w = top.child("world")) {
            Section s(*w, source + ".world");
            s.get("n_concepts", c.world.n_concepts);
            s.get("n_filler_tokens", c.world.n_filler_tokens);
            s.get("relation_density", c.world.relation_density);
            s.get("choices_per_item", c.world.choices_per_item);
            s.get("train_size", c.world.train_size);
            s.get("dev_size", c.world.dev_size);
            s.get("test_size", c.world.test_size);
            s.get("parallel_size", c.world.parallel_size);
            s.get("seed", c.world.seed);
            s.finish();
        }
        if (const json* m = top.child("model")) {
            Section s(*m, source + ".model");
            s.get("d_model", c.encoder.d_model);
            s.get("n_layers", c.encoder.n_layers);
            s.get("n_heads", c.encoder.n_heads);
            s.get("d_ff", c.encoder.d_ff);
            s.get("max_len", c.encoder.max_len);
            s.get("dropout_rate", c.encoder.dropout_rate);
            s.get("d_embed", c.head.d_embed);
            std::string gate = std::string(to_string(c.head.gate_mode));
            s.get("gate_mode", gate);
            c.head.gate_mode = parse_gate_mode(gate);
            s.finish();
        }
        if (const json* t = top.child("train")) {
            Section s(*t, source + ".train");
            s.get("losses", c.losses);
            if (const json* lw = s.child("loss_weights")) {
                Section l(*lw, source + ".train.loss_weights");
                l.get("ce", c.loss_weights.ce);
                l.get("align", c.loss_weights.align);
                l.get("diff", c.loss_weights.diff);
                l.get("nc", c.loss_weights.nc);
                l.finish();
            }
            if (const json* s1 = s.child("stage1")) read_stage(*s1, source + ".train.stage1", c.stage1);
            if (const json* s2 = s.child("stage2")) read_stage(*s2, source + ".train.stage2", c.stage2);
            if (const json* s3 = s.child("stage3")) read_stage(*s3, source + ".train.stage3", c.stage3);
            s.finish();
        }
        top.finish();
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), path.string());
}

std::string run_config_json(const RunConfig& c) {
    const auto& w = c.world;
    json j{{"seed", c.seed},
           {"diagnostic_items", c.diagnostic_items},
           {"world",
            {{"n_concepts", w.n_concepts},
             {"n_filler_tokens", w.n_filler_tokens},
             {"relation_density", w.relation_density},
             {"choices_per_item", w.choices_per_item},
             {"train_size", w.train_size},
             {"dev_size", w.dev_size},
             {"test_size", w.test_size},
             {"parallel_size", w.parallel_size},
             {"seed", w.seed}}},
           {"model",
            {{"d_model", c.encoder.d_model},
             {"n_layers", c.encoder.n_layers},
             {"n_heads", c.encoder.n_heads},
             {"d_ff", c.encoder.d_ff},
             {"max_len", c.encoder.max_len},
             {"dropout_rate", c.encoder.dropout_rate},
             {"d_embed", c.head.d_embed},
             {"gate_mode", std::string(to_string(c.head.gate_mode))}}},
           {"train",
            {{"losses", c.losses},
             {"loss_weights",
              {{"ce", c.loss_weights.ce},
               {"align", c.loss_weights.align},
               {"diff", c.loss_weights.diff},
               {"nc", c.loss_weights.nc}}},
             {"stage1", stage_json(c.stage1)},
             {"stage2", stage_json(c.stage2)},
             {"stage3", stage_json(c.stage3)}}}};
    return j.dump(2);
}

}  // namespace cstransfer
