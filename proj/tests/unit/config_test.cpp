#include <gtest/gtest.h>

#include "cstransfer/errors.hpp"
#include "cstransfer/run_config.hpp"

namespace cstransfer {
namespace {

TEST(RunConfig, DefaultsValidate) {
    const auto c = default_run_config();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.stage1.total_steps, 3000u);
    EXPECT_EQ(c.stage_config(1).stage, 1);
    EXPECT_EQ(c.stage_config(3).stage, 3);
}

TEST(RunConfig, JsonRoundTrip) {
    auto c = default_run_config();
    c.seed = 42;
    c.world.n_concepts = 33;
    c.encoder.d_model = 32;
    c.head.gate_mode = GateMode::Softmax;
    c.losses = "align+nc";
    c.stage2.learning_rate = 1e-3;
    c.stage3.eval_limit = 7;
    const auto text = run_config_json(c);
    const auto back = parse_run_config(text);
    EXPECT_EQ(run_config_json(back), text);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(back.world.n_concepts, 33u);
    EXPECT_EQ(back.head.gate_mode, GateMode::Softmax);
    EXPECT_DOUBLE_EQ(back.stage2.learning_rate, 1e-3);
}

TEST(RunConfig, PartialOverridesKeepDefaults) {
    const auto c = parse_run_config(R"({"train": {"stage2": {"total_steps": 5, "warmup_steps": 2}}})");
    EXPECT_EQ(c.stage2.total_steps, 5u);
    EXPECT_EQ(c.stage1.total_steps, default_run_config().stage1.total_steps);
}

TEST(RunConfig, UnknownKeysRejected) {
    EXPECT_THROW(parse_run_config(R"({"sead": 3})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model": {"d_modle": 3}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"train": {"stage1": {"lr": 0.1}}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"train": {"loss_weights": {"ce": 1, "xx": 2}}})"), ConfigError);
}

TEST(RunConfig, BadValuesRejected) {
    EXPECT_THROW(parse_run_config("{"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"seed": -1})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"seed": "x"})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model": {"dropout_rate": 0.1}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model": {"d_model": 30, "n_heads": 4}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model": {"gate_mode": "tanh"}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"train": {"losses": "everything"}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"train": {"stage1": {"learning_rate": -1}}})"), ConfigError);
}

TEST(RunConfig, EffectiveLosses) {
    auto c = default_run_config();
    c.losses = "align";
    const auto w = c.effective_losses();
    EXPECT_EQ(w.ce, 1.0);
    EXPECT_EQ(w.align, 1.0);
    EXPECT_EQ(w.diff, 0.0);
    EXPECT_EQ(w.nc, 0.0);
    const auto s1 = c.stage_config(1).losses;
    EXPECT_EQ(s1.align + s1.diff + s1.nc, 0.0);
    c.losses = "custom";
    c.loss_weights.nc = 0.5;
    EXPECT_EQ(c.stage_config(3).losses.nc, 0.5);
}

TEST(RunConfig, SeedsDifferPerPurpose) {
    auto c = default_run_config();
    c.seed = 5;
    EXPECT_NE(c.stage_config(1).seed, c.stage_config(2).seed);
    EXPECT_NE(c.encoder_config().seed, c.head_config().seed);
    auto d = c;
    d.seed = 6;
    EXPECT_NE(c.encoder_config().seed, d.encoder_config().seed);
}

}  // namespace
}  // namespace cstransfer
