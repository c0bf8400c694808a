#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cstransfer/errors.hpp"
#include "cstransfer/synth_world.hpp"
#include "cstransfer/trainer.hpp"

namespace cstransfer {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
    auto dir = fs::temp_directory_path() / "cstransfer_trainer_test";
    fs::create_directories(dir);
    return dir / name;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

const SynthWorld& tiny_world() {
    static const SynthWorld w = [] {
        SynthWorldConfig c;
        c.n_concepts = 12;
        c.n_filler_tokens = 6;
        c.train_size = 40;
        c.dev_size = 20;
        c.test_size = 10;
        c.parallel_size = 30;
        c.seed = 5;
        return generate_synthetic_world(c);
    }();
    return w;
}

Checkpoint tiny_checkpoint() {
    EncoderConfig e;
    e.d_model = 16;
    e.n_layers = 1;
    e.n_heads = 2;
    e.d_ff = 32;
    e.max_len = 16;
    HeadConfig h;
    h.d_embed = 16;
    return initial_checkpoint(e, h, tiny_world().vocab());
}

TrainConfig tiny_train(int stage, std::size_t steps) {
    TrainConfig c;
    c.stage = stage;
    c.total_steps = steps;
    c.warmup_steps = std::min<std::size_t>(10, steps);
    c.batch_size = 4;
    c.learning_rate = 3e-3;
    c.eval_every = 5;
    c.seed = 21;
    return c;
}

std::vector<Example> mixed_pool(const std::vector<ParallelPair>& pairs, std::size_t n) {
    std::vector<Example> out;
    for (std::size_t i = 0; i < n && i < pairs.size(); ++i) {
        out.push_back(pairs[i].source);
        out.push_back(pairs[i].target);
    }
    return out;
}

TEST(Schedule, WarmupThenLinearDecayToZero) {
    TrainConfig c;
    c.learning_rate = 3e-4;
    c.warmup_steps = 100;
    c.total_steps = 1000;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 50), 1.5e-4);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 100), 3e-4);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 550), 1.5e-4);
    EXPECT_EQ(scheduled_lr(c, 1000), 0.0);
    EXPECT_EQ(scheduled_lr(c, 1001), 0.0);
    for (std::size_t k = 1; k < 1000; ++k) {
        EXPECT_LE(std::abs(scheduled_lr(c, k + 1) - scheduled_lr(c, k)), 3e-4 / 100 + 1e-18);
    }
}

TEST(Optimizer, ZeroGradientWithoutDecayLeavesParametersUnchanged) {
    TrainConfig c;
    c.weight_decay = 0.0;
    std::vector<Tensor> p{Tensor::vector({1.5, -2.0}, true)};
    p[0].mutable_grad();
    OptimizerState s;
    for (int i = 0; i < 5; ++i) optimizer_step(p, s, c, 1e-2);
    EXPECT_EQ(p[0].at(0), 1.5);
    EXPECT_EQ(p[0].at(1), -2.0);
}

TEST(Optimizer, QuadraticConvergesToItsMinimum) {
    // f(p) = (p - 1)^2 has its minimum at p = 1.
    TrainConfig c;
    c.weight_decay = 0.0;
    std::vector<Tensor> p{Tensor::vector({0.0}, true)};
    OptimizerState s;
    for (int i = 0; i < 200; ++i) {
        p[0].zero_grad();
        const Tensor d = p[0] + (-1.0);
        sum(d * d).backward();
        optimizer_step(p, s, c, 0.01);
    }
    EXPECT_NEAR(p[0].at(0), 1.0, 0.05);
}

TEST(Optimizer, NonFiniteGradientAborts) {
    TrainConfig c;
    std::vector<Tensor> p{Tensor::vector({1.0}, true)};
    p[0].mutable_grad()[0] = std::numeric_limits<double>::infinity();
    OptimizerState s;
    EXPECT_THROW(optimizer_step(p, s, c, 0.01), NumericError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const auto& w = tiny_world();
    auto cp = run_stage1(tiny_checkpoint(), tiny_train(1, 3), mixed_pool(w.train, 10), {}).checkpoint;
    cp.config_json = R"({"note":"echo"})";
    const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
    save_checkpoint(cp, a);
    const auto loaded = load_checkpoint(a);
    save_checkpoint(loaded, b);
    EXPECT_EQ(read_file(a), read_file(b));
    EXPECT_EQ(loaded.global_step, 3u);
    EXPECT_EQ(loaded.stage, 1);
    EXPECT_EQ(loaded.config_json, cp.config_json);
    EXPECT_EQ(loaded.vocab, cp.vocab);
    EXPECT_EQ(loaded.optimizer.m, cp.optimizer.m);
}

TEST(Checkpoint, TruncationAndCorruptionAreErrors) {
    const std::string bytes = checkpoint_bytes(tiny_checkpoint());
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        std::istringstream in(bytes.substr(0, cut));
        EXPECT_THROW(read_checkpoint(in), FormatError) << cut;
    }
    std::string bad_version = bytes;
    bad_version[4] = 9;
    std::istringstream v(bad_version);
    EXPECT_THROW(read_checkpoint(v), FormatError);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream m(bad_magic);
    EXPECT_THROW(read_checkpoint(m), FormatError);
    std::istringstream trailing(bytes + "x");
    EXPECT_THROW(read_checkpoint(trailing), FormatError);
    EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), FormatError);
}

TEST(Stage1, ZeroStepsReturnsInitialWeights) {
    const auto cp = tiny_checkpoint();
    const auto out = run_stage1(cp, tiny_train(1, 0), mixed_pool(tiny_world().train, 4), {});
    EXPECT_TRUE(out.log.empty());
    const auto a = cp.model.parameters(), b = out.checkpoint.model.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(std::equal(a[i].second.values().begin(), a[i].second.values().end(),
                               b[i].second.values().begin()));
    }
}

TEST(Stage1, DoesNotModifyTheCallersCheckpoint) {
    const auto cp = tiny_checkpoint();
    const std::string before = checkpoint_bytes(cp);
    run_stage1(cp, tiny_train(1, 2), mixed_pool(tiny_world().train, 4), {});
    EXPECT_EQ(checkpoint_bytes(cp), before);
}

TEST(Stage1, EmptyDataIsAnError) {
    EXPECT_THROW(run_stage1(tiny_checkpoint(), tiny_train(1, 2), {}, {}), DataError);
}

TEST(Stage1, SameSeedGivesIdenticalTraces) {
    const auto& w = tiny_world();
    const auto pool = mixed_pool(w.train, 20);
    const auto a = run_stage1(tiny_checkpoint(), tiny_train(1, 10), pool, w.dev);
    const auto b = run_stage1(tiny_checkpoint(), tiny_train(1, 10), pool, w.dev);
    EXPECT_EQ(a.log, b.log);
    EXPECT_EQ(checkpoint_bytes(a.checkpoint), checkpoint_bytes(b.checkpoint));
    ASSERT_TRUE(a.log[4].dev_acc_tgt.has_value());
    EXPECT_FALSE(a.log[3].dev_acc_tgt.has_value());
}

TEST(Stage1, OverfitsEightItems) {
    const auto& w = tiny_world();
    const std::vector<Example> items = mixed_pool(w.train, 4);
    auto cfg = tiny_train(1, 500);
    cfg.eval_every = 0;
    const auto out = run_stage1(tiny_checkpoint(), cfg, items, {});
    const auto preds = predict_items(out.checkpoint.model, items, out.checkpoint.vocab, InputFormat::Statement,
                                     InputMode::Commonsense);
    EXPECT_EQ(accuracy_percent(preds, items), 100.0);
}

TEST(Stage1, DivergenceAbortsWithDiagnostic) {
    auto cp = tiny_checkpoint();
    cp.model.head.w_cls.mutable_values()[0] = std::nan("");
    try {
        run_stage1(cp, tiny_train(1, 3), mixed_pool(tiny_world().train, 4), {});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
}

TEST(Resume, InterruptedRunMatchesUninterruptedRunExactly) {
    const auto& w = tiny_world();
    auto cfg = tiny_train(2, 12);
    const auto full = run_stage2(tiny_checkpoint(), cfg, w.parallel, w.dev);

    auto first_cfg = cfg;
    first_cfg.stop_after = 5;
    const auto first = run_stage2(tiny_checkpoint(), first_cfg, w.parallel, w.dev);
    const auto path = temp_path("resume.ckpt");
    save_checkpoint(first.checkpoint, path);
    const auto second = run_stage2(load_checkpoint(path), cfg, w.parallel, w.dev);

    auto trace = first.log;
    trace.insert(trace.end(), second.log.begin(), second.log.end());
    EXPECT_EQ(trace, full.log);
    EXPECT_EQ(checkpoint_bytes(second.checkpoint), checkpoint_bytes(full.checkpoint));
}

TEST(Stage2, DisabledLossesContributeNothingToTheTotal) {
    const auto& w = tiny_world();
    auto cfg = tiny_train(2, 4);
    cfg.losses = LossWeights::preset("base");
    for (const auto& row : run_stage2(tiny_checkpoint(), cfg, w.parallel, {}).log) {
        EXPECT_EQ(row.total, row.ce);
        EXPECT_GT(row.align, 0.0);
    }
}

TEST(Stage2, AlignOnlyOverfitsASinglePair) {
    const auto& w = tiny_world();
    auto cfg = tiny_train(2, 300);
    cfg.losses = {0, 1, 0, 0};
    cfg.batch_size = 1;
    const std::vector<ParallelPair> one{w.parallel.front()};
    const auto out = run_stage2(tiny_checkpoint(), cfg, one, {});
    const Example* src[] = {&one[0].source};
    const Example* tgt[] = {&one[0].target};
    const auto& model = out.checkpoint.model;
    const auto xs = forward_items(model, src, out.checkpoint.vocab, InputFormat::Statement);
    const auto xt = forward_items(model, tgt, out.checkpoint.vocab, InputFormat::Statement);
    const std::size_t g[] = {one[0].source.gold};
    const double cos = 1.0 - batch_loss_align(xs.head.X, xt.head.X, g).item();
    EXPECT_GT(cos, 0.99);
}

TEST(Stage2, NonCommonsenseLossPullsChoiceEmbeddingsTogether) {
    const auto& w = tiny_world();
    const std::vector<ParallelPair> batch(w.parallel.begin(), w.parallel.begin() + 4);
    auto cfg = tiny_train(2, 60);
    cfg.losses = {0, 0, 0, 1};
    cfg.batch_size = 4;
    const auto mean_choice_cosine = [&](const Checkpoint& cp) {
        std::vector<const Example*> items;
        for (const auto& p : batch) items.push_back(&p.source);
        const auto out = forward_items(cp.model, items, cp.vocab, InputFormat::Statement);
        const std::size_t c = batch[0].source.choices.size();
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            for (std::size_t a = 0; a < c; ++a) {
                for (std::size_t b = a + 1; b < c; ++b) {
                    const std::size_t ra[] = {i * c + a}, rb[] = {i * c + b};
                    total += cosine_rows(gather_rows(out.head.X_nc, ra), gather_rows(out.head.X_nc, rb)).at(0);
                    ++n;
                }
            }
        }
        return total / static_cast<double>(n);
    };
    Checkpoint cp = tiny_checkpoint();
    double previous = mean_choice_cosine(cp);
    for (std::size_t stop = 15; stop <= 60; stop += 15) {
        auto step_cfg = cfg;
        step_cfg.stop_after = stop;
        cp = run_stage2(cp, step_cfg, batch, {}).checkpoint;
        const double now = mean_choice_cosine(cp);
        EXPECT_GT(now, previous) << "after " << stop << " steps";
        previous = now;
    }
}

TEST(Stage3, ContinuesTheGlobalStepCounter) {
    const auto& w = tiny_world();
    const auto s2 = run_stage2(tiny_checkpoint(), tiny_train(2, 3), w.parallel, {});
    const auto s3 = run_stage3(s2.checkpoint, tiny_train(3, 2), w.train, w.dev);
    EXPECT_EQ(s3.log.front().step, 4u);
    EXPECT_EQ(s3.checkpoint.global_step, 5u);
    EXPECT_EQ(s3.checkpoint.stage, 3);
    EXPECT_TRUE(s3.log.back().dev_acc_src.has_value());
    EXPECT_TRUE(s3.log.back().dev_acc_tgt.has_value());
}

TEST(Stage3, OverfitsEightQaItemsInBothLanguages) {
    const auto& w = tiny_world();
    const std::vector<ParallelPair> items(w.train.begin(), w.train.begin() + 8);
    auto cfg = tiny_train(3, 400);
    cfg.batch_size = 8;
    cfg.eval_every = 0;
    const auto out = run_stage3(tiny_checkpoint(), cfg, items, {});
    for (const auto& side : {source_side(items), target_side(items)}) {
        const auto preds =
            predict_items(out.checkpoint.model, side, out.checkpoint.vocab, InputFormat::QA, InputMode::Commonsense);
        EXPECT_EQ(accuracy_percent(preds, side), 100.0);
    }
}

TEST(Stage, IsolationWithoutNewLossesMatchesCrossEntropyTotals) {
    const auto& w = tiny_world();
    auto cfg = tiny_train(3, 3);
    cfg.losses = LossWeights::preset("base");
    for (const auto& row : run_stage3(tiny_checkpoint(), cfg, w.train, {}).log) EXPECT_EQ(row.total, row.ce);
}

TEST(TrainingLog, CsvHasHeaderAndOneRowPerStep) {
    const auto& w = tiny_world();
    const auto path = temp_path("log.csv");
    fs::remove(path);
    StageOptions opts;
    opts.log_path = path;
    run_stage1(tiny_checkpoint(), tiny_train(1, 5), mixed_pool(w.train, 6), w.dev, opts);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, kLogHeader);
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8) << line;
    }
    EXPECT_EQ(rows, 5u);
}

TEST(TrainingLog, RowFormatRoundTripsDoubles) {
    LogRow r;
    r.step = 7;
    r.lr = 0.1;
    r.total = 1.0 / 3.0;
    r.dev_acc_tgt = 42.5;
    const auto line = format_log_row(r);
    EXPECT_EQ(line.substr(0, 6), "7,0.10");
    EXPECT_NE(line.find("0.33333333333333331"), std::string::npos);
    EXPECT_EQ(line.back(), '5');
    EXPECT_NE(line.find(",,42.5"), std::string::npos);
}

}  // namespace
}  // namespace cstransfer
