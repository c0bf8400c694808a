// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//
//   acceptance [--only 1,4,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cstransfer/grad_check.hpp"
#include "cstransfer/pipeline.hpp"
#include "cstransfer/rng.hpp"

using namespace cstransfer;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// Shared by criteria 4 to 7: one default-config pipeline run.
struct DefaultRun {
    RunConfig config;
    Corpus corpus;
    PipelineResult result;
    double cpu_s = 0.0;
};

DefaultRun& default_run() {
    static std::optional<DefaultRun> run;
    if (!run) {
        run.emplace();
        run->config = default_run_config();
        const double t0 = cpu_seconds();
        run->corpus = corpus_from_world(generate_synthetic_world(run->config.world));
        run->result = run_pipeline(run->config, run->corpus);
        run->cpu_s = cpu_seconds() - t0;
    }
    return *run;
}

// Tiny model and world for the contract checks.
RunConfig tiny_config() {
    RunConfig c = default_run_config();
    c.world.n_concepts = 12;
    c.world.n_filler_tokens = 6;
    c.world.train_size = 40;
    c.world.dev_size = 20;
    c.world.test_size = 20;
    c.world.parallel_size = 30;
    c.encoder.d_model = 16;
    c.encoder.n_layers = 1;
    c.encoder.n_heads = 2;
    c.encoder.d_ff = 32;
    c.encoder.max_len = 16;
    c.head.d_embed = 16;
    for (auto* s : {&c.stage1, &c.stage2, &c.stage3}) {
        s->total_steps = 12;
        s->warmup_steps = 3;
        s->batch_size = 4;
        s->eval_every = 4;
    }
    return c;
}

Tensor rows_of(const std::vector<std::vector<double>>& r) {
    std::vector<double> flat;
    for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
    return Tensor({r.size(), r.front().size()}, flat);
}

Tensor take_row(const Tensor& x, std::size_t i) {
    const std::size_t idx[] = {i};
    return reshape(gather_rows(x, idx), {x.dim(1)});
}

// Unit 2-vector whose cosine with (1, 0) is c.
std::vector<double> at_cosine(double c) { return {c, std::sqrt(1.0 - c * c)}; }

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig c = tiny_config();
    const auto world = generate_synthetic_world(c.world);
    const Vocab vocab = world.vocab();
    EncoderConfig enc = c.encoder_config();
    enc.vocab_size = vocab.size();
    const Model model = init_model(enc, c.head_config());
    const std::vector<const Example*> src{&world.parallel[0].source, &world.parallel[1].source};
    const std::vector<const Example*> tgt{&world.parallel[0].target, &world.parallel[1].target};
    const std::vector<std::size_t> gold{world.parallel[0].source.gold, world.parallel[1].source.gold};
    const LossWeights all_on{1, 1, 1, 1};
    auto f = [&] {
        const auto s = forward_items(model, src, vocab, InputFormat::QA);
        const auto t = forward_items(model, tgt, vocab, InputFormat::QA);
        return joint_loss(&s, t, gold, all_on, 3).total;
    };
    std::vector<Tensor> params;
    std::size_t entries = 0;
    for (auto& [name, t] : model.parameters()) {
        params.push_back(t);
        entries += t.numel();
    }
    const double err = grad_check(f, params);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {err < 1e-4 && secs < 60.0,
            fmt("max rel err %.3g over %zu tensors (%zu entries), %.1f s", err, params.size(), entries, secs)};
}

Outcome loss_oracles() {
    struct Case {
        const char* name;
        double got, want;
    };
    const auto u = Tensor::vector({1, 2, 3});
    const std::vector<Case> cases{
        {"align identical", loss_align(u, u).item(), 0.0},
        {"align orthogonal", loss_align(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 1.0},
        {"align opposite", loss_align(u, u * -2.0).item(), 2.0},
        {"diff hinge inactive",
         loss_diff(rows_of({{1, 0}, {-1, 0}, {0, 1}}), rows_of({{1, 0}, {-1, 0}, {0, 1}}), 0).item(), 0.0},
        {"diff |C|=3",
         loss_diff(rows_of({at_cosine(1.0), at_cosine(0.5), at_cosine(-0.2)}),
                   rows_of({at_cosine(1.0), at_cosine(0.3), at_cosine(0.1)}), 0)
             .item(),
         0.9},
        {"diff identical |C|=4",
         loss_diff(rows_of({{1, 2}, {1, 2}, {1, 2}, {1, 2}}), rows_of({{3, 1}, {3, 1}, {3, 1}, {3, 1}}), 1).item(),
         6.0},
        {"nc identical", loss_nc(rows_of({{1, 2}, {1, 2}, {1, 2}}), rows_of({{1, 2}, {1, 2}, {1, 2}}), 2).item(), 0.0},
        {"nc |C|=2", loss_nc(rows_of({{1, 0, 0}, {0, 1, 0}}), rows_of({{0, 1, 0}, {0, 0, 1}}), 0).item(), 3.0},
        {"ce uniform", cross_entropy(Tensor::vector({0, 0}), 0).item(), std::log(2.0)},
        {"ce peaked", cross_entropy(Tensor::vector({10, 0, 0, 0, 0}), 0).item(), std::log1p(4.0 * std::exp(-10.0))},
    };
    double worst = 0.0;
    std::string worst_name;
    for (const auto& c : cases) {
        const double e = std::abs(c.got - c.want);
        if (e >= worst) {
            worst = e;
            worst_name = c.name;
        }
    }
    return {worst <= 1e-9, fmt("%zu cases, max abs err %.3g (%s)", cases.size(), worst, worst_name.c_str())};
}

Outcome loss_bounds() {
    Rng rng(derive_seed(20240607, 3));
    auto random_rows = [&](std::size_t n, std::size_t d) {
        std::vector<double> v(n * d);
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
        // Occasionally copy or negate the first row to reach the bounds.
        if (rng.index(4) == 0) {
            for (std::size_t r = 1; r < n; ++r) {
                const double s = rng.index(2) ? 1.0 : -1.0;
                for (std::size_t k = 0; k < d; ++k) v[r * d + k] = s * v[k];
            }
        }
        return Tensor({n, d}, v);
    };
    auto rescale = [&](const Tensor& x) {
        const std::size_t n = x.dim(0), d = x.dim(1);
        std::vector<double> v(x.values().begin(), x.values().end());
        for (std::size_t r = 0; r < n; ++r) {
            const double s = std::exp(rng.uniform(-7.0, 7.0));
            for (std::size_t k = 0; k < d; ++k) v[r * d + k] *= s;
        }
        return Tensor({n, d}, v);
    };
    const double slack = 1e-12;
    std::size_t bound_fail = 0, invariance_fail = 0, perm_fail = 0, perm_checked = 0;
    double worst_shift = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 2 + rng.index(5), d = 2 + rng.index(7);
        const std::size_t gold = rng.index(n);
        const auto s = random_rows(n, d), t = random_rows(n, d);
        const auto s2 = rescale(s), t2 = rescale(t);
        const double cn = static_cast<double>(n);
        const double a = loss_align(take_row(s, gold), take_row(t, gold)).item();
        const double a2 = loss_align(take_row(s2, gold), take_row(t2, gold)).item();
        const double df = loss_diff(s, t, gold).item(), df2 = loss_diff(s2, t2, gold).item();
        const double nc = loss_nc(s, t, gold).item(), nc2 = loss_nc(s2, t2, gold).item();
        if (a < -slack || a > 2 + slack || df < -slack || df > 2 * (cn - 1) + slack || nc < -slack ||
            nc > 2 * (2 * cn - 1) + slack) {
            ++bound_fail;
        }
        const double shift = std::max({std::abs(a - a2), std::abs(df - df2), std::abs(nc - nc2)});
        worst_shift = std::max(worst_shift, shift);
        if (shift > 1e-12) ++invariance_fail;

        // Prediction equivariance under a random choice permutation.
        HeadConfig hc;
        hc.d_model = d;
        hc.d_embed = d;
        hc.seed = rng.next();
        const auto head = init_head(hc);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(std::span(perm));
        const auto logits = choice_logits(s, head);
        const auto permuted = choice_logits(gather_rows(s, perm), head);
        const auto lv = logits.values(), pv = permuted.values();
        bool ok = true;
        for (std::size_t r = 0; r < n; ++r) ok = ok && std::abs(pv[r] - lv[perm[r]]) <= 1e-12;
        // Duplicate rows tie exactly; the lowest-index rule then depends on order.
        const std::size_t best = predict(lv);
        const bool unique = std::count(lv.begin(), lv.end(), lv[best]) == 1;
        if (unique) {
            ++perm_checked;
            ok = ok && perm[predict(pv)] == best;
        }
        if (!ok) ++perm_fail;
    }
    return {bound_fail == 0 && invariance_fail == 0 && perm_fail == 0,
            fmt("1000 instances: %zu bound, %zu rescaling (max shift %.3g), %zu permutation failures (%zu untied)",
                bound_fail, invariance_fail, worst_shift, perm_fail, perm_checked)};
}

Outcome end_to_end() {
    const auto& run = default_run();
    const auto& r = run.result;
    const double cs = r.dev_report(kTargetLang, InputMode::Commonsense).accuracy;
    const double nc = r.dev_report(kTargetLang, InputMode::NonCommonsense).accuracy;
    const std::size_t n = r.dev_report(kTargetLang, InputMode::Commonsense).count;
    return {cs >= 90.0 && nc <= 35.0 && run.cpu_s <= 900.0,
            fmt("DE dev (%zu items): commonsense %.1f%%, non-commonsense %.1f%%, %.0f CPU s", n, cs, nc, run.cpu_s)};
}

Outcome ablation() {
    const auto& run = default_run();
    RunConfig c = run.config;
    // Shortened stages 2 and 3 from the shared stage-1 checkpoint.
    c.stage2.total_steps = 150;
    c.stage2.warmup_steps = 15;
    c.stage3.total_steps = 200;
    c.stage3.warmup_steps = 20;
    const std::vector<std::string> presets{"base", "align", "align+diff", "nc", "align+nc"};
    const auto a = run_ablation(c, run.corpus, run.result.stage1, presets);
    const auto b = run_ablation(c, run.corpus, run.result.stage1, presets);
    bool identical = a.runs.size() == b.runs.size();
    for (std::size_t i = 0; identical && i < a.runs.size(); ++i) {
        identical = a.runs[i].checkpoint_digest == b.runs[i].checkpoint_digest &&
                    a.runs[i].report.predictions == b.runs[i].report.predictions;
    }
    const auto md = a.table.to_markdown();
    const bool table_ok = a.table.rows.size() == presets.size() && md.rfind("| Model | Accuracy |", 0) == 0;
    std::string cells;
    for (const auto& row : a.table.rows) {
        cells += (cells.empty() ? "" : ", ") + row.label + " " + fmt("%.1f ", row.accuracy) + format_delta(row.delta);
    }
    return {identical && table_ok, fmt("%s; reruns %s", cells.c_str(), identical ? "bit-identical" : "DIFFER")};
}

Outcome stage2_geometry() {
    const auto& r = default_run().result;
    const auto& g1 = r.geometry_stage1;
    const auto& g2 = r.geometry_stage2;
    return {g2.mean_gold_cosine >= 0.8 && g2.mean_hinge < g1.mean_hinge,
            fmt("%zu dev pairs: gold cos %.4f (stage 1 %.4f), hinge %.4f < %.4f", g2.items, g2.mean_gold_cosine,
                g1.mean_gold_cosine, g2.mean_hinge, g1.mean_hinge)};
}

Outcome attention_diagnostics() {
    const auto& g = default_run().result.gates;
    return {g.items >= 100 && g.concept_mean > g.filler_mean,
            fmt("%zu items: concept gate %.4f (%zu tokens) vs filler %.4f (%zu tokens)", g.items, g.concept_mean,
                g.concept_tokens, g.filler_mean, g.filler_tokens)};
}

Outcome engineering_contracts() {
    std::vector<std::string> failures;

    // save/load/save byte identity on a trained checkpoint.
    const RunConfig c = tiny_config();
    const auto world = generate_synthetic_world(c.world);
    const Corpus corpus = corpus_from_world(world);
    Checkpoint cp0 = initial_checkpoint(c.encoder_config(), c.head_config(), corpus.vocab);
    const auto trained = run_stage1(cp0, c.stage_config(1), mixed_pool(corpus.train), corpus.dev).checkpoint;
    {
        const std::string first = checkpoint_bytes(trained);
        std::istringstream in(first);
        if (checkpoint_bytes(read_checkpoint(in)) != first) failures.push_back("save/load/save");
    }

    // Interrupted and resumed runs reproduce the uninterrupted trace exactly.
    auto rows_text = [](const std::vector<LogRow>& rows) {
        std::string s;
        for (const auto& r : rows) s += format_log_row(r) + "\n";
        return s;
    };
    for (int stage : {1, 2}) {
        const Checkpoint start = stage == 1 ? cp0 : trained;
        auto run = [&](const Checkpoint& from, std::optional<std::size_t> stop) {
            TrainConfig tc = c.stage_config(stage);
            tc.stop_after = stop;
            return stage == 1 ? run_stage1(from, tc, mixed_pool(corpus.train), corpus.dev)
                              : run_stage2(from, tc, corpus.parallel, corpus.dev);
        };
        const auto straight = run(start, std::nullopt);
        const auto first = run(start, 5);
        std::istringstream in(checkpoint_bytes(first.checkpoint));
        const auto second = run(read_checkpoint(in), std::nullopt);
        if (rows_text(straight.log) != rows_text(first.log) + rows_text(second.log) ||
            checkpoint_bytes(straight.checkpoint) != checkpoint_bytes(second.checkpoint)) {
            failures.push_back("resume stage " + std::to_string(stage));
        }
    }

    // Padding never changes states or logits.
    double pad_err = 0.0;
    {
        const Model& m = trained.model;
        const Example& ex = world.dev[0].target;
        const auto short_pad = encode_choices(ex, corpus.vocab, 16, InputFormat::QA);
        auto long_pad = short_pad;
        for (auto& s : long_pad) {
            s.ids.resize(40, special::kPad);
            s.segments.resize(40, Segment::Pad);
        }
        EncoderWeights wide = m.encoder;
        wide.config.max_len = 40;
        std::vector<double> extra(24 * wide.config.d_model, 0.5);
        std::vector<double> pos(wide.position_embedding.values().begin(), wide.position_embedding.values().end());
        pos.insert(pos.end(), extra.begin(), extra.end());
        wide.position_embedding = Tensor({40, wide.config.d_model}, pos);
        for (std::size_t j = 0; j < short_pad.size(); ++j) {
            const auto a = encode(m.encoder, short_pad[j]);
            const auto b = encode(wide, long_pad[j]);
            for (std::size_t i = 0; i < a.numel(); ++i) {
                pad_err = std::max(pad_err, std::abs(a.values()[i] - b.values()[i]));
            }
        }
        // One item alone versus inside a batch of items with other lengths.
        std::vector<const Example*> batch;
        for (std::size_t i = 0; i < 6; ++i) batch.push_back(&world.dev[i].target);
        const std::vector<const Example*> alone{batch[3]};
        NoGradGuard no_grad;
        const auto lb = forward_items(m, batch, corpus.vocab, InputFormat::QA).logits;
        const auto la = forward_items(m, alone, corpus.vocab, InputFormat::QA).logits;
        const std::size_t k = la.numel();
        for (std::size_t j = 0; j < k; ++j) {
            pad_err = std::max(pad_err, std::abs(la.values()[j] - lb.values()[3 * k + j]));
        }
    }
    if (pad_err > 1e-10) failures.push_back("pad invariance");

    // Untrained default-size model on the target-language dev split.
    const auto& full = default_run();
    const auto dev = target_side(full.corpus.dev);
    const Checkpoint fresh = initial_checkpoint(full.config.encoder_config(), full.config.head_config(), full.corpus.vocab);
    const auto chance = evaluate(fresh, dev, InputMode::Commonsense, InputFormat::QA, "dev_DE");
    if (chance.count < 500 || std::abs(chance.accuracy - 20.0) > 5.0) failures.push_back("chance level");

    std::string failed;
    for (const auto& f : failures) failed += (failed.empty() ? "" : ", ") + f;
    return {failures.empty(), fmt("round trip + resume (2 stages) exact, pad err %.3g, untrained %.1f%% on %zu items%s%s",
                                  pad_err, chance.accuracy, chance.count, failed.empty() ? "" : "; FAILED: ",
                                  failed.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
        } else {
            std::fprintf(stderr, "usage: %s [--only 1,2,...]\n", argv[0]);
            return 2;
        }
    }
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient integrity", gradient_integrity},
        {"loss-value oracles", loss_oracles},
        {"loss bounds and invariances", loss_bounds},
        {"synthetic end-to-end transfer", end_to_end},
        {"ablation machinery", ablation},
        {"stage-2 geometry", stage2_geometry},
        {"attention diagnostics", attention_diagnostics},
        {"engineering contracts", engineering_contracts},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
