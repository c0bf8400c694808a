#include "cstransfer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cstransfer/errors.hpp"
#include "cstransfer/synth_world.hpp"

namespace cstransfer {

std::size_t EvalReport::correct() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) n += predictions[i] == gold[i] ? 1 : 0;
    return n;
}

double rounded_accuracy(std::size_t correct, std::size_t count) {
    if (count == 0) throw DataError("accuracy of an empty dataset");
    const auto tenths = std::llround(1000.0 * static_cast<double>(correct) / static_cast<double>(count));
    return static_cast<double>(tenths) / 10.0;
}

namespace {

void require_known_words(const Vocab& vocab, std::span<const Example> dataset) {
    const auto check = [&](const Example& ex, const std::string& text) {
        for (const auto& w : split_whitespace(text)) {
            if (!vocab.contains(w)) {
                throw DataError("vocabulary mismatch: item '" + ex.id + "' uses '" + w +
                                "', which the checkpoint does not know");
            }
        }
    };
    for (const auto& ex : dataset) {
        check(ex, ex.question);
        for (const auto& c : ex.choices) check(ex, c);
    }
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

LanguageOutputs forward_one(const Checkpoint& cp, const Example& ex, InputFormat format) {
    const Example* items[] = {&ex};
    return forward_items(cp.model, items, cp.vocab, format);
}

}  // namespace

EvalReport evaluate(const Checkpoint& cp, std::span<const Example> dataset, InputMode mode, InputFormat format,
                    const std::string& dataset_id) {
    if (dataset.empty()) throw DataError("dataset '" + dataset_id + "' is empty");
    require_known_words(cp.vocab, dataset);
    EvalReport r;
    r.dataset = dataset_id;
    r.language = dataset.front().lang;
    r.mode = mode;
    r.count = dataset.size();
    r.predictions = predict_items(cp.model, dataset, cp.vocab, format, mode);
    for (const auto& ex : dataset) r.gold.push_back(ex.gold);
    r.accuracy = rounded_accuracy(r.correct(), r.count);
    return r;
}

std::vector<TokenGates> choice_gates(const Checkpoint& cp, const Example& example, InputFormat format) {
    NoGradGuard no_grad;
    const auto seqs = encode_choices(example, cp.vocab, cp.model.encoder.config.max_len, format);
    const auto out = forward_one(cp, example, format);
    const auto gates = out.head.gates.values();
    std::vector<TokenGates> result;
    std::size_t offset = 0;
    for (const auto& s : seqs) {
        TokenGates tg;
        tg.tokens = active_tokens(s, cp.vocab);
        tg.gates.assign(gates.begin() + static_cast<std::ptrdiff_t>(offset),
                        gates.begin() + static_cast<std::ptrdiff_t>(offset + tg.tokens.size()));
        offset += tg.tokens.size();
        result.push_back(std::move(tg));
    }
    return result;
}

std::vector<std::filesystem::path> export_heatmap(const Checkpoint& cp, const Example& example,
                                                  const std::filesystem::path& out_dir, InputFormat format) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create heatmap directory " + out_dir.string() + ": " + ec.message());
    const auto all = choice_gates(cp, example, format);
    std::vector<std::filesystem::path> paths;
    char buf[32];
    for (std::size_t j = 0; j < all.size(); ++j) {
        const auto path = out_dir / (example.id + "_choice" + std::to_string(j) + ".csv");
        std::ofstream out(path);
        if (!out) throw DataError("cannot write heatmap " + path.string());
        for (std::size_t t = 0; t < all[j].tokens.size(); ++t) out << (t ? "," : "") << csv_field(all[j].tokens[t]);
        out << '\n';
        for (std::size_t t = 0; t < all[j].gates.size(); ++t) {
            std::snprintf(buf, sizeof buf, "%.17g", all[j].gates[t]);
            out << (t ? "," : "") << buf;
        }
        out << '\n';
        if (!out) throw DataError("failed writing heatmap " + path.string());
        paths.push_back(path);
    }
    return paths;
}

std::string format_delta(double delta) {
    const auto tenths = std::llround(delta * 10.0);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld.%lld", std::llabs(tenths) / 10, std::llabs(tenths) % 10);
    return std::string(tenths < 0 ? "(−" : "(+") + buf + ")";
}

AblationTable report_ablation(std::span<const std::string> labels, std::span<const EvalReport> reports,
                              const std::string& baseline) {
    if (labels.size() != reports.size()) throw ConfigError("report_ablation: one label per report is required");
    const auto it = std::find(labels.begin(), labels.end(), baseline);
    if (it == labels.end()) throw ConfigError("report_ablation: baseline '" + baseline + "' is not among the rows");
    const auto base_tenths = std::llround(reports[static_cast<std::size_t>(it - labels.begin())].accuracy * 10.0);
    AblationTable t;
    t.baseline = baseline;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto tenths = std::llround(reports[i].accuracy * 10.0);
        t.rows.push_back({labels[i], static_cast<double>(tenths) / 10.0,
                          static_cast<double>(tenths - base_tenths) / 10.0});
    }
    return t;
}

std::string AblationTable::to_markdown(const std::string& title) const {
    std::string out = "| Model | " + title + " |\n|---|---|\n";
    char buf[32];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.1f", r.accuracy);
        out += "| " + r.label + " | " + buf + " " + format_delta(r.delta) + " |\n";
    }
    return out;
}

EmbeddingGeometry embedding_geometry(const Checkpoint& cp, std::span<const ParallelPair> pairs, InputFormat format) {
    if (pairs.empty()) throw DataError("embedding_geometry: no pairs");
    NoGradGuard no_grad;
    EmbeddingGeometry g;
    double gold_total = 0.0, hinge_total = 0.0;
    std::size_t hinge_count = 0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
        std::vector<const Example*> src, tgt;
        std::vector<std::size_t> gold;
        for (std::size_t i = start; i < std::min(pairs.size(), start + kChunk); ++i) {
            pairs[i].validate();
            src.push_back(&pairs[i].source);
            tgt.push_back(&pairs[i].target);
            gold.push_back(pairs[i].source.gold);
        }
        const auto xs = forward_items(cp.model, src, cp.vocab, format).head.X;
        const auto xt = forward_items(cp.model, tgt, cp.vocab, format).head.X;
        const std::size_t c = src.front()->choices.size();
        for (std::size_t i = 0; i < gold.size(); ++i) {
            const std::size_t g_row[] = {i * c + gold[i]};
            gold_total += cosine_rows(gather_rows(xs, g_row), gather_rows(xt, g_row)).at(0);
            for (const Tensor* X : {&xs, &xt}) {
                for (std::size_t j = 0; j < c; ++j) {
                    if (j == gold[i]) continue;
                    const std::size_t o_row[] = {i * c + j};
                    hinge_total += std::max(0.0, cosine_rows(gather_rows(*X, g_row), gather_rows(*X, o_row)).at(0));
                    ++hinge_count;
                }
            }
        }
        g.items += gold.size();
    }
    g.mean_gold_cosine = gold_total / static_cast<double>(g.items);
    g.mean_hinge = hinge_count ? hinge_total / static_cast<double>(hinge_count) : 0.0;
    return g;
}

GateContrast gate_contrast(const Checkpoint& cp, std::span<const Example> items, InputFormat format) {
    GateContrast c;
    double concept_total = 0.0, filler_total = 0.0;
    for (const auto& ex : items) {
        for (const auto& tg : choice_gates(cp, ex, format)) {
            for (std::size_t t = 0; t < tg.tokens.size(); ++t) {
                if (SynthWorld::concept_of(tg.tokens[t])) {
                    concept_total += tg.gates[t];
                    ++c.concept_tokens;
                } else if (SynthWorld::is_filler(tg.tokens[t])) {
                    filler_total += tg.gates[t];
                    ++c.filler_tokens;
                }
            }
        }
        ++c.items;
    }
    if (c.concept_tokens == 0 || c.filler_tokens == 0) {
        throw DataError("gate_contrast: items contain no synthetic concept or filler tokens");
    }
    c.concept_mean = concept_total / static_cast<double>(c.concept_tokens);
    c.filler_mean = filler_total / static_cast<double>(c.filler_tokens);
    return c;
}

}  // namespace cstransfer
