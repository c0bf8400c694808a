#include "cstransfer/synth_world.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"

namespace cstransfer {

namespace {

constexpr std::size_t kMaxQuestionFillers = 3;
constexpr std::size_t kMaxChoiceFillers = 2;

std::string lang_prefix(std::string_view lang) {
    std::string p(lang);
    std::transform(p.begin(), p.end(), p.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return p;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

std::size_t choose_category_count(const SynthWorldConfig& c) {
    const double k = static_cast<double>(c.n_concepts);
    const double target_size = c.relation_density * (k - 1.0) + 1.0;
    const auto wanted = static_cast<std::size_t>(std::llround(k / target_size));
    // Density too low would leave singleton categories (concepts without a
    // partner); capping the count at K/2 regenerates a partner for each.
    return std::clamp<std::size_t>(wanted, 2, c.n_concepts / 2);
}

struct ItemDraft {
    std::size_t question_concept;
    std::vector<std::size_t> choice_concepts;
    std::size_t gold;
    std::vector<std::size_t> question_fillers;
    std::size_t concept_slot;  // position of the concept among question words
    std::vector<std::size_t> choice_fillers;
    std::vector<std::size_t> target_order;  // word permutation inside target-language choices
};

}  // namespace

void SynthWorldConfig::validate() const {
    if (n_concepts < 4) throw ConfigError("n_concepts must be at least 4");
    if (n_filler_tokens < kMaxQuestionFillers + kMaxChoiceFillers) {
        throw ConfigError("n_filler_tokens must be at least " +
                          std::to_string(kMaxQuestionFillers + kMaxChoiceFillers));
    }
    if (!(relation_density > 0.0 && relation_density < 1.0)) {
        throw ConfigError("relation_density must lie in the open interval (0, 1)");
    }
    if (choices_per_item < 2) throw ConfigError("choices_per_item must be at least 2");
    if (train_size == 0 || dev_size == 0 || test_size == 0 || parallel_size == 0) {
        throw ConfigError("dataset sizes must be positive");
    }
}

bool SynthWorld::related(std::size_t a, std::size_t b) const { return a != b && category.at(a) == category.at(b); }

double SynthWorld::realized_density() const {
    const std::size_t k = category.size();
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) pairs += related(a, b) ? 1 : 0;
    }
    return static_cast<double>(pairs) / static_cast<double>(k * (k - 1));
}

std::string SynthWorld::concept_token(std::string_view lang, std::size_t concept_id) {
    return lang_prefix(lang) + "_c" + std::to_string(concept_id);
}

std::string SynthWorld::filler_token(std::string_view lang, std::size_t filler_id) {
    return lang_prefix(lang) + "_f" + std::to_string(filler_id);
}

std::optional<std::size_t> SynthWorld::concept_of(std::string_view token) {
    const auto pos = token.find("_c");
    if (pos == std::string_view::npos || pos + 2 >= token.size()) return std::nullopt;
    std::size_t value = 0;
    const char* first = token.data() + pos + 2;
    const char* last = token.data() + token.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) return std::nullopt;
    return value;
}

bool SynthWorld::is_filler(std::string_view token) {
    const auto pos = token.find("_f");
    return pos != std::string_view::npos && pos + 2 < token.size() &&
           std::all_of(token.begin() + static_cast<std::ptrdiff_t>(pos + 2), token.end(),
                       [](char c) { return c >= '0' && c <= '9'; });
}

Vocab SynthWorld::vocab() const {
    Vocab v;
    for (const char* lang : {kSourceLang, kTargetLang}) {
        for (std::size_t c = 0; c < config.n_concepts; ++c) v.add(concept_token(lang, c));
        for (std::size_t f = 0; f < config.n_filler_tokens; ++f) v.add(filler_token(lang, f));
    }
    return v;
}

std::optional<std::size_t> text_concept(std::string_view text) {
    for (const auto& w : split_whitespace(text)) {
        if (auto c = SynthWorld::concept_of(w)) return c;
    }
    return std::nullopt;
}

namespace {

std::vector<std::size_t> draw_distinct(Rng& rng, std::size_t universe, std::size_t count) {
    std::vector<std::size_t> all(universe);
    std::iota(all.begin(), all.end(), std::size_t{0});
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(all[i], all[i + rng.index(universe - i)]);
    }
    all.resize(count);
    return all;
}

ItemDraft draft_item(const SynthWorld& w, Rng& rng, const std::vector<std::size_t>& pool) {
    const auto& cfg = w.config;
    ItemDraft d;
    d.question_concept = pool[rng.index(pool.size())];
    std::vector<std::size_t> partners, strangers;
    for (std::size_t c = 0; c < cfg.n_concepts; ++c) {
        if (w.related(d.question_concept, c)) {
            partners.push_back(c);
        } else if (c != d.question_concept) {
            strangers.push_back(c);
        }
    }
    const std::size_t n_choices = cfg.choices_per_item;
    d.gold = rng.index(n_choices);
    const std::size_t gold_concept = partners[rng.index(partners.size())];
    const auto picks = draw_distinct(rng, strangers.size(), n_choices - 1);
    std::size_t next = 0;
    for (std::size_t j = 0; j < n_choices; ++j) {
        d.choice_concepts.push_back(j == d.gold ? gold_concept : strangers[picks[next++]]);
    }
    const std::size_t n_qf = 1 + rng.index(kMaxQuestionFillers);
    const std::size_t n_cf = 1 + rng.index(kMaxChoiceFillers);
    auto fillers = draw_distinct(rng, cfg.n_filler_tokens, n_qf + n_cf);
    d.question_fillers.assign(fillers.begin(), fillers.begin() + static_cast<std::ptrdiff_t>(n_qf));
    d.choice_fillers.assign(fillers.begin() + static_cast<std::ptrdiff_t>(n_qf), fillers.end());
    d.concept_slot = rng.index(n_qf + 1);
    d.target_order.resize(n_cf + 1);
    std::iota(d.target_order.begin(), d.target_order.end(), std::size_t{0});
    rng.shuffle(std::span(d.target_order));
    return d;
}

Example render(const ItemDraft& d, const std::string& id, const char* lang, bool permute_choices) {
    Example ex;
    ex.id = id;
    ex.lang = lang;
    ex.gold = d.gold;
    std::vector<std::string> q;
    for (auto f : d.question_fillers) q.push_back(SynthWorld::filler_token(lang, f));
    q.insert(q.begin() + static_cast<std::ptrdiff_t>(d.concept_slot), SynthWorld::concept_token(lang, d.question_concept));
    ex.question = join(q);
    for (auto c : d.choice_concepts) {
        std::vector<std::string> words{SynthWorld::concept_token(lang, c)};
        for (auto f : d.choice_fillers) words.push_back(SynthWorld::filler_token(lang, f));
        if (permute_choices) {
            std::vector<std::string> permuted;
            for (auto i : d.target_order) permuted.push_back(words[i]);
            words = std::move(permuted);
        }
        ex.choices.push_back(join(words));
    }
    return ex;
}

std::vector<ParallelPair> make_split(const SynthWorld& w, std::uint64_t stream, const std::string& prefix,
                                     std::size_t count, const std::vector<std::size_t>& pool) {
    Rng rng(derive_seed(w.config.seed, stream));
    std::vector<ParallelPair> out;
    out.reserve(count);
    const int width = static_cast<int>(std::to_string(count).size());
    for (std::size_t i = 0; i < count; ++i) {
        auto digits = std::to_string(i);
        const std::string id = prefix + "-" + std::string(static_cast<std::size_t>(width) - digits.size(), '0') + digits;
        const auto d = draft_item(w, rng, pool);
        out.push_back({render(d, id, kSourceLang, false), render(d, id, kTargetLang, true)});
    }
    return out;
}

}  // namespace

SynthWorld generate_synthetic_world(const SynthWorldConfig& config) {
    config.validate();
    SynthWorld w;
    w.config = config;
    const std::size_t k = config.n_concepts;

    Rng rng(derive_seed(config.seed, 1));
    w.n_categories = choose_category_count(config);
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));
    w.category.assign(k, 0);
    std::vector<std::vector<std::size_t>> members(w.n_categories);
    for (std::size_t i = 0; i < k; ++i) {
        w.category[order[i]] = i % w.n_categories;
        members[i % w.n_categories].push_back(order[i]);
    }
    const std::size_t largest = (k + w.n_categories - 1) / w.n_categories;
    if (k - largest < config.choices_per_item - 1) {
        throw ConfigError("relation_density too high: not enough unrelated concepts for " +
                          std::to_string(config.choices_per_item - 1) + " distractors");
    }

    // Question-concept pools. Held-out pools take concepts round-robin over
    // categories and never take the last training concept of a category.
    const double total = static_cast<double>(config.train_size + config.dev_size + config.test_size);
    const auto quota = [&](std::size_t n) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(k) * n / total)));
    };
    const std::size_t n_dev = quota(config.dev_size), n_test = quota(config.test_size);
    w.disjoint_splits = k >= 10 && k >= n_dev + n_test + w.n_categories;
    if (w.disjoint_splits) {
        std::vector<std::size_t> interleaved;
        for (std::size_t round = 0; interleaved.size() < k; ++round) {
            for (const auto& m : members) {
                if (round < m.size()) interleaved.push_back(m[round]);
            }
        }
        std::vector<std::size_t> remaining(w.n_categories);
        for (std::size_t c = 0; c < w.n_categories; ++c) remaining[c] = members[c].size();
        for (auto c : interleaved) {
            auto& cat_left = remaining[w.category[c]];
            if (w.dev_concepts.size() < n_dev && cat_left > 1) {
                w.dev_concepts.push_back(c);
                --cat_left;
            } else if (w.test_concepts.size() < n_test && cat_left > 1) {
                w.test_concepts.push_back(c);
                --cat_left;
            } else {
                w.train_concepts.push_back(c);
            }
        }
        std::sort(w.train_concepts.begin(), w.train_concepts.end());
        std::sort(w.dev_concepts.begin(), w.dev_concepts.end());
        std::sort(w.test_concepts.begin(), w.test_concepts.end());
    } else {
        w.train_concepts.resize(k);
        std::iota(w.train_concepts.begin(), w.train_concepts.end(), std::size_t{0});
        w.dev_concepts = w.test_concepts = w.train_concepts;
    }

    w.train = make_split(w, 2, "train", config.train_size, w.train_concepts);
    w.dev = make_split(w, 3, "dev", config.dev_size, w.dev_concepts);
    w.test = make_split(w, 4, "test", config.test_size, w.test_concepts);
    w.parallel = make_split(w, 5, "par", config.parallel_size, w.train_concepts);
    return w;
}

std::vector<Example> source_side(const std::vector<ParallelPair>& pairs) {
    std::vector<Example> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.source);
    return out;
}

std::vector<Example> target_side(const std::vector<ParallelPair>& pairs) {
    std::vector<Example> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.target);
    return out;
}

}  // namespace cstransfer
