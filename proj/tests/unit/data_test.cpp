#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "cstransfer/dataset.hpp"
#include "cstransfer/errors.hpp"
#include "cstransfer/rng.hpp"
#include "cstransfer/sequence.hpp"
#include "cstransfer/synth_world.hpp"

namespace cstransfer {
namespace {

namespace fs = std::filesystem;

Vocab small_vocab() {
    const std::vector<std::string> words{"a", "b", "x", "y"};
    return Vocab::from_tokens(words);
}

fs::path temp_file(const std::string& name, const std::string& contents) {
    auto dir = fs::temp_directory_path() / "cstransfer_data_test";
    fs::create_directories(dir);
    auto path = dir / name;
    std::ofstream(path, std::ios::binary) << contents;
    return path;
}

TEST(Vocab, ReservedIdsAreFixed) {
    Vocab v;
    EXPECT_EQ(v.size(), special::kCount);
    EXPECT_EQ(v.id("[PAD]"), special::kPad);
    EXPECT_EQ(v.id("[CLS]"), special::kCls);
    EXPECT_EQ(v.id("[SEP]"), special::kSep);
    EXPECT_EQ(v.id("[CLS_Q]"), special::kClsQ);
    EXPECT_EQ(v.id("[UNK]"), special::kUnk);
    EXPECT_EQ(v.id("never-seen"), special::kUnk);
}

TEST(Vocab, IdsAreDenseAndFileRoundTrips) {
    auto v = small_vocab();
    EXPECT_EQ(v.id("a"), 5);
    EXPECT_EQ(v.id("y"), 8);
    EXPECT_EQ(v.add("a"), 5);
    auto path = temp_file("vocab.txt", "");
    v.save(path);
    EXPECT_EQ(Vocab::load(path), v);
}

TEST(Vocab, LoadRejectsMissingReservedBlockAndDuplicates) {
    EXPECT_THROW(Vocab::load(temp_file("bad1.txt", "hello\n")), DataError);
    EXPECT_THROW(Vocab::load(temp_file("bad2.txt", "[PAD]\n[CLS]\n[SEP]\n[CLS_Q]\n[UNK]\nq\nq\n")), DataError);
    EXPECT_THROW(Vocab::load("/nonexistent/vocab.txt"), DataError);
}

TEST(Encoding, StatementConstruction) {
    auto v = small_vocab();
    auto s = encode_statement("a b", v, 8);
    ASSERT_EQ(s.ids.size(), 8u);
    EXPECT_EQ((std::vector<TokenId>(s.ids.begin(), s.ids.begin() + 4)),
              (std::vector<TokenId>{special::kCls, v.id("a"), v.id("b"), special::kSep}));
    EXPECT_EQ(s.active_length(), 4u);
    for (std::size_t i = 4; i < 8; ++i) {
        EXPECT_EQ(s.ids[i], special::kPad);
        EXPECT_TRUE(s.pad_mask()[i]);
    }
}

TEST(Encoding, UnknownWordMapsToUnk) {
    auto s = encode_statement("a zzz", small_vocab(), 6);
    EXPECT_EQ(s.ids[2], special::kUnk);
}

TEST(Encoding, StatementTruncationKeepsSep) {
    auto s = encode_statement("a b x y a b", small_vocab(), 5);
    EXPECT_EQ(s.ids.size(), 5u);
    EXPECT_EQ(s.ids.front(), special::kCls);
    EXPECT_EQ(s.ids.back(), special::kSep);
    EXPECT_EQ(s.active_length(), 5u);
}

TEST(Encoding, StatementErrors) {
    EXPECT_THROW(encode_statement("   ", small_vocab(), 8), DataError);
}

TEST(Encoding, QaConstruction) {
    auto v = small_vocab();
    auto s = encode_qa("x", "y", v, 6);
    EXPECT_EQ(s.ids, (std::vector<TokenId>{special::kCls, v.id("x"), special::kSep, special::kClsQ, v.id("y"),
                                           special::kSep}));
    const auto [first, last] = s.answer_span();
    EXPECT_EQ(first, 4u);
    EXPECT_EQ(last, 5u);
}

TEST(Encoding, QaWithEmptyQuestion) {
    auto v = small_vocab();
    auto s = encode_qa("", "a b", v, 8);
    EXPECT_EQ((std::vector<TokenId>(s.ids.begin(), s.ids.begin() + 6)),
              (std::vector<TokenId>{special::kCls, special::kSep, special::kClsQ, v.id("a"), v.id("b"),
                                    special::kSep}));
}

TEST(Encoding, QaAnswerSpanMarksExactlyTokensBetweenClsQAndFinalSep) {
    auto v = small_vocab();
    auto s = encode_qa("a b x", "y a", v, 12);
    const auto [first, last] = s.answer_span();
    EXPECT_EQ(s.ids[first - 1], special::kClsQ);
    EXPECT_EQ(s.ids[last], special::kSep);
    EXPECT_EQ(last, s.active_length() - 1);
    std::size_t clsq = 0;
    for (auto id : s.ids) clsq += id == special::kClsQ ? 1 : 0;
    EXPECT_EQ(clsq, 1u);
}

TEST(Encoding, QaTruncatesQuestionBeforeAnswer) {
    auto v = small_vocab();
    auto s = encode_qa("a b x y", "y", v, 7);
    EXPECT_EQ(s.active_length(), 7u);
    EXPECT_EQ(decode(s, v), (std::vector<std::string>{"a", "b", "y"}));
    EXPECT_THROW(encode_qa("a", "b", v, 4), DataError);
}

TEST(Encoding, DecodeRecoversTokensModuloUnk) {
    auto v = small_vocab();
    Rng rng(17);
    const std::vector<std::string> pool{"a", "b", "x", "y", "zz", "qq"};
    for (int t = 0; t < 200; ++t) {
        std::vector<std::string> words;
        const std::size_t n = 1 + rng.index(6);
        std::string text;
        for (std::size_t i = 0; i < n; ++i) {
            words.push_back(pool[rng.index(pool.size())]);
            text += (i ? " " : "") + words.back();
        }
        const auto back = decode(encode_statement(text, v, 16), v);
        ASSERT_EQ(back.size(), words.size());
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(back[i], v.contains(words[i]) ? words[i] : "[UNK]");
        }
    }
}

TEST(Jsonl, ParsesValidLines) {
    auto path = temp_file("ok.jsonl",
                          R"({"id":"q1","lang":"EN","question":"where","choices":["a","b","c","d","e"],"label":2})"
                          "\n"
                          R"({"id":"q2","lang":"EN","question":"","choices":["a","b","c","d","e"],"label":0})"
                          "\n");
    auto ex = load_jsonl(path, {5});
    ASSERT_EQ(ex.size(), 2u);
    EXPECT_EQ(ex[0].id, "q1");
    EXPECT_EQ(ex[0].gold, 2u);
    EXPECT_EQ(ex[0].choices.size(), 5u);
    EXPECT_EQ(ex[1].question, "");
}

TEST(Jsonl, LabelOutOfRangeNamesTheLine) {
    auto path = temp_file("bad_label.jsonl",
                          R"({"id":"q1","lang":"EN","question":"w","choices":["a","b","c","d","e"],"label":1})"
                          "\n"
                          R"({"id":"q2","lang":"EN","question":"w","choices":["a","b","c","d","e"],"label":7})"
                          "\n");
    try {
        load_jsonl(path);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("bad_label.jsonl:2"), std::string::npos) << e.what();
    }
}

TEST(Jsonl, RejectsMalformedAndInconsistentLines) {
    EXPECT_THROW(parse_jsonl("{not json}\n", "mem"), DataError);
    EXPECT_THROW(parse_jsonl(R"({"id":"a","lang":"EN","question":"q","choices":["x"],"label":0})"
                             "\n",
                             "mem"),
                 DataError);
    EXPECT_THROW(parse_jsonl(R"({"id":"a","lang":"EN","question":"q","choices":["x","y","z"],"label":0})"
                             "\n",
                             "mem", {2}),
                 DataError);
    EXPECT_THROW(parse_jsonl(R"({"id":"a","lang":"EN","choices":["x","y"],"label":0})"
                             "\n",
                             "mem"),
                 DataError);
    EXPECT_THROW(parse_jsonl("\n", "mem"), DataError);
    EXPECT_THROW(load_jsonl("/nonexistent/file.jsonl"), DataError);
}

TEST(Jsonl, PairingByIdJoinsAndReportsMissingCounterparts) {
    Example a{"1", "EN", "q", {"x", "y"}, 1};
    Example b{"2", "EN", "q", {"x", "y"}, 0};
    Example a2{"1", "DE", "q", {"x2", "y2"}, 1};
    Example b2{"2", "DE", "q", {"x2", "y2"}, 0};
    std::vector<Example> src{a, b}, tgt{b2, a2};
    auto pairs = pair_by_id(src, tgt);
    ASSERT_EQ(pairs.size(), 2u);
    EXPECT_EQ(pairs[0].target.lang, "DE");
    EXPECT_EQ(pairs[0].target.id, "1");
    std::vector<Example> short_tgt{a2};
    EXPECT_THROW(pair_by_id(src, short_tgt), DataError);
    Example wrong_gold = b2;
    wrong_gold.gold = 1;
    std::vector<Example> bad_tgt{a2, wrong_gold};
    EXPECT_THROW(pair_by_id(src, bad_tgt), DataError);
}

TEST(Jsonl, SaveLoadPreservesOrder) {
    auto world = generate_synthetic_world({.n_concepts = 12, .train_size = 20, .dev_size = 5, .test_size = 5,
                                           .parallel_size = 5});
    auto src = source_side(world.train);
    auto path = temp_file("train_en.jsonl", "");
    save_jsonl(path, src);
    EXPECT_EQ(load_jsonl(path), src);
}

SynthWorldConfig small_world() {
    SynthWorldConfig c;
    c.n_concepts = 30;
    c.train_size = 300;
    c.dev_size = 600;
    c.test_size = 100;
    c.parallel_size = 50;
    c.seed = 123;
    return c;
}

TEST(SynthWorld, ConfigValidation) {
    auto c = small_world();
    c.relation_density = 1.0;
    EXPECT_THROW(generate_synthetic_world(c), ConfigError);
    c = small_world();
    c.train_size = 0;
    EXPECT_THROW(generate_synthetic_world(c), ConfigError);
    c = small_world();
    c.n_filler_tokens = 3;
    EXPECT_THROW(generate_synthetic_world(c), ConfigError);
}

TEST(SynthWorld, DeterministicUnderSeed) {
    auto a = generate_synthetic_world(small_world());
    auto b = generate_synthetic_world(small_world());
    EXPECT_EQ(to_jsonl(source_side(a.train)), to_jsonl(source_side(b.train)));
    EXPECT_EQ(to_jsonl(target_side(a.dev)), to_jsonl(target_side(b.dev)));
    auto c = small_world();
    c.seed = 124;
    EXPECT_NE(to_jsonl(source_side(generate_synthetic_world(c).train)), to_jsonl(source_side(a.train)));
}

TEST(SynthWorld, EveryConceptHasAPartnerEvenAtLowDensity) {
    auto c = small_world();
    c.relation_density = 0.001;
    auto w = generate_synthetic_world(c);
    for (std::size_t a = 0; a < c.n_concepts; ++a) {
        bool has = false;
        for (std::size_t b = 0; b < c.n_concepts; ++b) has = has || w.related(a, b);
        EXPECT_TRUE(has) << "concept " << a;
    }
}

TEST(SynthWorld, RelationDensityIsNearRequested) {
    auto w = generate_synthetic_world(small_world());
    EXPECT_NEAR(w.realized_density(), 0.2, 0.08);
}

TEST(SynthWorld, ExactlyOneChoiceIsRelatedAndItIsGold) {
    auto w = generate_synthetic_world(small_world());
    for (const auto* split : {&w.train, &w.dev, &w.test, &w.parallel}) {
        for (const auto& pair : *split) {
            for (const auto* ex : {&pair.source, &pair.target}) {
                const auto q = text_concept(ex->question);
                ASSERT_TRUE(q);
                std::size_t related = 0, related_idx = 0;
                for (std::size_t j = 0; j < ex->choices.size(); ++j) {
                    const auto c = text_concept(ex->choices[j]);
                    ASSERT_TRUE(c);
                    if (w.related(*q, *c)) {
                        ++related;
                        related_idx = j;
                    }
                }
                EXPECT_EQ(related, 1u);
                EXPECT_EQ(related_idx, ex->gold);
            }
        }
    }
}

TEST(SynthWorld, ParallelItemsAreAlignedAndFillersAreShared) {
    auto w = generate_synthetic_world(small_world());
    for (const auto& pair : w.train) {
        pair.validate();
        EXPECT_EQ(pair.source.lang, kSourceLang);
        EXPECT_EQ(pair.target.lang, kTargetLang);
        for (std::size_t j = 0; j < pair.source.choices.size(); ++j) {
            EXPECT_EQ(text_concept(pair.source.choices[j]), text_concept(pair.target.choices[j]));
        }
        // Fillers of every choice are the same multiset.
        std::multiset<std::string> first;
        for (const auto& t : split_whitespace(pair.source.choices[0])) {
            if (SynthWorld::is_filler(t)) first.insert(t);
        }
        for (const auto& c : pair.source.choices) {
            std::multiset<std::string> f;
            for (const auto& t : split_whitespace(c)) {
                if (SynthWorld::is_filler(t)) f.insert(t);
            }
            EXPECT_EQ(f, first);
        }
    }
}

TEST(SynthWorld, ShufflingFillersNeverChangesTheOracleLabel) {
    auto w = generate_synthetic_world(small_world());
    Rng rng(5);
    const auto oracle = [&](const std::string& question, const std::vector<std::string>& choices) {
        const auto q = *text_concept(question);
        for (std::size_t j = 0; j < choices.size(); ++j) {
            if (w.related(q, *text_concept(choices[j]))) return j;
        }
        return choices.size();
    };
    for (const auto& pair : w.dev) {
        auto choices = pair.source.choices;
        for (auto& c : choices) {
            auto words = split_whitespace(c);
            for (auto& t : words) {
                if (SynthWorld::is_filler(t)) t = SynthWorld::filler_token("EN", rng.index(w.config.n_filler_tokens));
            }
            rng.shuffle(std::span(words));
            c.clear();
            for (const auto& t : words) c += (c.empty() ? "" : " ") + t;
        }
        EXPECT_EQ(oracle(pair.source.question, choices), pair.source.gold);
    }
}

TEST(SynthWorld, SplitsAreDisjointByQuestionConcept) {
    auto w = generate_synthetic_world(small_world());
    ASSERT_TRUE(w.disjoint_splits);
    std::set<std::size_t> train, dev;
    for (const auto& p : w.train) train.insert(*text_concept(p.source.question));
    for (const auto& p : w.dev) dev.insert(*text_concept(p.source.question));
    for (auto c : dev) EXPECT_FALSE(train.contains(c));
}

TEST(SynthWorld, MajorityClassBaselineIsNearChance) {
    auto w = generate_synthetic_world(small_world());
    std::map<std::size_t, std::size_t> counts;
    for (const auto& p : w.train) ++counts[p.source.gold];
    std::size_t majority = 0;
    for (const auto& [label, n] : counts) {
        if (n > counts[majority]) majority = label;
    }
    std::size_t correct = 0;
    for (const auto& p : w.dev) correct += p.target.gold == majority ? 1 : 0;
    const double acc = 100.0 * static_cast<double>(correct) / static_cast<double>(w.dev.size());
    EXPECT_NEAR(acc, 100.0 / static_cast<double>(w.config.choices_per_item), 3.0);
}

TEST(SynthWorld, VocabCoversEveryGeneratedToken) {
    auto w = generate_synthetic_world(small_world());
    auto v = w.vocab();
    for (const auto& p : w.train) {
        for (const auto* ex : {&p.source, &p.target}) {
            for (const auto& t : split_whitespace(ex->question)) EXPECT_TRUE(v.contains(t)) << t;
            for (const auto& c : ex->choices) {
                for (const auto& t : split_whitespace(c)) EXPECT_TRUE(v.contains(t)) << t;
            }
        }
    }
}

}  // namespace
}  // namespace cstransfer
