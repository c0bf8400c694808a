#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cstransfer/encoder.hpp"
#include "cstransfer/errors.hpp"
#include "cstransfer/grad_check.hpp"
#include "test_util.hpp"

namespace cstransfer {
namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.vocab_size = 12;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 12;
    c.max_len = 10;
    c.seed = 3;
    return c;
}

TokenSequence seq(std::vector<TokenId> content, std::size_t max_len) {
    TokenSequence s;
    s.ids.push_back(special::kCls);
    s.ids.insert(s.ids.end(), content.begin(), content.end());
    s.ids.push_back(special::kSep);
    s.segments.assign(s.ids.size(), Segment::Question);
    s.segments.front() = s.segments.back() = Segment::Special;
    s.ids.resize(max_len, special::kPad);
    s.segments.resize(max_len, Segment::Pad);
    return s;
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TEST(EncoderInit, SameSeedIsBitIdentical) {
    const auto a = init_encoder(tiny_config()).parameters();
    const auto b = init_encoder(tiny_config()).parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(values_of(a[i].second), values_of(b[i].second)) << a[i].first;
    }
}

TEST(EncoderInit, DifferentSeedsDiffer) {
    auto c = tiny_config();
    c.seed = 4;
    EXPECT_NE(values_of(init_encoder(tiny_config()).token_embedding), values_of(init_encoder(c).token_embedding));
}

TEST(EncoderInit, LayerNormGainsAreOneAndWeightsWithinBound) {
    const auto w = init_encoder(tiny_config());
    const double bound = 1.0 / std::sqrt(8.0);
    for (const auto& [name, t] : w.parameters()) {
        for (double v : t.values()) {
            if (name.find("gain") != std::string::npos) {
                EXPECT_EQ(v, 1.0) << name;
            } else if (name.find("bias") != std::string::npos || name.find(".b_") != std::string::npos) {
                EXPECT_EQ(v, 0.0) << name;
            } else {
                EXPECT_LE(std::abs(v), bound) << name;
            }
        }
    }
}

TEST(EncoderInit, RejectsInvalidConfigs) {
    auto c = tiny_config();
    c.n_heads = 3;
    EXPECT_THROW(init_encoder(c), ConfigError);
    c = tiny_config();
    c.dropout_rate = 0.1;
    EXPECT_THROW(init_encoder(c), ConfigError);
    c = tiny_config();
    c.vocab_size = 0;
    EXPECT_THROW(init_encoder(c), ConfigError);
}

TEST(Encode, OutputHasOneRowPerActiveToken) {
    const auto w = init_encoder(tiny_config());
    const auto o = encode(w, seq({5, 6, 7}, 10));
    EXPECT_EQ(o.shape(), (Shape{5, 8}));
}

TEST(Encode, RejectsOutOfRangeIdsAndOverlongSequences) {
    const auto w = init_encoder(tiny_config());
    EXPECT_THROW(encode(w, seq({5, 12}, 10)), DataError);
    EXPECT_THROW(encode(w, seq({5, 5, 5, 5, 5, 5, 5, 5, 5}, 11)), DataError);
}

TEST(Encode, AppendingPaddingLeavesStatesUnchanged) {
    const auto w = init_encoder(tiny_config());
    const auto a = encode(w, seq({5, 6, 7}, 5));
    const auto b = encode(w, seq({5, 6, 7}, 10));
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-10);
}

TEST(Encode, FinalLayerNormStatistics) {
    auto c = tiny_config();
    c.d_model = 16;
    c.n_heads = 4;
    const auto w = init_encoder(c);
    const auto o = encode(w, seq({5, 6, 7, 8, 9, 10}, 10));
    for (std::size_t r = 0; r < o.dim(0); ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 16; ++j) mean += o.at(r, j);
        mean /= 16.0;
        for (std::size_t j = 0; j < 16; ++j) var += (o.at(r, j) - mean) * (o.at(r, j) - mean);
        var /= 16.0;
        EXPECT_NEAR(mean, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-6);
    }
}

TEST(Encode, BatchSizeIndependent) {
    const auto w = init_encoder(tiny_config());
    const std::vector<TokenSequence> batch{seq({5, 6}, 10), seq({7, 8, 9, 10}, 10), seq({11}, 10)};
    const auto packed = encode_packed(w, pack_sequences(batch));
    std::size_t row = 0;
    for (const auto& s : batch) {
        const auto alone = encode(w, s);
        for (std::size_t r = 0; r < alone.dim(0); ++r, ++row) {
            for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(alone.at(r, j), packed.at(row, j), 1e-10);
        }
    }
    EXPECT_EQ(row, packed.dim(0));
}

TEST(Encode, IsDeterministic) {
    const auto w = init_encoder(tiny_config());
    EXPECT_EQ(values_of(encode(w, seq({5, 6, 9}, 10))), values_of(encode(w, seq({5, 6, 9}, 10))));
}

TEST(Encode, GradientsOfEveryWeightMatchFiniteDifferences) {
    const auto w = init_encoder(tiny_config());
    std::mt19937_64 rng(9);
    const std::vector<TokenSequence> batch{seq({5, 6, 7}, 10), seq({8, 5}, 10)};
    const auto packed = pack_sequences(batch);
    const Tensor readout = testing::random_tensor(rng, {packed.total_tokens(), 8}, -1, 1, false);
    std::vector<Tensor> params;
    for (auto& [name, t] : w.parameters()) params.push_back(t);
    const double err = grad_check([&] { return sum(encode_packed(w, packed) * readout); }, params);
    EXPECT_LT(err, 1e-4);
}

}  // namespace
}  // namespace cstransfer
