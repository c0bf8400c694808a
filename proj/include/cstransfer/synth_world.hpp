#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cstransfer/dataset.hpp"
#include "cstransfer/vocab.hpp"

namespace cstransfer {

struct SynthWorldConfig {
    std::size_t n_concepts = 40;
    std::size_t n_filler_tokens = 24;
    double relation_density = 0.2;
    std::size_t choices_per_item = 5;
    std::size_t train_size = 2000;
    std::size_t dev_size = 500;
    std::size_t test_size = 500;
    std::size_t parallel_size = 1000;
    std::uint64_t seed = 7;

    // Throws ConfigError.
    void validate() const;
    bool operator==(const SynthWorldConfig&) const = default;
};

// A bilingual commonsense world with known ground truth.
//
// Concepts are dealt into latent categories; two distinct concepts are
// related exactly when they share a category. Every item asks about one
// concept; the gold choice names a related concept and each distractor an
// unrelated one. All choices of an item share the same filler words, so
// fillers never carry label information. Each item exists in both
// languages with aligned choices; the target language also permutes the
// word order inside choices.
struct SynthWorld {
    SynthWorldConfig config;
    std::vector<std::size_t> category;  // latent category of each concept
    std::size_t n_categories = 0;
    bool disjoint_splits = false;
    std::vector<std::size_t> train_concepts, dev_concepts, test_concepts;

    std::vector<ParallelPair> train, dev, test, parallel;

    bool related(std::size_t a, std::size_t b) const;
    double realized_density() const;
    Vocab vocab() const;

    static std::string concept_token(std::string_view lang, std::size_t concept_id);
    static std::string filler_token(std::string_view lang, std::size_t filler_id);
    // Concept id named by a token such as "en_c12" or "de_c3".
    static std::optional<std::size_t> concept_of(std::string_view token);
    static bool is_filler(std::string_view token);
};

SynthWorld generate_synthetic_world(const SynthWorldConfig& config);

std::vector<Example> source_side(const std::vector<ParallelPair>& pairs);
std::vector<Example> target_side(const std::vector<ParallelPair>& pairs);

// Concept named by one piece of synthetic text (question or choice).
std::optional<std::size_t> text_concept(std::string_view text);

}  // namespace cstransfer
