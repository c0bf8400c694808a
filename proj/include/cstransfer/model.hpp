#pragma once

#include <span>
#include <vector>

#include "cstransfer/dataset.hpp"
#include "cstransfer/encoder.hpp"
#include "cstransfer/head.hpp"
#include "cstransfer/sequence.hpp"
#include "cstransfer/vocab.hpp"

namespace cstransfer {

// Statement: question and choice joined into one utterance.
// QA: question, then the choice as a [CLS_Q]-marked answer span.
enum class InputFormat { Statement, QA };

// One sequence per choice.
std::vector<TokenSequence> encode_choices(const Example& example, const Vocab& vocab, std::size_t max_len,
                                          InputFormat format);

struct Model {
    EncoderWeights encoder;
    HeadWeights head;

    NamedTensors parameters() const;
    // Copies hold shared tensor handles; clone() gives independent weights.
    Model clone() const;
};

// The head reads d_model from the encoder config.
Model init_model(const EncoderConfig& encoder, HeadConfig head);

// Forward pass over a batch of items that all have the same choice count.
// Logits are item-major and read the embedding chosen by `mode`.
LanguageOutputs forward_items(const Model& model, std::span<const Example* const> items, const Vocab& vocab,
                              InputFormat format, InputMode mode = InputMode::Commonsense);

// Predicted choice per item, evaluated in chunks without recording a graph.
std::vector<std::size_t> predict_items(const Model& model, std::span<const Example> items, const Vocab& vocab,
                                       InputFormat format, InputMode mode, std::size_t chunk = 64);

}  // namespace cstransfer
