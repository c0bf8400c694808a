#include "cstransfer/model.hpp"

#include <algorithm>

#include "cstransfer/errors.hpp"

namespace cstransfer {

std::vector<TokenSequence> encode_choices(const Example& example, const Vocab& vocab, std::size_t max_len,
                                          InputFormat format) {
    std::vector<TokenSequence> out;
    out.reserve(example.choices.size());
    for (const auto& choice : example.choices) {
        if (format == InputFormat::QA) {
            out.push_back(encode_qa(example.question, choice, vocab, max_len));
        } else {
            const std::string text = example.question.empty() ? choice : example.question + " " + choice;
            out.push_back(encode_statement(text, vocab, max_len));
        }
    }
    return out;
}

NamedTensors Model::parameters() const {
    auto out = encoder.parameters();
    for (auto& p : head.parameters()) out.push_back(std::move(p));
    return out;
}

Model Model::clone() const {
    Model copy = init_model(encoder.config, head.config);
    auto dst = copy.parameters();
    const auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const auto v = src[i].second.values();
        std::copy(v.begin(), v.end(), dst[i].second.mutable_values().begin());
    }
    return copy;
}

Model init_model(const EncoderConfig& encoder, HeadConfig head) {
    head.d_model = encoder.d_model;
    return {init_encoder(encoder), init_head(head)};
}

LanguageOutputs forward_items(const Model& model, std::span<const Example* const> items, const Vocab& vocab,
                              InputFormat format, InputMode mode) {
    if (items.empty()) throw DataError("empty batch");
    if (vocab.size() > model.encoder.config.vocab_size) {
        throw DataError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model was built for " +
                        std::to_string(model.encoder.config.vocab_size));
    }
    const std::size_t choices = items.front()->choices.size();
    std::vector<TokenSequence> seqs;
    for (const Example* ex : items) {
        if (ex->choices.size() != choices) {
            throw DataError("item '" + ex->id + "' has " + std::to_string(ex->choices.size()) +
                            " choices; batch expects " + std::to_string(choices));
        }
        for (auto& s : encode_choices(*ex, vocab, model.encoder.config.max_len, format)) seqs.push_back(std::move(s));
    }
    const PackedBatch batch = pack_sequences(seqs);
    LanguageOutputs out;
    out.head = extract(encode_packed(model.encoder, batch), batch.lengths, model.head);
    out.logits = choice_logits(classifier_input(out.head, mode), model.head);
    return out;
}

std::vector<std::size_t> predict_items(const Model& model, std::span<const Example> items, const Vocab& vocab,
                                       InputFormat format, InputMode mode, std::size_t chunk) {
    std::vector<std::size_t> preds;
    preds.reserve(items.size());
    NoGradGuard no_grad;
    std::vector<const Example*> ptrs;
    for (std::size_t start = 0; start < items.size(); start += chunk) {
        ptrs.clear();
        for (std::size_t i = start; i < std::min(items.size(), start + chunk); ++i) ptrs.push_back(&items[i]);
        const auto out = forward_items(model, ptrs, vocab, format, mode);
        const auto logits = out.logits.values();
        const std::size_t c = ptrs.front()->choices.size();
        for (std::size_t i = 0; i < ptrs.size(); ++i) preds.push_back(predict(logits.subspan(i * c, c)));
    }
    return preds;
}

}  // namespace cstransfer
