#include "cstransfer/sequence.hpp"

#include <algorithm>

#include "cstransfer/errors.hpp"

namespace cstransfer {

std::size_t TokenSequence::active_length() const {
    const auto it = std::find(segments.begin(), segments.end(), Segment::Pad);
    return static_cast<std::size_t>(it - segments.begin());
}

std::vector<bool> TokenSequence::pad_mask() const {
    std::vector<bool> mask(segments.size());
    for (std::size_t i = 0; i < segments.size(); ++i) mask[i] = segments[i] == Segment::Pad;
    return mask;
}

std::pair<std::size_t, std::size_t> TokenSequence::answer_span() const {
    const auto first = std::find(segments.begin(), segments.end(), Segment::Answer);
    if (first == segments.end()) return {0, 0};
    const auto last = std::find_if(first, segments.end(), [](Segment s) { return s != Segment::Answer; });
    return {static_cast<std::size_t>(first - segments.begin()), static_cast<std::size_t>(last - segments.begin())};
}

namespace {

void push(TokenSequence& seq, TokenId id, Segment seg) {
    seq.ids.push_back(id);
    seq.segments.push_back(seg);
}

void pad_to(TokenSequence& seq, std::size_t max_len) {
    while (seq.ids.size() < max_len) push(seq, special::kPad, Segment::Pad);
}

}  // namespace

TokenSequence encode_statement(std::string_view text, const Vocab& vocab, std::size_t max_len) {
    if (max_len < 3) {
        throw DataError("encode_statement: max_len must be at least 3");
    }
    auto words = split_whitespace(text);
    if (words.empty()) {
        throw DataError("encode_statement: text is empty after tokenization");
    }
    words.resize(std::min(words.size(), max_len - 2));
    TokenSequence seq;
    push(seq, special::kCls, Segment::Special);
    for (const auto& w : words) push(seq, vocab.id(w), Segment::Question);
    push(seq, special::kSep, Segment::Special);
    pad_to(seq, max_len);
    return seq;
}

TokenSequence encode_qa(std::string_view question, std::string_view answer, const Vocab& vocab, std::size_t max_len) {
    constexpr std::size_t kSpecials = 4;
    if (max_len < kSpecials + 1) {
        throw DataError("encode_qa: max_len " + std::to_string(max_len) + " cannot fit any answer token");
    }
    auto q = split_whitespace(question);
    auto a = split_whitespace(answer);
    if (a.empty()) {
        throw DataError("encode_qa: answer is empty after tokenization");
    }
    const std::size_t budget = max_len - kSpecials;
    a.resize(std::min(a.size(), budget));
    q.resize(std::min(q.size(), budget - a.size()));
    TokenSequence seq;
    push(seq, special::kCls, Segment::Special);
    for (const auto& w : q) push(seq, vocab.id(w), Segment::Question);
    push(seq, special::kSep, Segment::Special);
    push(seq, special::kClsQ, Segment::Special);
    for (const auto& w : a) push(seq, vocab.id(w), Segment::Answer);
    push(seq, special::kSep, Segment::Special);
    pad_to(seq, max_len);
    return seq;
}

std::vector<std::string> decode(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (seq.segments[i] == Segment::Question || seq.segments[i] == Segment::Answer) {
            out.push_back(vocab.token(seq.ids[i]));
        }
    }
    return out;
}

std::vector<std::string> active_tokens(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> out;
    const std::size_t n = seq.active_length();
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(vocab.token(seq.ids[i]));
    return out;
}

}  // namespace cstransfer
