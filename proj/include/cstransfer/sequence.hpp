#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cstransfer/vocab.hpp"

namespace cstransfer {

enum class Segment : std::uint8_t { Special, Question, Answer, Pad };

// A padded token sequence. Padding only ever occupies the tail.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<Segment> segments;

    std::size_t max_len() const { return ids.size(); }
    // Number of leading non-pad tokens.
    std::size_t active_length() const;
    // true where the position is padding.
    std::vector<bool> pad_mask() const;
    // [first, last) positions of the answer span; empty range for statements.
    std::pair<std::size_t, std::size_t> answer_span() const;
};

// [CLS] t1 ... tk [SEP] followed by padding; truncates to max_len.
TokenSequence encode_statement(std::string_view text, const Vocab& vocab, std::size_t max_len);

// [CLS] q1 ... qm [SEP] [CLS_Q] a1 ... an [SEP]; the question is truncated
// first, then the answer, so that at least one answer token always fits.
TokenSequence encode_qa(std::string_view question, std::string_view answer, const Vocab& vocab, std::size_t max_len);

// Content token strings (no specials, no padding).
std::vector<std::string> decode(const TokenSequence& seq, const Vocab& vocab);

// All non-pad token strings, specials included, in position order.
std::vector<std::string> active_tokens(const TokenSequence& seq, const Vocab& vocab);

}  // namespace cstransfer
