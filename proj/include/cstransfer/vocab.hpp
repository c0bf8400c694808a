#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cstransfer {

using TokenId = std::int32_t;

// Reserved ids occupy the start of every vocabulary in this order.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kCls = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kClsQ = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr std::array<std::string_view, 5> kNames{"[PAD]", "[CLS]", "[SEP]", "[CLS_Q]", "[UNK]"};
inline constexpr std::size_t kCount = kNames.size();
}  // namespace special

std::vector<std::string> split_whitespace(std::string_view text);

class Vocab {
public:
    Vocab();

    // Builds the reserved block followed by `tokens` in order (duplicates ignored).
    static Vocab from_tokens(std::span<const std::string> tokens);

    TokenId add(std::string_view token);
    // [UNK] for unknown tokens.
    TokenId id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // Plain text, one token per line; line i holds the token with id i,
    // starting with the reserved block.
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cstransfer
