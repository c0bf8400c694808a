#include "cstransfer/vocab.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>

#include "cstransfer/errors.hpp"

namespace cstransfer {

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

Vocab::Vocab() {
    for (auto name : special::kNames) {
        index_.emplace(std::string(name), static_cast<TokenId>(tokens_.size()));
        tokens_.emplace_back(name);
    }
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
    Vocab v;
    for (const auto& t : tokens) v.add(t);
    return v;
}

TokenId Vocab::add(std::string_view token) {
    if (token.empty() || split_whitespace(token).size() != 1 || split_whitespace(token)[0].size() != token.size()) {
        throw DataError("vocab: token must be non-empty and contain no whitespace: '" + std::string(token) + "'");
    }
    const auto it = index_.find(std::string(token));
    if (it != index_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.emplace_back(token);
    index_.emplace(tokens_.back(), id);
    return id;
}

TokenId Vocab::id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? special::kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write vocab file " + path.string());
    }
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) {
        throw DataError("failed writing vocab file " + path.string());
    }
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open vocab file " + path.string());
    }
    Vocab v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no < special::kCount) {
            if (line != special::kNames[line_no]) {
                throw DataError(path.string() + ":" + std::to_string(line_no + 1) + ": expected reserved token " +
                                std::string(special::kNames[line_no]) + ", found '" + line + "'");
            }
        } else {
            if (v.contains(line)) {
                throw DataError(path.string() + ":" + std::to_string(line_no + 1) + ": duplicate token '" + line + "'");
            }
            try {
                v.add(line);
            } catch (const DataError& e) {
                throw DataError(path.string() + ":" + std::to_string(line_no + 1) + ": " + e.what());
            }
        }
        ++line_no;
    }
    if (line_no < special::kCount) {
        throw DataError(path.string() + ": missing reserved token block");
    }
    return v;
}

}  // namespace cstransfer
