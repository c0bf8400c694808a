#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cstransfer {

// Language roles. The pipeline is symmetric; these are only labels.
inline constexpr const char* kSourceLang = "EN";
inline constexpr const char* kTargetLang = "DE";

// One multiple-choice item with exactly one gold choice.
struct Example {
    std::string id;
    std::string lang;
    std::string question;  // may be empty for statement-completion items
    std::vector<std::string> choices;
    std::size_t gold = 0;

    void validate() const;
    bool operator==(const Example&) const = default;
};

// The same item in the source and target language; choices are aligned by index.
struct ParallelPair {
    Example source;
    Example target;

    void validate() const;
};

struct DatasetSchema {
    // When set, every line must carry exactly this many choices.
    std::optional<std::size_t> choices_per_item;
};

// JSON Lines with fields {id, lang, question, choices, label}. Input order is
// preserved; any invalid line aborts the load with its line number.
std::vector<Example> load_jsonl(const std::filesystem::path& path, const DatasetSchema& schema = {});
std::vector<Example> parse_jsonl(const std::string& text, const std::string& source_name,
                                 const DatasetSchema& schema = {});

std::string to_jsonl(std::span<const Example> examples);
void save_jsonl(const std::filesystem::path& path, std::span<const Example> examples);

// Joins two per-language files by shared id, in source order.
std::vector<ParallelPair> pair_by_id(std::span<const Example> source, std::span<const Example> target);

}  // namespace cstransfer
