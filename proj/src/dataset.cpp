#include "cstransfer/dataset.hpp"

#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cstransfer/errors.hpp"

namespace cstransfer {

using json = nlohmann::ordered_json;

void Example::validate() const {
    if (choices.size() < 2) {
        throw DataError("example '" + id + "': needs at least 2 choices, has " + std::to_string(choices.size()));
    }
    if (gold >= choices.size()) {
        throw DataError("example '" + id + "': label " + std::to_string(gold) + " out of range for " +
                        std::to_string(choices.size()) + " choices");
    }
}

void ParallelPair::validate() const {
    source.validate();
    target.validate();
    if (source.choices.size() != target.choices.size()) {
        throw DataError("pair '" + source.id + "': choice counts differ across languages");
    }
    if (source.gold != target.gold) {
        throw DataError("pair '" + source.id + "': gold indices differ across languages");
    }
}

namespace {

Example parse_line(const std::string& line, const DatasetSchema& schema) {
    const json j = json::parse(line);
    if (!j.is_object()) {
        throw DataError("expected a JSON object");
    }
    auto field = [&](const char* name) -> const json& {
        if (!j.contains(name)) {
            throw DataError(std::string("missing field '") + name + "'");
        }
        return j.at(name);
    };
    Example ex;
    const auto& id = field("id");
    const auto& lang = field("lang");
    const auto& question = field("question");
    const auto& choices = field("choices");
    const auto& label = field("label");
    if (!id.is_string() || !lang.is_string() || !question.is_string()) {
        throw DataError("fields id, lang and question must be strings");
    }
    if (!choices.is_array()) {
        throw DataError("field 'choices' must be an array of strings");
    }
    if (!label.is_number_integer()) {
        throw DataError("field 'label' must be an integer");
    }
    ex.id = id.get<std::string>();
    ex.lang = lang.get<std::string>();
    ex.question = question.get<std::string>();
    for (const auto& c : choices) {
        if (!c.is_string()) {
            throw DataError("field 'choices' must be an array of strings");
        }
        ex.choices.push_back(c.get<std::string>());
    }
    const auto lbl = label.get<long long>();
    if (lbl < 0 || static_cast<std::size_t>(lbl) >= ex.choices.size()) {
        throw DataError("label " + std::to_string(lbl) + " out of range for " + std::to_string(ex.choices.size()) +
                        " choices");
    }
    ex.gold = static_cast<std::size_t>(lbl);
    if (schema.choices_per_item && ex.choices.size() != *schema.choices_per_item) {
        throw DataError("expected " + std::to_string(*schema.choices_per_item) + " choices, found " +
                        std::to_string(ex.choices.size()));
    }
    ex.validate();
    return ex;
}

}  // namespace

std::vector<Example> parse_jsonl(const std::string& text, const std::string& source_name, const DatasetSchema& schema) {
    std::vector<Example> out;
    std::unordered_set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        try {
            if (line.find_first_not_of(" \t") == std::string::npos) {
                throw DataError("empty line");
            }
            auto ex = parse_line(line, schema);
            if (!ids.insert(ex.id).second) {
                throw DataError("duplicate id '" + ex.id + "'");
            }
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        } catch (const DataError& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::vector<Example> load_jsonl(const std::filesystem::path& path, const DatasetSchema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open dataset file " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_jsonl(buf.str(), path.string(), schema);
}

std::string to_jsonl(std::span<const Example> examples) {
    std::string out;
    for (const auto& ex : examples) {
        json j;
        j["id"] = ex.id;
        j["lang"] = ex.lang;
        j["question"] = ex.question;
        j["choices"] = ex.choices;
        j["label"] = ex.gold;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void save_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset file " + path.string());
    }
    out << to_jsonl(examples);
    if (!out) {
        throw DataError("failed writing dataset file " + path.string());
    }
}

std::vector<ParallelPair> pair_by_id(std::span<const Example> source, std::span<const Example> target) {
    std::unordered_map<std::string, const Example*> by_id;
    for (const auto& t : target) by_id.emplace(t.id, &t);
    std::vector<ParallelPair> pairs;
    pairs.reserve(source.size());
    for (const auto& s : source) {
        const auto it = by_id.find(s.id);
        if (it == by_id.end()) {
            throw DataError("pair_by_id: no target counterpart for id '" + s.id + "'");
        }
        ParallelPair p{s, *it->second};
        p.validate();
        pairs.push_back(std::move(p));
        by_id.erase(it);
    }
    for (const auto& t : target) {
        if (by_id.contains(t.id)) {
            throw DataError("pair_by_id: no source counterpart for id '" + t.id + "'");
        }
    }
    return pairs;
}

}  // namespace cstransfer
