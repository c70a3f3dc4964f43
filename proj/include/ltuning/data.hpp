#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ltuning/errors.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tokenizer.hpp"

namespace ltuning {

struct Example {
    std::string text;
    int label_index = 0;
};

// The K label strings with their tokenized forms, right-padded to a fixed
// length l. Pad positions are recorded in `valid` and masked out of
// attention-pooling scores.
struct LabelSet {
    std::vector<std::string> labels;
    std::vector<std::vector<int>> token_ids;
    std::vector<std::vector<char>> valid;
    std::int64_t l = 0;

    int k() const { return static_cast<int>(labels.size()); }

    static LabelSet build(const Tokenizer& tokenizer, const std::vector<std::string>& labels,
                          std::int64_t l) {
        if (labels.size() < 2) {
            throw ConfigError("label set needs K >= 2 labels, got " + std::to_string(labels.size()));
        }
        std::set<std::string> seen;
        LabelSet out;
        out.labels = labels;
        out.l = l;
        for (const auto& label : labels) {
            if (!seen.insert(label).second) {
                throw ConfigError("duplicate label string '" + label + "'");
            }
            auto ids = tokenizer.encode(label);
            if (ids.empty()) {
                throw ConfigError("label '" + label + "' tokenizes to nothing");
            }
            if (static_cast<std::int64_t>(ids.size()) > l) {
                throw ConfigError("label '" + label + "' tokenizes to " +
                                  std::to_string(ids.size()) + " tokens, longer than l=" +
                                  std::to_string(l));
            }
            std::vector<char> mask(static_cast<std::size_t>(l), 0);
            std::fill(mask.begin(), mask.begin() + ids.size(), 1);
            ids.resize(static_cast<std::size_t>(l), Tokenizer::kPadId);
            out.token_ids.push_back(std::move(ids));
            out.valid.push_back(std::move(mask));
        }
        return out;
    }
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> val;
    std::vector<std::string> labels;
};

// Texts that tokenize to nothing are represented as a single unknown token
// so they can still flow through the backbone.
inline std::vector<int> tokenize_or_unk(const Tokenizer& tokenizer, std::string_view text) {
    auto ids = tokenizer.encode(text);
    if (ids.empty()) ids.push_back(Tokenizer::kUnkId);
    return ids;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

inline std::vector<std::string> load_labels_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open labels file: " + path);
    std::vector<std::string> labels;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) labels.push_back(line);
    }
    if (labels.size() < 2) {
        throw DataError("labels file " + path + " defines " + std::to_string(labels.size()) +
                        " labels; K >= 2 required");
    }
    return labels;
}

namespace detail {

inline std::unordered_map<std::string, int> label_index_map(const std::vector<std::string>& labels) {
    std::unordered_map<std::string, int> map;
    for (std::size_t i = 0; i < labels.size(); ++i) map.emplace(labels[i], static_cast<int>(i));
    return map;
}

}  // namespace detail

// One JSON object per line with string fields "text" and "label"; label
// strings are mapped to indices by their position in `labels`.
inline std::vector<Example> load_jsonl(const std::string& path,
                                       const std::vector<std::string>& labels) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    const auto index = detail::label_index_map(labels);
    std::vector<Example> examples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        if (!obj.contains("text") || !obj["text"].is_string() || !obj.contains("label") ||
            !obj["label"].is_string()) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": object needs string fields 'text' and 'label'");
        }
        const std::string label = obj["label"].get<std::string>();
        auto it = index.find(label);
        if (it == index.end()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": unknown label '" + label + "'");
        }
        examples.push_back({obj["text"].get<std::string>(), it->second});
    }
    if (examples.empty()) {
        throw DataError(path + ": no examples found");
    }
    return examples;
}

// GLUE-style TSV with a header row; columns selected by name.
inline std::vector<Example> load_tsv_glue(const std::string& path, const std::string& text_column,
                                          const std::string& label_column,
                                          const std::vector<std::string>& labels) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    const auto index = detail::label_index_map(labels);

    auto split_tabs = [](const std::string& line) {
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t pos = line.find('\t', start);
            if (pos == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, pos - start));
            start = pos + 1;
        }
        return fields;
    };

    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(path + ": missing header row");
    }
    const auto header = split_tabs(line);
    auto column_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        std::string available;
        for (const auto& h : header) {
            if (!available.empty()) available += ", ";
            available += h;
        }
        throw DataError(path + ": no column '" + name + "' (available: " + available + ")");
    };
    const std::size_t text_idx = column_of(text_column);
    const std::size_t label_idx = column_of(label_column);

    std::vector<Example> examples;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        if (fields.size() != header.size()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": ragged row with " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(header.size()));
        }
        auto it = index.find(fields[label_idx]);
        if (it == index.end()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": unknown label '" +
                            fields[label_idx] + "'");
        }
        examples.push_back({fields[text_idx], it->second});
    }
    if (examples.empty()) {
        throw DataError(path + ": no examples found");
    }
    return examples;
}

// train.jsonl / val.jsonl / labels.txt layout produced by gen_synth and
// consumed by the CLI.
inline Dataset load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.labels = load_labels_file((fs::path(dir) / "labels.txt").string());
    ds.train = load_jsonl((fs::path(dir) / "train.jsonl").string(), ds.labels);
    ds.val = load_jsonl((fs::path(dir) / "val.jsonl").string(), ds.labels);
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic task generator
// ---------------------------------------------------------------------------

// Keyword-planting text classifier task. Each class owns three keywords
// (pairwise disjoint across classes); every text is filler words with 1-3 of
// its own class's keywords planted at random positions, and label strings
// are phrases that share tokens with the class keywords ("about cat kitten"),
// so encoding the label through the backbone carries class information.
struct SynthSpec {
    int classes = 4;
    std::uint64_t seed = 1;
    int min_len = 5;
    int max_len = 12;
    int min_keywords = 1;
    int max_keywords = 3;
    std::int64_t vocab_budget = 512;  // generated words + reserved ids must fit
};

struct SynthData {
    Dataset dataset;
    std::vector<std::string> vocab_words;  // everything except <pad>/<unk>
};

namespace detail {

inline const std::vector<std::vector<std::string>>& synth_keyword_pool() {
    static const std::vector<std::vector<std::string>> pool = {
        {"cat", "kitten", "meow"},   {"dog", "puppy", "bark"},   {"fish", "fin", "swim"},
        {"bird", "wing", "fly"},     {"car", "wheel", "engine"}, {"tree", "leaf", "root"},
        {"rain", "cloud", "storm"},  {"song", "drum", "melody"},
    };
    return pool;
}

inline const std::vector<std::string>& synth_filler_words() {
    static const std::vector<std::string> fillers = {
        "the", "a",    "is",   "was",  "and",  "of",   "to",   "in",   "it",   "that",
        "on",  "for",  "with", "as",   "at",   "by",   "this", "be",   "or",   "an",
        "we",  "you",  "they", "so",   "very", "quite", "then", "just", "some", "more",
    };
    return fillers;
}

}  // namespace detail

inline SynthData gen_synth(const SynthSpec& spec, int n_train, int n_val) {
    const auto& pool = detail::synth_keyword_pool();
    const auto& fillers = detail::synth_filler_words();
    if (spec.classes < 2 || spec.classes > static_cast<int>(pool.size())) {
        throw ConfigError("gen_synth: classes must be in [2," + std::to_string(pool.size()) +
                          "], got " + std::to_string(spec.classes));
    }
    if (n_train <= 0 || n_val <= 0) {
        throw ConfigError("gen_synth: train and val sizes must be positive");
    }
    if (spec.min_len < spec.max_keywords || spec.min_len <= 0 || spec.max_len < spec.min_len ||
        spec.min_keywords < 1 || spec.max_keywords < spec.min_keywords) {
        throw ConfigError("gen_synth: inconsistent length/keyword ranges");
    }

    SynthData out;
    out.vocab_words.push_back("about");
    for (int c = 0; c < spec.classes; ++c) {
        for (const auto& kw : pool[static_cast<std::size_t>(c)]) out.vocab_words.push_back(kw);
    }
    out.vocab_words.insert(out.vocab_words.end(), fillers.begin(), fillers.end());
    if (static_cast<std::int64_t>(out.vocab_words.size()) + 2 > spec.vocab_budget) {
        throw ConfigError("gen_synth: vocabulary of " + std::to_string(out.vocab_words.size() + 2) +
                          " words overflows budget " + std::to_string(spec.vocab_budget));
    }

    for (int c = 0; c < spec.classes; ++c) {
        const auto& kw = pool[static_cast<std::size_t>(c)];
        out.dataset.labels.push_back("about " + kw[0] + " " + kw[1]);
    }

    SplitMix64 rng(spec.seed);
    auto generate_split = [&](int count) {
        std::vector<Example> examples;
        examples.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            const int cls = i % spec.classes;  // round-robin keeps classes near-balanced
            const auto& kw = pool[static_cast<std::size_t>(cls)];
            const int len = spec.min_len +
                            static_cast<int>(rng.next_below(
                                static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
            const int planted =
                spec.min_keywords +
                static_cast<int>(rng.next_below(
                    static_cast<std::uint64_t>(spec.max_keywords - spec.min_keywords + 1)));
            std::vector<std::string> words(static_cast<std::size_t>(len));
            for (auto& w : words) {
                w = fillers[rng.next_below(fillers.size())];
            }
            // Distinct positions via partial Fisher-Yates.
            std::vector<int> slots(static_cast<std::size_t>(len));
            for (int s = 0; s < len; ++s) slots[static_cast<std::size_t>(s)] = s;
            for (int p = 0; p < planted; ++p) {
                const auto j = p + static_cast<int>(rng.next_below(
                                       static_cast<std::uint64_t>(len - p)));
                std::swap(slots[static_cast<std::size_t>(p)], slots[static_cast<std::size_t>(j)]);
                words[static_cast<std::size_t>(slots[static_cast<std::size_t>(p)])] =
                    kw[rng.next_below(kw.size())];
            }
            std::string text;
            for (const auto& w : words) {
                if (!text.empty()) text.push_back(' ');
                text += w;
            }
            examples.push_back({std::move(text), cls});
        }
        // Shuffle so class order is not positional.
        for (std::size_t i = examples.size(); i > 1; --i) {
            std::swap(examples[i - 1], examples[rng.next_below(i)]);
        }
        return examples;
    };
    out.dataset.train = generate_split(n_train);
    out.dataset.val = generate_split(n_val);
    return out;
}

inline void write_dataset_dir(const SynthData& data, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    auto write_jsonl = [&](const std::string& name, const std::vector<Example>& examples) {
        const std::string path = (fs::path(dir) / name).string();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        for (const auto& ex : examples) {
            nlohmann::json obj;
            obj["text"] = ex.text;
            obj["label"] = data.dataset.labels[static_cast<std::size_t>(ex.label_index)];
            out << obj.dump() << '\n';
        }
    };
    write_jsonl("train.jsonl", data.dataset.train);
    write_jsonl("val.jsonl", data.dataset.val);

    {
        const std::string path = (fs::path(dir) / "labels.txt").string();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path);
        for (const auto& label : data.dataset.labels) out << label << '\n';
    }
    Tokenizer::from_words(data.vocab_words).save((fs::path(dir) / "vocab.txt").string());
}

}  // namespace ltuning
