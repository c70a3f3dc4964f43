#pragma once

#include <cctype>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ltuning/errors.hpp"

namespace ltuning {

// Whitespace tokenizer over a fixed vocabulary. Ids 0 and 1 are reserved for
// the pad and unknown tokens; the vocabulary file is newline-delimited UTF-8
// with line index == id.
class Tokenizer {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;

    static Tokenizer from_words(const std::vector<std::string>& words) {
        Tokenizer t;
        t.vocab_ = {"<pad>", "<unk>"};
        t.vocab_.insert(t.vocab_.end(), words.begin(), words.end());
        t.build_index();
        return t;
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open vocabulary file: " + path);
        Tokenizer t;
        std::string line;
        while (std::getline(in, line)) {
            t.vocab_.push_back(line);
        }
        if (t.vocab_.size() < 2) {
            throw DataError("vocabulary file too small (pad and unknown lines required): " + path);
        }
        t.build_index();
        return t;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write vocabulary file: " + path);
        for (const auto& w : vocab_) out << w << '\n';
    }

    // Lowercased whitespace-split lookup; out-of-vocabulary words map to the
    // unknown id. Empty text gives an empty id list.
    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        std::string word;
        auto flush = [&] {
            if (word.empty()) return;
            auto it = index_.find(word);
            ids.push_back(it == index_.end() ? kUnkId : it->second);
            word.clear();
        };
        for (char c : text) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                flush();
            } else {
                word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            }
        }
        flush();
        return ids;
    }

    std::string decode(std::span<const int> ids) const {
        std::string text;
        for (int id : ids) {
            if (id < 0 || id >= size()) {
                throw VocabError("decode: id " + std::to_string(id) + " outside vocabulary of size " +
                                 std::to_string(size()));
            }
            if (!text.empty()) text.push_back(' ');
            text += vocab_[static_cast<std::size_t>(id)];
        }
        return text;
    }

    int size() const { return static_cast<int>(vocab_.size()); }
    const std::string& word(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }

private:
    void build_index() {
        index_.clear();
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            index_.emplace(vocab_[i], static_cast<int>(i));
        }
    }

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace ltuning
