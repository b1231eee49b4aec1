#pragma once

// Word-level tokenizer over an explicit vocabulary file. Text is lowercased
// and split on whitespace and ASCII punctuation; unknown words map to a
// reserved token. Sequences are SOS + words + EOS, right-padded to the
// context length, with over-long texts truncated from the right so EOS is
// always present.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"

namespace protext::text {

struct Vocabulary {
    std::vector<std::string> tokens;
    std::uint32_t sos_id = 0;
    std::uint32_t eos_id = 0;
    std::uint32_t pad_id = 0;
    std::uint32_t unk_id = 0;
    std::string version;

    std::size_t size() const { return tokens.size(); }

    void validate() const {
        if (tokens.empty()) {
            throw ValidationError("vocabulary is empty");
        }
        if (sos_id >= tokens.size() || eos_id >= tokens.size() || pad_id >= tokens.size() ||
            unk_id >= tokens.size()) {
            throw ValidationError("vocabulary special id out of range");
        }
        if (sos_id == eos_id || sos_id == pad_id || eos_id == pad_id) {
            throw ValidationError("vocabulary special ids must be distinct");
        }
        std::map<std::string, std::size_t> seen;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            auto [it, inserted] = seen.emplace(tokens[i], i);
            if (!inserted) {
                throw ValidationError("duplicate vocabulary token: " + tokens[i]);
            }
        }
    }

    std::uint32_t lookup(const std::string& word) const {
        ensure_index();
        auto it = index_.find(word);
        return it == index_.end() ? unk_id : it->second;
    }

    const std::string& word(std::uint32_t id) const {
        if (id >= tokens.size()) {
            throw ValidationError("token id out of range: " + std::to_string(id));
        }
        return tokens[id];
    }

private:
    void ensure_index() const {
        if (index_.size() != tokens.size()) {
            index_.clear();
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                index_.emplace(tokens[i], static_cast<std::uint32_t>(i));
            }
        }
    }
    mutable std::map<std::string, std::uint32_t> index_;
};

// Builds a vocabulary with the special tokens appended after the word list.
inline Vocabulary make_vocabulary(std::vector<std::string> words,
                                  const std::string& version = kVersion) {
    Vocabulary v;
    v.tokens = std::move(words);
    v.tokens.push_back("[sos]");
    v.sos_id = static_cast<std::uint32_t>(v.tokens.size() - 1);
    v.tokens.push_back("[eos]");
    v.eos_id = static_cast<std::uint32_t>(v.tokens.size() - 1);
    v.tokens.push_back("[pad]");
    v.pad_id = static_cast<std::uint32_t>(v.tokens.size() - 1);
    v.tokens.push_back("[unk]");
    v.unk_id = static_cast<std::uint32_t>(v.tokens.size() - 1);
    v.version = version;
    v.validate();
    return v;
}

inline void save_vocabulary(const Vocabulary& v, const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = v.version;
    j["tokens"] = v.tokens;
    j["sos"] = v.sos_id;
    j["eos"] = v.eos_id;
    j["pad"] = v.pad_id;
    j["unk"] = v.unk_id;
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write vocabulary file " + path.string());
    }
    out << j.dump(2) << "\n";
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read vocabulary file " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed vocabulary file " + path.string() + ": " + e.what());
    }
    Vocabulary v;
    try {
        v.version = j.at("version").get<std::string>();
        v.tokens = j.at("tokens").get<std::vector<std::string>>();
        v.sos_id = j.at("sos").get<std::uint32_t>();
        v.eos_id = j.at("eos").get<std::uint32_t>();
        v.pad_id = j.at("pad").get<std::uint32_t>();
        v.unk_id = j.at("unk").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("vocabulary file missing field: " + std::string(e.what()));
    }
    v.validate();
    return v;
}

inline bool is_separator(char c) {
    const unsigned char u = static_cast<unsigned char>(c);
    return std::isspace(u) || std::ispunct(u);
}

// Lowercases and splits on whitespace/punctuation; separators are dropped.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (is_separator(c)) {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) {
        words.push_back(cur);
    }
    return words;
}

struct TokenSequence {
    std::vector<std::uint32_t> ids;
    std::size_t eos_position = 0;
    std::string source_text;
};

inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                              std::size_t context_length) {
    if (context_length < 2) {
        throw ValidationError("context_length must fit SOS and EOS");
    }
    std::vector<std::string> words = split_words(text);
    if (words.empty()) {
        throw ValidationError("cannot tokenize empty text: \"" + text + "\"");
    }
    const std::size_t max_words = context_length - 2;
    if (words.size() > max_words) {
        words.resize(max_words);
    }
    TokenSequence seq;
    seq.source_text = text;
    seq.ids.reserve(context_length);
    seq.ids.push_back(vocab.sos_id);
    for (const std::string& w : words) {
        seq.ids.push_back(vocab.lookup(w));
    }
    seq.eos_position = seq.ids.size();
    seq.ids.push_back(vocab.eos_id);
    seq.ids.resize(context_length, vocab.pad_id);
    return seq;
}

}  // namespace protext::text
