#pragma once

// Word-level vocabulary shared by teacher and student.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "relkd/error.hpp"

namespace relkd::textdata {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kBos = 2;
inline constexpr int kEos = 3;
inline constexpr std::size_t kNumSpecials = 4;

inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[BOS]", "[EOS]"};
    return specials;
}

class Vocab {
public:
    Vocab() : Vocab(special_tokens(), false) {}

    /// tokens must start with the four specials in id order; no duplicates.
    Vocab(std::vector<std::string> tokens, bool lowercase) : tokens_(std::move(tokens)), lowercase_(lowercase) {
        const auto& sp = special_tokens();
        if (tokens_.size() < kNumSpecials || !std::equal(sp.begin(), sp.end(), tokens_.begin())) {
            throw FormatError("vocab must begin with [PAD] [UNK] [BOS] [EOS]");
        }
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i].empty()) throw FormatError("vocab: empty token at id " + std::to_string(i));
            if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
                throw FormatError("vocab: duplicate token '" + tokens_[i] + "'");
            }
        }
    }

    std::size_t size() const { return tokens_.size(); }
    bool lowercase() const { return lowercase_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    bool lowercase_ = false;
};

/// Whitespace split with optional ASCII lowercasing.
inline std::vector<std::string> tokenize(std::string_view line, bool lowercase) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) {
            std::string tok(line.substr(i, j - i));
            if (lowercase) {
                for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            }
            out.push_back(std::move(tok));
        }
        i = j;
    }
    return out;
}

/// Non-empty lines of a UTF-8 text file, trailing CR stripped.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t\v\f") != std::string::npos) lines.push_back(std::move(line));
    }
    if (in.bad()) throw IoError("read error on '" + path.string() + "'");
    return lines;
}

/// Frequency-ranked vocabulary (ties broken lexicographically) holding at
/// most max_size entries including the four specials. max_size 4 yields a
/// specials-only vocab in which every word maps to UNK.
inline Vocab build_vocab(std::span<const std::string> lines, std::size_t max_size, bool lowercase) {
    if (max_size < kNumSpecials) {
        throw ContractError("build_vocab: max_size must be >= 4 (the special tokens), got " + std::to_string(max_size));
    }
    std::map<std::string, std::size_t> counts;
    const auto& sp = special_tokens();
    for (const auto& line : lines) {
        for (auto& tok : tokenize(line, lowercase)) {
            if (std::find(sp.begin(), sp.end(), tok) == sp.end()) ++counts[tok];
        }
    }
    if (counts.empty()) throw ContractError("build_vocab: corpus contains no tokens");
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = sp;
    for (std::size_t i = 0; i < ranked.size() && tokens.size() < max_size; ++i) tokens.push_back(ranked[i].first);
    return Vocab(std::move(tokens), lowercase);
}

inline Vocab build_vocab(const std::filesystem::path& corpus, std::size_t max_size, bool lowercase) {
    if (max_size < kNumSpecials) {
        throw ContractError("build_vocab: max_size must be >= 4 (the special tokens), got " + std::to_string(max_size));
    }
    auto lines = read_lines(corpus);
    return build_vocab(lines, max_size, lowercase);
}

/// One token per line, line number = id.
inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write vocab '" + path.string() + "'");
    for (const auto& t : vocab.tokens()) out << t << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Vocab load_vocab(const std::filesystem::path& path, bool lowercase = false) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocab '" + path.string() + "'");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocab(std::move(tokens), lowercase);
}

struct Encoded {
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;  // 1 = real token
};

/// BOS + tokens + EOS, truncated so EOS stays the last real token, then PAD-extended.
inline Encoded encode(const Vocab& vocab, std::string_view text, std::size_t seq_len) {
    if (seq_len < 3) throw ContractError("encode: seq_len must be >= 3");
    auto toks = tokenize(text, vocab.lowercase());
    const std::size_t n = std::min(toks.size(), seq_len - 2);
    Encoded e;
    e.ids.assign(seq_len, kPad);
    e.mask.assign(seq_len, 0);
    e.ids[0] = kBos;
    for (std::size_t i = 0; i < n; ++i) e.ids[i + 1] = vocab.id(toks[i]);
    e.ids[n + 1] = kEos;
    std::fill(e.mask.begin(), e.mask.begin() + static_cast<std::ptrdiff_t>(n + 2), std::uint8_t{1});
    return e;
}

/// Space-joined tokens with specials dropped.
inline std::string decode(const Vocab& vocab, std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

}  // namespace relkd::textdata
