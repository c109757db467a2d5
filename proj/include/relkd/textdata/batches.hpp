#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "relkd/textdata/vocab.hpp"

namespace relkd::textdata {

/// Rectangular batch of encoded sentences, row-major [batch x seq_len].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;  // 1 = real token; PAD positions are 0

    std::size_t real_tokens(std::size_t row) const {
        return static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(row * seq_len),
                                                   mask.begin() + static_cast<std::ptrdiff_t>((row + 1) * seq_len),
                                                   std::uint8_t{1}));
    }
};

inline TokenBatch make_batch(const Vocab& vocab, const std::vector<const std::string*>& lines, std::size_t seq_len) {
    TokenBatch b;
    b.batch = lines.size();
    b.seq_len = seq_len;
    b.ids.reserve(lines.size() * seq_len);
    b.mask.reserve(lines.size() * seq_len);
    for (const auto* line : lines) {
        auto e = encode(vocab, *line, seq_len);
        b.ids.insert(b.ids.end(), e.ids.begin(), e.ids.end());
        b.mask.insert(b.mask.end(), e.mask.begin(), e.mask.end());
    }
    return b;
}

/// Drops trailing columns that are PAD in every row (at least one column is kept).
/// Masked keys and queries never reach a loss, so the narrower batch gives the
/// same losses with less work.
inline TokenBatch trim_padding(const TokenBatch& b) {
    std::size_t width = 1;
    for (std::size_t r = 0; r < b.batch; ++r)
        for (std::size_t i = b.seq_len; i-- > width;) {
            if (b.mask[r * b.seq_len + i]) {
                width = i + 1;
                break;
            }
        }
    width = std::min(width, b.seq_len);
    if (width == b.seq_len) return b;
    TokenBatch out;
    out.batch = b.batch;
    out.seq_len = width;
    for (std::size_t r = 0; r < b.batch; ++r) {
        const auto off = static_cast<std::ptrdiff_t>(r * b.seq_len);
        out.ids.insert(out.ids.end(), b.ids.begin() + off, b.ids.begin() + off + static_cast<std::ptrdiff_t>(width));
        out.mask.insert(out.mask.end(), b.mask.begin() + off, b.mask.begin() + off + static_cast<std::ptrdiff_t>(width));
    }
    return out;
}

/// Endless shuffled stream over a corpus. Epoch e is ordered by a shuffle
/// seeded with seed + e; batches run across epoch boundaries.
class BatchStream {
public:
    BatchStream(std::vector<std::string> lines, const Vocab& vocab, std::size_t batch_size, std::size_t seq_len,
                std::uint64_t seed)
        : lines_(std::move(lines)), vocab_(&vocab), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
        if (batch_size_ < 1) throw ContractError("batch_stream: batch_size must be >= 1");
        if (seq_len_ < 3) throw ContractError("batch_stream: seq_len must be >= 3");
        if (lines_.empty()) throw ContractError("batch_stream: corpus has no non-empty lines");
        reshuffle();
    }

    BatchStream(const std::filesystem::path& corpus, const Vocab& vocab, std::size_t batch_size, std::size_t seq_len,
                std::uint64_t seed)
        : BatchStream(read_lines(corpus), vocab, batch_size, seq_len, seed) {}

    TokenBatch next() {
        std::vector<const std::string*> picked;
        picked.reserve(batch_size_);
        while (picked.size() < batch_size_) {
            if (cursor_ == order_.size()) {
                ++epoch_;
                reshuffle();
            }
            picked.push_back(&lines_[order_[cursor_++]]);
        }
        return make_batch(*vocab_, picked, seq_len_);
    }

    std::uint64_t epoch() const { return epoch_; }
    std::size_t corpus_lines() const { return lines_.size(); }

private:
    void reshuffle() {
        order_.resize(lines_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::mt19937_64 rng(seed_ + epoch_);
        // Fisher-Yates with a fixed index draw, stable across standard libraries.
        for (std::size_t i = order_.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng() % i);
            std::swap(order_[i - 1], order_[j]);
        }
        cursor_ = 0;
    }

    std::vector<std::string> lines_;
    const Vocab* vocab_;
    std::size_t batch_size_;
    std::size_t seq_len_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// File-order batches covering every line once; the last batch may be short.
inline std::vector<TokenBatch> fixed_batches(const std::vector<std::string>& lines, const Vocab& vocab,
                                             std::size_t batch_size, std::size_t seq_len) {
    if (batch_size < 1) throw ContractError("fixed_batches: batch_size must be >= 1");
    if (lines.empty()) throw ContractError("fixed_batches: corpus has no non-empty lines");
    std::vector<TokenBatch> out;
    for (std::size_t i = 0; i < lines.size(); i += batch_size) {
        std::vector<const std::string*> picked;
        for (std::size_t j = i; j < std::min(lines.size(), i + batch_size); ++j) picked.push_back(&lines[j]);
        out.push_back(make_batch(vocab, picked, seq_len));
    }
    return out;
}

}  // namespace relkd::textdata
