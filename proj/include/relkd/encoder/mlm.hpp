#pragma once

// Masked-language-model objective used to give toy teachers non-trivial
// attention structure before they are distilled.

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "relkd/encoder/model.hpp"

namespace relkd::encoder {

struct MaskedBatch {
    textdata::TokenBatch input;  // corrupted ids
    std::vector<int> targets;    // original id at selected positions, -1 elsewhere
    std::size_t selected = 0;
};

/// Selects each real non-boundary token with probability mask_prob; selected
/// tokens become UNK (80%), a random word id (10%) or stay unchanged (10%).
inline MaskedBatch mask_tokens(const textdata::TokenBatch& batch, double mask_prob, std::size_t vocab_size,
                               std::mt19937_64& rng) {
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ContractError("mask_tokens: mask_prob must be in (0,1)");
    if (vocab_size <= textdata::kNumSpecials) throw ContractError("mask_tokens: vocab has no word ids");
    MaskedBatch m;
    m.input = batch;
    m.targets.assign(batch.ids.size(), -1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> word(static_cast<int>(textdata::kNumSpecials), static_cast<int>(vocab_size) - 1);
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
        const int id = batch.ids[i];
        if (!batch.mask[i] || id == textdata::kBos || id == textdata::kEos) continue;
        if (u(rng) >= mask_prob) continue;
        m.targets[i] = id;
        ++m.selected;
        const double r = u(rng);
        if (r < 0.8) {
            m.input.ids[i] = textdata::kUnk;
        } else if (r < 0.9) {
            m.input.ids[i] = word(rng);
        }
    }
    return m;
}

/// Vocabulary logits [B*S x V] from final hidden states via the tied embedding.
template <typename T>
BasicTensor<T> mlm_logits(const EncoderWeights<T>& w, const BasicTensor<T>& hidden) {
    const std::size_t rows = hidden.numel() / w.config.hidden;
    auto flat = numkit::reshape(hidden, {rows, w.config.hidden});
    return numkit::add(numkit::matmul_bt(flat, w.token_embedding), w.mlm_bias);
}

/// Cross-entropy over the selected positions, or nullopt when the batch
/// contains nothing to predict (the caller skips it).
template <typename T>
std::optional<BasicTensor<T>> mlm_loss(const EncoderWeights<T>& w, const textdata::TokenBatch& batch, double mask_prob,
                                       std::uint64_t seed, bool train = false) {
    std::mt19937_64 rng(seed);
    auto m = mask_tokens(batch, mask_prob, w.config.vocab_size, rng);
    if (m.selected == 0) return std::nullopt;
    ForwardOptions opt;
    opt.train = train;
    opt.rng = &rng;
    auto out = forward(w, m.input, opt);
    return numkit::cross_entropy(mlm_logits(w, out.hidden), std::span<const int>(m.targets));
}

}  // namespace relkd::encoder
