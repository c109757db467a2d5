#pragma once

// Pre-LN Transformer encoder with optional relative-position attention bias,
// GELU or GeGLU feed-forward blocks, and per-layer Q/K/V capture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "relkd/encoder/config.hpp"
#include "relkd/numkit/ops.hpp"
#include "relkd/textdata/batches.hpp"

namespace relkd::encoder {

using numkit::BasicTensor;
using numkit::Shape;

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerWeights {
    BasicTensor<T> attn_norm_gain, attn_norm_bias;
    BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    BasicTensor<T> ffn_norm_gain, ffn_norm_bias;
    BasicTensor<T> w_up, b_up, w_down, b_down;
};

template <typename T>
struct EncoderWeights {
    ModelConfig config;
    BasicTensor<T> token_embedding;  // [V x H], tied to the MLM output projection
    BasicTensor<T> position_table;   // [max_seq_len x H], absolute only
    BasicTensor<T> relative_table;   // [n_buckets x A], relative only
    std::vector<LayerWeights<T>> layers;
    BasicTensor<T> final_norm_gain, final_norm_bias;
    BasicTensor<T> mlm_bias;  // [V]

    /// Every parameter with a stable name. Handles alias the stored tensors.
    std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, BasicTensor<T>>> out;
        out.emplace_back("embeddings.token", token_embedding);
        if (config.pos_kind == PosKind::absolute) {
            out.emplace_back("embeddings.position", position_table);
        } else {
            out.emplace_back("embeddings.relative_table", relative_table);
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.emplace_back(p + "attn_norm.gain", l.attn_norm_gain);
            out.emplace_back(p + "attn_norm.bias", l.attn_norm_bias);
            out.emplace_back(p + "attn.q.weight", l.wq);
            out.emplace_back(p + "attn.q.bias", l.bq);
            out.emplace_back(p + "attn.k.weight", l.wk);
            out.emplace_back(p + "attn.k.bias", l.bk);
            out.emplace_back(p + "attn.v.weight", l.wv);
            out.emplace_back(p + "attn.v.bias", l.bv);
            out.emplace_back(p + "attn.o.weight", l.wo);
            out.emplace_back(p + "attn.o.bias", l.bo);
            out.emplace_back(p + "ffn_norm.gain", l.ffn_norm_gain);
            out.emplace_back(p + "ffn_norm.bias", l.ffn_norm_bias);
            out.emplace_back(p + "ffn.up.weight", l.w_up);
            out.emplace_back(p + "ffn.up.bias", l.b_up);
            out.emplace_back(p + "ffn.down.weight", l.w_down);
            out.emplace_back(p + "ffn.down.bias", l.b_down);
        }
        out.emplace_back("final_norm.gain", final_norm_gain);
        out.emplace_back("final_norm.bias", final_norm_bias);
        out.emplace_back("mlm.bias", mlm_bias);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
    }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) t.zero_grad();
    }
};

/// Shapes of every parameter a config implies, in named_parameters() order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
    const std::size_t H = c.hidden, V = c.vocab_size, U = c.ffn_up_width(), F = c.ffn_size;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("embeddings.token", Shape{V, H});
    if (c.pos_kind == PosKind::absolute) {
        out.emplace_back("embeddings.position", Shape{c.max_seq_len, H});
    } else {
        out.emplace_back("embeddings.relative_table", Shape{c.rel_buckets, c.n_heads});
    }
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        out.emplace_back(p + "attn_norm.gain", Shape{H});
        out.emplace_back(p + "attn_norm.bias", Shape{H});
        for (const char* m : {"q", "k", "v", "o"}) {
            out.emplace_back(p + "attn." + m + ".weight", Shape{H, H});
            out.emplace_back(p + "attn." + m + ".bias", Shape{H});
        }
        out.emplace_back(p + "ffn_norm.gain", Shape{H});
        out.emplace_back(p + "ffn_norm.bias", Shape{H});
        out.emplace_back(p + "ffn.up.weight", Shape{H, U});
        out.emplace_back(p + "ffn.up.bias", Shape{U});
        out.emplace_back(p + "ffn.down.weight", Shape{F, H});
        out.emplace_back(p + "ffn.down.bias", Shape{H});
    }
    out.emplace_back("final_norm.gain", Shape{H});
    out.emplace_back("final_norm.bias", Shape{H});
    out.emplace_back("mlm.bias", Shape{V});
    return out;
}

/// Assembles weights from tensors listed in parameter_shapes() order.
template <typename T>
EncoderWeights<T> assemble_weights(const ModelConfig& c, std::vector<BasicTensor<T>> t) {
    const auto shapes = parameter_shapes(c);
    if (t.size() != shapes.size()) throw ShapeError("assemble_weights: tensor count does not match config");
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i].shape() != shapes[i].second) {
            throw ShapeError("parameter " + shapes[i].first + " has shape " + numkit::shape_str(t[i].shape()) +
                             ", config implies " + numkit::shape_str(shapes[i].second));
        }
    }
    EncoderWeights<T> w;
    w.config = c;
    std::size_t k = 0;
    w.token_embedding = t[k++];
    if (c.pos_kind == PosKind::absolute) {
        w.position_table = t[k++];
    } else {
        w.relative_table = t[k++];
    }
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        LayerWeights<T> l;
        l.attn_norm_gain = t[k++];
        l.attn_norm_bias = t[k++];
        l.wq = t[k++];
        l.bq = t[k++];
        l.wk = t[k++];
        l.bk = t[k++];
        l.wv = t[k++];
        l.bv = t[k++];
        l.wo = t[k++];
        l.bo = t[k++];
        l.ffn_norm_gain = t[k++];
        l.ffn_norm_bias = t[k++];
        l.w_up = t[k++];
        l.b_up = t[k++];
        l.w_down = t[k++];
        l.b_down = t[k++];
        w.layers.push_back(std::move(l));
    }
    w.final_norm_gain = t[k++];
    w.final_norm_bias = t[k++];
    w.mlm_bias = t[k++];
    return w;
}

namespace detail {

inline bool is_norm_or_bias(const std::string& name) {
    auto ends = [&](const std::string& s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends(".gain") || ends(".bias");
}

inline double truncated_normal(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (;;) {
        const double v = dist(rng);
        if (std::abs(v) <= 2.0 * stddev) return v;
    }
}

}  // namespace detail

/// Matrices and embeddings ~ N(0, 0.02^2) truncated at 2 sigma; biases zero;
/// layer-norm gains one. Position parameters come from a separate stream so
/// that absolute and relative variants of a config share all other weights.
template <typename T>
EncoderWeights<T> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::mt19937_64 pos_rng(seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<BasicTensor<T>> tensors;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        std::vector<T> data(numkit::numel(shape), T(0));
        const bool positional = name == "embeddings.position" || name == "embeddings.relative_table";
        if (name.ends_with(".gain")) {
            std::fill(data.begin(), data.end(), T(1));
        } else if (!detail::is_norm_or_bias(name)) {
            auto& r = positional ? pos_rng : rng;
            for (auto& v : data) v = static_cast<T>(detail::truncated_normal(r, kInitStd));
        }
        tensors.emplace_back(shape, std::move(data), false);
    }
    return assemble_weights<T>(config, std::move(tensors));
}

/// Parameters that receive weight decay: everything except gains and biases.
inline bool decays(const std::string& name) { return !detail::is_norm_or_bias(name); }

/// Signed bucketing of a query-key offset i - j. Non-negative offsets use
/// buckets [0, n/2), negative offsets [n/2, n). Within a half, the first
/// quarter of buckets are exact offsets and the rest are log-spaced up to
/// max_distance; offsets at or beyond max_distance share the last bucket.
inline std::size_t relative_bucket(long long i_minus_j, std::size_t n_buckets, std::size_t max_distance) {
    const std::size_t half = n_buckets / 2;
    const std::size_t base = i_minus_j < 0 ? half : 0;
    const auto d = static_cast<std::size_t>(i_minus_j < 0 ? -i_minus_j : i_minus_j);
    const std::size_t exact = std::max<std::size_t>(half / 2, 1);
    if (d >= max_distance) return base + half - 1;
    if (d < exact) return base + d;
    const double ratio = std::log(static_cast<double>(d) / static_cast<double>(exact)) /
                         std::log(static_cast<double>(max_distance) / static_cast<double>(exact));
    const auto b = exact + static_cast<std::size_t>(ratio * static_cast<double>(half - exact));
    return base + std::min(b, half - 1);
}

template <typename T>
struct AttentionCapture {
    std::size_t layer_index = 0;  // 1-based
    BasicTensor<T> q, k, v;       // [batch x seq x H], post-projection
};

struct ForwardOptions {
    std::optional<std::size_t> capture_layer;  // 1-based
    bool train = false;                        // enables dropout
    std::mt19937_64* rng = nullptr;            // dropout source, required when train && dropout > 0
    bool stop_after_capture = false;           // skip layers past the capture (hidden is left undefined)
};

template <typename T>
struct ForwardResult {
    BasicTensor<T> hidden;  // [batch x seq x H]
    std::optional<AttentionCapture<T>> capture;
};

/// Key-padding mask for attention scores [B, A, S, S], broadcast over heads and queries.
inline numkit::Mask key_padding_mask(const textdata::TokenBatch& batch) {
    return numkit::Mask({batch.batch, 1, 1, batch.seq_len}, batch.mask);
}

/// Relative-position attention bias [A, S, S]; entry (h, i, j) depends only on i - j.
template <typename T>
BasicTensor<T> relative_bias(const EncoderWeights<T>& w, std::size_t seq_len) {
    const auto& c = w.config;
    std::vector<int> buckets(seq_len * seq_len);
    for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j)
            buckets[i * seq_len + j] = static_cast<int>(relative_bucket(
                static_cast<long long>(i) - static_cast<long long>(j), c.rel_buckets, c.rel_max_distance));
    auto gathered = numkit::embedding(w.relative_table, std::span<const int>(buckets), {seq_len, seq_len});
    return numkit::permute(gathered, {2, 0, 1});
}

namespace detail {

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t heads) {
    const std::size_t B = x.dim(0), S = x.dim(1), H = x.dim(2);
    return numkit::permute(numkit::reshape(x, {B, S, heads, H / heads}), {0, 2, 1, 3});
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x) {
    const std::size_t B = x.dim(0), A = x.dim(1), S = x.dim(2), D = x.dim(3);
    return numkit::reshape(numkit::permute(x, {0, 2, 1, 3}), {B, S, A * D});
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    return numkit::add(numkit::matmul(x, w), b);
}

template <typename T>
BasicTensor<T> maybe_dropout(const BasicTensor<T>& x, const ModelConfig& c, const ForwardOptions& opt) {
    if (!opt.train || c.dropout == 0.0) return x;
    if (!opt.rng) throw ContractError("forward: train mode with dropout needs an rng");
    return numkit::dropout(x, c.dropout, *opt.rng);
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const EncoderWeights<T>& w, const textdata::TokenBatch& batch, const ForwardOptions& opt = {}) {
    using namespace numkit;
    const auto& c = w.config;
    const std::size_t B = batch.batch, S = batch.seq_len, A = c.n_heads;
    if (B == 0 || batch.ids.size() != B * S || batch.mask.size() != B * S) {
        throw ShapeError("forward: malformed token batch");
    }
    if (S > c.max_seq_len) {
        throw ContractError("forward: seq_len " + std::to_string(S) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    for (int id : batch.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
            throw ContractError("forward: token id " + std::to_string(id) + " outside vocab of " + std::to_string(c.vocab_size));
        }
    }
    if (opt.capture_layer && (*opt.capture_layer < 1 || *opt.capture_layer > c.n_layers)) {
        throw ContractError("forward: capture_layer " + std::to_string(*opt.capture_layer) + " outside [1, " +
                            std::to_string(c.n_layers) + "]");
    }

    auto x = embedding(w.token_embedding, std::span<const int>(batch.ids), {B, S});
    std::optional<BasicTensor<T>> rel;
    if (c.pos_kind == PosKind::absolute) {
        std::vector<int> pos(S);
        std::iota(pos.begin(), pos.end(), 0);
        x = add(x, embedding(w.position_table, std::span<const int>(pos), {S}));
    } else {
        rel = relative_bias(w, S);
    }
    x = detail::maybe_dropout(x, c, opt);

    const Mask keys = key_padding_mask(batch);
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c.head_dim())));
    ForwardResult<T> result;
    for (std::size_t li = 0; li < c.n_layers; ++li) {
        const auto& L = w.layers[li];
        auto h = layer_norm(x, L.attn_norm_gain, L.attn_norm_bias, static_cast<T>(kLayerNormEps));
        auto q = detail::linear(h, L.wq, L.bq);
        auto k = detail::linear(h, L.wk, L.bk);
        auto v = detail::linear(h, L.wv, L.bv);
        if (opt.capture_layer && *opt.capture_layer == li + 1) {
            result.capture = AttentionCapture<T>{li + 1, q, k, v};
            if (opt.stop_after_capture) return result;
        }
        auto scores = scale(matmul_bt(detail::split_heads(q, A), detail::split_heads(k, A)), inv_sqrt_d);
        if (rel) scores = add(scores, *rel);
        auto probs = softmax_rows(scores, &keys);
        auto ctx = detail::merge_heads(matmul(probs, detail::split_heads(v, A)));
        x = add(x, detail::maybe_dropout(detail::linear(ctx, L.wo, L.bo), c, opt));

        auto h2 = layer_norm(x, L.ffn_norm_gain, L.ffn_norm_bias, static_cast<T>(kLayerNormEps));
        auto up = activation(detail::linear(h2, L.w_up, L.b_up), c.act);
        x = add(x, detail::maybe_dropout(detail::linear(up, L.w_down, L.b_down), c, opt));
    }
    result.hidden = layer_norm(x, w.final_norm_gain, w.final_norm_bias, static_cast<T>(kLayerNormEps));
    return result;
}

/// Converts every parameter to another scalar type (used for float64 gradient checks).
template <typename To, typename From>
EncoderWeights<To> cast_weights(const EncoderWeights<From>& w) {
    std::vector<BasicTensor<To>> tensors;
    for (const auto& [name, t] : w.named_parameters()) {
        std::vector<To> data(t.data().begin(), t.data().end());
        tensors.emplace_back(t.shape(), std::move(data), false);
    }
    return assemble_weights<To>(w.config, std::move(tensors));
}

}  // namespace relkd::encoder
