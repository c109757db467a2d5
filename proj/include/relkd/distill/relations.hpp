#pragma once

// Self-attention relation transfer: Q-Q, K-K and V-V scaled dot-product
// relations, split into A_r relation heads so teacher and student head counts
// need not match, compared with a masked KL divergence.

#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "relkd/encoder/model.hpp"
#include "relkd/util/kvconfig.hpp"

namespace relkd::distill {

using numkit::BasicTensor;

struct RelationConfig {
    std::size_t teacher_layer = 1;  // 1-based; the student always uses its last layer
    std::size_t relation_heads = 48;
    double w_qq = 1.0 / 3.0;
    double w_kk = 1.0 / 3.0;
    double w_vv = 1.0 / 3.0;

    void validate() const {
        if (teacher_layer < 1) throw ConfigError("relation config: teacher_layer must be >= 1");
        if (relation_heads < 1) throw ConfigError("relation config: relation_heads must be >= 1");
        if (!(w_qq >= 0 && w_kk >= 0 && w_vv >= 0) || !(w_qq > 0 || w_kk > 0 || w_vv > 0)) {
            throw ConfigError("relation config: pair weights must be >= 0 with at least one positive");
        }
    }

    /// Both models' hidden sizes must split evenly into relation heads.
    void check_compatible(const encoder::ModelConfig& teacher, const encoder::ModelConfig& student) const {
        validate();
        if (teacher_layer > teacher.n_layers) {
            throw ConfigError("relation config: teacher_layer " + std::to_string(teacher_layer) + " exceeds teacher depth " +
                              std::to_string(teacher.n_layers));
        }
        for (auto [who, h] : {std::pair{"teacher", teacher.hidden}, std::pair{"student", student.hidden}}) {
            if (h % relation_heads != 0) {
                throw ConfigError(std::string("relation_heads ") + std::to_string(relation_heads) + " does not divide " +
                                  who + " hidden " + std::to_string(h));
            }
        }
        if (teacher.vocab_size != student.vocab_size) {
            throw ConfigError("teacher and student vocab sizes differ (" + std::to_string(teacher.vocab_size) + " vs " +
                              std::to_string(student.vocab_size) + ")");
        }
    }
};

inline RelationConfig relation_config_from_kv(util::KvConfig kv) {
    RelationConfig c;
    c.teacher_layer = kv.get<std::size_t>("teacher_layer", c.teacher_layer);
    c.relation_heads = kv.get<std::size_t>("relation_heads", c.relation_heads);
    c.w_qq = kv.get<double>("w_qq", c.w_qq);
    c.w_kk = kv.get<double>("w_kk", c.w_kk);
    c.w_vv = kv.get<double>("w_vv", c.w_vv);
    kv.ensure_consumed();
    c.validate();
    return c;
}

inline nlohmann::json to_json(const RelationConfig& c) {
    return {{"teacher_layer", c.teacher_layer},
            {"relation_heads", c.relation_heads},
            {"w_qq", c.w_qq},
            {"w_kk", c.w_kk},
            {"w_vv", c.w_vv}};
}

/// [B, S, H] -> [B, A_r, S, H/A_r]: each token vector is cut into A_r contiguous chunks.
template <typename T>
BasicTensor<T> to_relation_heads(const BasicTensor<T>& x, std::size_t relation_heads) {
    if (x.rank() != 3) throw ShapeError("to_relation_heads: expected [batch x seq x hidden], got " + numkit::shape_str(x.shape()));
    const std::size_t B = x.dim(0), S = x.dim(1), H = x.dim(2);
    if (relation_heads == 0 || H % relation_heads != 0) {
        throw ShapeError("to_relation_heads: hidden " + std::to_string(H) + " is not divisible by " +
                         std::to_string(relation_heads) + " relation heads");
    }
    return numkit::permute(numkit::reshape(x, {B, S, relation_heads, H / relation_heads}), {0, 2, 1, 3});
}

/// Per (batch, head): Xh Xh^T / sqrt(d_r).
template <typename T>
BasicTensor<T> relation_logits(const BasicTensor<T>& xh) {
    if (xh.rank() != 4 || xh.dim(3) == 0) throw ShapeError("relation_logits: expected [batch x heads x seq x d_r]");
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(xh.dim(3))));
    return numkit::matmul_bt(xh, xh, inv);
}

/// KL(teacher || student) between row-softmaxed relation logits [B, A, S, S],
/// averaged over every valid (batch, head, query) row. Keys outside the
/// validity mask [B x S] are removed from the softmax support. The teacher
/// side is treated as a constant.
template <typename T>
BasicTensor<T> relation_kl(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits,
                           const std::vector<std::uint8_t>& valid) {
    using namespace numkit;
    namespace detail = numkit::detail;
    if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 4) {
        throw ShapeError("relation_kl: teacher " + shape_str(teacher_logits.shape()) + " vs student " +
                         shape_str(student_logits.shape()));
    }
    const std::size_t B = teacher_logits.dim(0), A = teacher_logits.dim(1), S = teacher_logits.dim(2);
    if (teacher_logits.dim(3) != S) throw ShapeError("relation_kl: logits must be square in the last two axes");
    if (valid.size() != B * S) throw ShapeError("relation_kl: mask must be [batch x seq]");

    // Items with no valid position keep a full key set so softmax stays defined; their rows get zero weight.
    std::vector<std::uint8_t> keys(valid);
    std::size_t valid_rows = 0;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < S; ++i) n += valid[b * S + i] ? 1 : 0;
        if (n == 0) std::fill(keys.begin() + static_cast<std::ptrdiff_t>(b * S), keys.begin() + static_cast<std::ptrdiff_t>((b + 1) * S), 1);
        valid_rows += n;
    }
    if (valid_rows == 0) throw ContractError("relation_kl: every query row is masked");
    const Mask key_mask({B, 1, 1, S}, keys);

    // Teacher and student row distributions, then one fused pass for value and gradient.
    std::vector<T> p, q;
    std::vector<double> t_norm, t_max, s_norm, s_max;
    std::vector<std::uint8_t> keep;
    numkit::detail::softmax_forward(teacher_logits, &key_mask, p, t_norm, t_max, keep);
    numkit::detail::softmax_forward(student_logits, &key_mask, q, s_norm, s_max, keep);
    const double row_weight = 1.0 / (static_cast<double>(A) * static_cast<double>(valid_rows));
    const T* td = teacher_logits.data().data();
    const T* sd = student_logits.data().data();
    std::vector<double> weight(B * A * S, 0.0);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < A; ++h)
            for (std::size_t i = 0; i < S; ++i) {
                if (!valid[b * S + i]) continue;
                const std::size_t r = (b * A + h) * S + i;
                weight[r] = row_weight;
                double kl = 0.0;
                for (std::size_t j = r * S; j < (r + 1) * S; ++j) {
                    if (!keep[j] || p[j] == T(0)) continue;
                    const double log_p = static_cast<double>(td[j]) - t_max[r] - t_norm[r];
                    const double log_q = static_cast<double>(sd[j]) - s_max[r] - s_norm[r];
                    kl += static_cast<double>(p[j]) * (log_p - log_q);
                }
                total += row_weight * kl;
            }
    return detail::make_result<T>("relation_kl", Shape{}, {static_cast<T>(total)}, {teacher_logits.detach(), student_logits},
                                  [S, p = std::move(p), q = std::move(q), keep = std::move(keep),
                                   weight = std::move(weight)](detail::Node<T>& self) {
                                      // d KL / d s_j = q_j - p_j per row, scaled by the row weight.
                                      auto& g = detail::parent_grad(self, 1);
                                      const double gy = static_cast<double>(self.grad[0]);
                                      for (std::size_t r = 0; r < weight.size(); ++r) {
                                          if (weight[r] == 0.0) continue;
                                          const double k = gy * weight[r];
                                          for (std::size_t j = r * S; j < (r + 1) * S; ++j) {
                                              if (keep[j]) g[j] += static_cast<T>(k * (static_cast<double>(q[j]) - p[j]));
                                          }
                                      }
                                  });
}

template <typename T>
struct DistillLoss {
    BasicTensor<T> total, qq, kk, vv;
};

/// Weighted sum of the Q-Q, K-K and V-V relation KLs. All three terms are
/// always computed so the breakdown can be logged regardless of weights.
template <typename T>
DistillLoss<T> distill_loss(const encoder::AttentionCapture<T>& teacher, const encoder::AttentionCapture<T>& student,
                            const RelationConfig& cfg, const std::vector<std::uint8_t>& valid) {
    cfg.validate();
    auto term = [&](const BasicTensor<T>& t, const BasicTensor<T>& s) {
        if (t.rank() != 3 || s.rank() != 3 || t.dim(0) != s.dim(0) || t.dim(1) != s.dim(1)) {
            throw ShapeError("distill_loss: teacher capture " + numkit::shape_str(t.shape()) + " vs student " +
                             numkit::shape_str(s.shape()));
        }
        auto tl = relation_logits(to_relation_heads(t.detach(), cfg.relation_heads));
        auto sl = relation_logits(to_relation_heads(s, cfg.relation_heads));
        return relation_kl(tl, sl, valid);
    };
    DistillLoss<T> out;
    out.qq = term(teacher.q, student.q);
    out.kk = term(teacher.k, student.k);
    out.vv = term(teacher.v, student.v);
    out.total = numkit::add(numkit::add(numkit::scale(out.qq, static_cast<T>(cfg.w_qq)), numkit::scale(out.kk, static_cast<T>(cfg.w_kk))),
                            numkit::scale(out.vv, static_cast<T>(cfg.w_vv)));
    return out;
}

/// Teacher capture at the configured layer: no gradient, no dropout, later layers skipped.
template <typename T>
encoder::AttentionCapture<T> teacher_capture(const encoder::EncoderWeights<T>& teacher, const textdata::TokenBatch& batch,
                                             std::size_t layer) {
    numkit::NoGradGuard guard;
    encoder::ForwardOptions opt;
    opt.capture_layer = layer;
    opt.stop_after_capture = true;
    return *encoder::forward(teacher, batch, opt).capture;
}

/// Student capture at its last layer (the remainder of the stack does not affect the loss).
template <typename T>
encoder::AttentionCapture<T> student_capture(const encoder::EncoderWeights<T>& student, const textdata::TokenBatch& batch,
                                             bool train = false, std::mt19937_64* rng = nullptr) {
    encoder::ForwardOptions opt;
    opt.capture_layer = student.config.n_layers;
    opt.stop_after_capture = true;
    opt.train = train;
    opt.rng = rng;
    return *encoder::forward(student, batch, opt).capture;
}

/// End-to-end loss for one batch.
template <typename T>
DistillLoss<T> batch_distill_loss(const encoder::EncoderWeights<T>& teacher, const encoder::EncoderWeights<T>& student,
                                  const RelationConfig& cfg, const textdata::TokenBatch& batch, bool train = false,
                                  std::mt19937_64* rng = nullptr) {
    auto t = teacher_capture(teacher, batch, cfg.teacher_layer);
    auto s = student_capture(student, batch, train, rng);
    return distill_loss(t, s, cfg, batch.mask);
}

}  // namespace relkd::distill
