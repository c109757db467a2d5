#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "relkd/encoder/model.hpp"
#include "relkd/util/kvconfig.hpp"

namespace relkd::trainer {

using numkit::BasicTensor;
using ParamList = std::vector<std::pair<std::string, BasicTensor<float>>>;

struct TrainConfig {
    double lr_peak = 5.5e-4;
    std::size_t warmup_steps = 4000;
    std::size_t total_steps = 200000;
    double beta1 = 0.9;
    double beta2 = 0.999;  // 0.98 suits RoBERTa-style teachers
    double eps = 1e-6;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables clipping
    std::size_t batch_size = 256;
    std::size_t seq_len = 128;
    std::size_t checkpoint_every = 10000;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
        if (total_steps == 0) fail("total_steps must be >= 1");
        if (!(warmup_steps > 0 && warmup_steps < total_steps)) fail("need 0 < warmup_steps < total_steps");
        if (!(lr_peak > 0)) fail("lr_peak must be > 0");
        if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) fail("betas must lie in (0,1)");
        if (!(eps > 0)) fail("eps must be > 0");
        if (weight_decay < 0) fail("weight_decay must be >= 0");
        if (batch_size == 0) fail("batch_size must be >= 1");
        if (seq_len < 3) fail("seq_len must be >= 3");
        if (checkpoint_every == 0) fail("checkpoint_every must be >= 1");
    }
};

inline TrainConfig train_config_from_kv(util::KvConfig kv) {
    TrainConfig c;
    c.lr_peak = kv.get<double>("lr_peak", c.lr_peak);
    c.warmup_steps = kv.get<std::size_t>("warmup_steps", c.warmup_steps);
    c.total_steps = kv.get<std::size_t>("total_steps", c.total_steps);
    c.beta1 = kv.get<double>("beta1", c.beta1);
    c.beta2 = kv.get<double>("beta2", c.beta2);
    c.eps = kv.get<double>("eps", c.eps);
    c.weight_decay = kv.get<double>("weight_decay", c.weight_decay);
    c.clip_norm = kv.get<double>("clip_norm", c.clip_norm);
    c.batch_size = kv.get<std::size_t>("batch_size", c.batch_size);
    c.seq_len = kv.get<std::size_t>("seq_len", c.seq_len);
    c.checkpoint_every = kv.get<std::size_t>("checkpoint_every", c.checkpoint_every);
    c.seed = kv.get<std::uint64_t>("seed", c.seed);
    kv.ensure_consumed();
    c.validate();
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr_peak", c.lr_peak},       {"warmup_steps", c.warmup_steps}, {"total_steps", c.total_steps},
            {"beta1", c.beta1},           {"beta2", c.beta2},               {"eps", c.eps},
            {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm},   {"batch_size", c.batch_size},
            {"seq_len", c.seq_len},       {"checkpoint_every", c.checkpoint_every}, {"seed", c.seed}};
}

/// Linear warmup from 0 to lr_peak, then linear decay to 0 at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& c) {
    if (step > c.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " + std::to_string(c.total_steps));
    }
    if (step < c.warmup_steps) return c.lr_peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    return c.lr_peak * static_cast<double>(c.total_steps - step) / static_cast<double>(c.total_steps - c.warmup_steps);
}

struct AdamState {
    std::vector<std::vector<float>> m, v;
    std::uint64_t step = 0;

    AdamState() = default;
    explicit AdamState(const ParamList& params) {
        for (const auto& [name, t] : params) {
            m.emplace_back(t.numel(), 0.0f);
            v.emplace_back(t.numel(), 0.0f);
        }
    }
    template <typename W>
    explicit AdamState(const W& weights) : AdamState(weights.named_parameters()) {}
};

/// Thrown when a gradient is not finite; the step is abandoned before any parameter changes.
class NonFiniteGradError : public NumericError {
public:
    NonFiniteGradError(const std::string& tensor)
        : NumericError("non-finite gradient in " + tensor + "; step aborted"), tensor_(tensor) {}
    const std::string& tensor() const { return tensor_; }

private:
    std::string tensor_;
};

/// Global L2 norm of all gradients, accumulated in double in parameter order.
inline double grad_norm(const ParamList& params) {
    double s = 0;
    for (const auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        for (float g : t.grad()) s += static_cast<double>(g) * g;
    }
    return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(const ParamList& params, double max_norm) {
    const double norm = grad_norm(params);
    if (max_norm > 0 && norm > max_norm) {
        const auto k = static_cast<float>(max_norm / norm);
        for (const auto& [name, t] : params) {
            if (!t.requires_grad()) continue;
            auto copy = t;
            for (float& g : copy.mutable_grad()) g *= k;
        }
    }
    return norm;
}

/// One AdamW update: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p), with
/// decay skipped for gains and biases.
inline void adamw_step(const ParamList& params, AdamState& state, double lr, const TrainConfig& c) {
    if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
    for (const auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        for (float g : t.grad()) {
            if (!std::isfinite(g)) throw NonFiniteGradError(name);
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto t = params[i].second;
        if (!t.requires_grad()) continue;
        if (state.m[i].size() != t.numel()) throw ContractError("adamw_step: moment shape mismatch for " + params[i].first);
        const double wd = encoder::decays(params[i].first) ? c.weight_decay : 0.0;
        const auto& g = t.grad();
        auto p = t.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double update = (mk / bc1) / (std::sqrt(vk / bc2) + c.eps) + wd * p[k];
            p[k] = static_cast<float>(p[k] - lr * update);
        }
    }
}

template <typename W>
void adamw_step(const W& weights, AdamState& state, double lr, const TrainConfig& c) {
    adamw_step(weights.named_parameters(), state, lr, c);
}

}  // namespace relkd::trainer
