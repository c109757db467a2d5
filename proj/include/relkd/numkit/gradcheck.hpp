#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "relkd/numkit/tensor.hpp"

namespace relkd::numkit {

struct GradCheckOptions {
    double eps = 1e-3;
    std::size_t coordinates = 64;  // sampled; all coordinates are used when fewer exist
    std::uint64_t seed = 0;
};

/// Compares the analytic gradient of f at params against central finite
/// differences on a random coordinate sample. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// f must be a pure function of the current parameter values (re-seed any
/// dropout RNG inside it). Parameter gradients are overwritten.
template <typename T>
double finite_diff_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> params,
                         const GradCheckOptions& opts = {}) {
    if (!(opts.eps > 0.0)) throw ContractError("finite_diff_check: eps must be > 0");
    if (params.empty()) throw ContractError("finite_diff_check: no parameters");
    if (opts.coordinates < 64) throw ContractError("finite_diff_check: sample at least 64 coordinates");

    for (auto& p : params) {
        if (!p.requires_grad()) throw ContractError("finite_diff_check: parameter without requires_grad");
        p.zero_grad();
    }
    {
        auto loss = f();
        if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss at base point");
        backward(loss);
    }

    struct Coord {
        std::size_t param, index;
    };
    std::vector<Coord> all;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].numel(); ++i) all.push_back({p, i});
    std::vector<Coord> sample;
    if (all.size() <= opts.coordinates) {
        sample = all;
    } else {
        std::mt19937_64 rng(opts.seed);
        for (std::size_t i = 0; i < opts.coordinates; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (all.size() - i));
            std::swap(all[i], all[j]);
        }
        sample.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(opts.coordinates));
    }

    NoGradGuard no_grad;
    double worst = 0.0;
    for (const auto& c : sample) {
        auto data = params[c.param].mutable_data();
        const T original = data[c.index];
        data[c.index] = static_cast<T>(original + opts.eps);
        const double up = f().item();
        data[c.index] = static_cast<T>(original - opts.eps);
        const double down = f().item();
        data[c.index] = original;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_check: non-finite loss at probe point");
        }
        const double numeric = (up - down) / (2.0 * opts.eps);
        const double analytic = params[c.param].grad()[c.index];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    return worst;
}

}  // namespace relkd::numkit
