#pragma once

// Differentiable primitives. Every op validates shapes, checks its output for
// NaN/Inf, and records a backward closure when grad mode is on and at least
// one input requires grad. Reductions accumulate in double and in a fixed
// order, so results are bit-stable for identical inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relkd/numkit/tensor.hpp"

namespace relkd::numkit {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> bw) {
    // x * 0 is NaN exactly when x is NaN or Inf; this form vectorizes.
    T probe = T(0);
    for (const T& v : data) probe += v * T(0);
    if (probe != probe) throw NumericError(std::string("op '") + op + "' produced a non-finite value");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->leaf = false;
    node->op = op;
    bool record = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) record = record || in.requires_grad();
    }
    if (record) {
        node->requires_grad = true;  // grad buffer is allocated by backward()
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(bw);
    }
    return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
    return self.parents[i]->requires_grad;
}

template <typename T>
std::vector<T>& parent_grad(Node<T>& self, std::size_t i) {
    return self.parents[i]->grad;
}

inline bool is_suffix(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Elementwise transcendental kernels run on fixed-size blocks staged through
// an aligned scratch buffer. Eigen then never peels by heap address, so the
// split between vector and scalar code (and thus every bit of the result)
// depends only on n.
inline constexpr std::size_t kBlock = 1024;

template <typename T>
using AlignedArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;

template <typename T, std::size_t Slot>
T* scratch() {
    alignas(64) static thread_local T buf[kBlock];
    return buf;
}

/// out[i] = exp(in[i] - shift).
template <typename T>
void vexp_shifted(const T* in, T shift, T* out, std::size_t n) {
    T* b = scratch<T, 0>();
    for (std::size_t o = 0; o < n; o += kBlock) {
        const std::size_t len = std::min(kBlock, n - o);
        AlignedArr<T> a(b, static_cast<Eigen::Index>(len));
        for (std::size_t i = 0; i < len; ++i) b[i] = in[o + i] - shift;
        a = a.exp();
        std::copy_n(b, len, out + o);
    }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

/// value[i] = gelu(in[i]); deriv[i] = gelu'(in[i]) when deriv is non-null.
template <typename T>
void vgelu(const T* in, T* value, T* deriv, std::size_t n) {
    T* bx = scratch<T, 0>();
    T* bt = scratch<T, 1>();
    const T c = static_cast<T>(kGeluC), k = static_cast<T>(kGeluK);
    for (std::size_t o = 0; o < n; o += kBlock) {
        const std::size_t len = std::min(kBlock, n - o);
        const auto m = static_cast<Eigen::Index>(len);
        AlignedArr<T> x(bx, m), t(bt, m);
        std::copy_n(in + o, len, bx);
        t = (c * (x + k * x * x * x)).tanh();
        if (value) {
            for (std::size_t i = 0; i < len; ++i) value[o + i] = T(0.5) * bx[i] * (T(1) + bt[i]);
        }
        if (deriv) {
            for (std::size_t i = 0; i < len; ++i) {
                const T xi = bx[i], ti = bt[i];
                deriv[o + i] = T(0.5) * (T(1) + ti) + T(0.5) * xi * (T(1) - ti * ti) * c * (T(1) + T(3) * k * xi * xi);
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] x b[k, n] (b shared across the batch) or
/// a[..., m, k] x b[..., k, n] (same leading dims).
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    using namespace detail;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    };
    if (as.size() < 2 || bs.size() < 2) throw mismatch();
    const std::size_t m = as[as.size() - 2], k = as.back();
    if (bs[bs.size() - 2] != k) throw mismatch();
    const std::size_t n = bs.back();
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);

    if (bs.size() == 2) {
        const std::size_t rows = a.numel() / k;
        std::vector<T> out(rows * n);
        MMap<T>(out.data(), rows, n).noalias() =
            CMap<T>(a.data().data(), rows, k) * CMap<T>(b.data().data(), k, n);
        return make_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                              [rows, k, n](Node<T>& self) {
                                  CMap<T> g(self.grad.data(), rows, n);
                                  if (wants_grad(self, 0)) {
                                      CMap<T> bm(self.parents[1]->data.data(), k, n);
                                      MMap<T>(parent_grad(self, 0).data(), rows, k).noalias() +=
                                          g * bm.transpose();
                                  }
                                  if (wants_grad(self, 1)) {
                                      CMap<T> am(self.parents[0]->data.data(), rows, k);
                                      MMap<T>(parent_grad(self, 1).data(), k, n).noalias() +=
                                          am.transpose() * g;
                                  }
                              });
    }

    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) throw mismatch();
    const std::size_t batch = a.numel() / (m * k);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        MMap<T>(out.data() + i * m * n, m, n).noalias() =
            CMap<T>(a.data().data() + i * m * k, m, k) * CMap<T>(b.data().data() + i * k * n, k, n);
    }
    return make_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                          [batch, m, k, n](Node<T>& self) {
                              const T* ad = self.parents[0]->data.data();
                              const T* bd = self.parents[1]->data.data();
                              for (std::size_t i = 0; i < batch; ++i) {
                                  CMap<T> g(self.grad.data() + i * m * n, m, n);
                                  if (wants_grad(self, 0)) {
                                      MMap<T>(parent_grad(self, 0).data() + i * m * k, m, k).noalias() +=
                                          g * CMap<T>(bd + i * k * n, k, n).transpose();
                                  }
                                  if (wants_grad(self, 1)) {
                                      MMap<T>(parent_grad(self, 1).data() + i * k * n, k, n).noalias() +=
                                          CMap<T>(ad + i * m * k, m, k).transpose() * g;
                                  }
                              }
                          });
}

/// alpha * a x b^T without materializing the transpose:
/// a[..., m, k] x b[n, k]^T (b shared) or a[..., m, k] x b[..., n, k]^T.
template <typename T>
BasicTensor<T> matmul_bt(const BasicTensor<T>& a, const BasicTensor<T>& b, T alpha = T(1)) {
    using namespace detail;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    auto mismatch = [&] {
        return ShapeError("matmul_bt: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    };
    if (as.size() < 2 || bs.size() < 2) throw mismatch();
    const std::size_t m = as[as.size() - 2], k = as.back();
    if (bs.back() != k) throw mismatch();
    const std::size_t n = bs[bs.size() - 2];
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);

    if (bs.size() == 2) {
        const std::size_t rows = a.numel() / k;
        std::vector<T> out(rows * n);
        MMap<T>(out.data(), rows, n).noalias() =
            alpha * (CMap<T>(a.data().data(), rows, k) * CMap<T>(b.data().data(), n, k).transpose());
        return make_result<T>("matmul_bt", std::move(out_shape), std::move(out), {a, b},
                              [rows, k, n, alpha](Node<T>& self) {
                                  CMap<T> g(self.grad.data(), rows, n);
                                  if (wants_grad(self, 0)) {
                                      CMap<T> bm(self.parents[1]->data.data(), n, k);
                                      MMap<T>(parent_grad(self, 0).data(), rows, k).noalias() += alpha * (g * bm);
                                  }
                                  if (wants_grad(self, 1)) {
                                      CMap<T> am(self.parents[0]->data.data(), rows, k);
                                      MMap<T>(parent_grad(self, 1).data(), n, k).noalias() += alpha * (g.transpose() * am);
                                  }
                              });
    }

    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) throw mismatch();
    const std::size_t batch = a.numel() / (m * k);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        MMap<T>(out.data() + i * m * n, m, n).noalias() =
            alpha * (CMap<T>(a.data().data() + i * m * k, m, k) * CMap<T>(b.data().data() + i * n * k, n, k).transpose());
    }
    return make_result<T>("matmul_bt", std::move(out_shape), std::move(out), {a, b},
                          [batch, m, k, n, alpha](Node<T>& self) {
                              const T* ad = self.parents[0]->data.data();
                              const T* bd = self.parents[1]->data.data();
                              for (std::size_t i = 0; i < batch; ++i) {
                                  CMap<T> g(self.grad.data() + i * m * n, m, n);
                                  if (wants_grad(self, 0)) {
                                      MMap<T>(parent_grad(self, 0).data() + i * m * k, m, k).noalias() +=
                                          alpha * (g * CMap<T>(bd + i * n * k, n, k));
                                  }
                                  if (wants_grad(self, 1)) {
                                      MMap<T>(parent_grad(self, 1).data() + i * n * k, n, k).noalias() +=
                                          alpha * (g.transpose() * CMap<T>(ad + i * m * k, m, k));
                                  }
                              }
                          });
}

/// General axis permutation; out.shape[i] = x.shape[axes[i]].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
    using namespace detail;
    const Shape& xs = x.shape();
    const std::size_t r = xs.size();
    if (axes.size() != r) throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for rank " + std::to_string(r));
    std::vector<bool> used(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (axes[i] >= r || used[axes[i]]) throw ShapeError("permute: invalid axis list");
        used[axes[i]] = true;
        out_shape[i] = xs[axes[i]];
    }
    const auto in_strides = strides_of(xs);
    if (axes.back() == r - 1 && r > 1) {
        // Last axis stays in place: move contiguous runs instead of single elements.
        const std::size_t run = xs.back();
        const std::size_t runs = run == 0 ? 0 : x.numel() / run;
        std::vector<std::size_t> src(runs);
        std::vector<std::size_t> idx(r - 1, 0);
        for (std::size_t o = 0; o < runs; ++o) {
            std::size_t off = 0;
            for (std::size_t d = 0; d + 1 < r; ++d) off += idx[d] * in_strides[axes[d]];
            src[o] = off;
            for (std::size_t d = r - 1; d-- > 0;) {
                if (++idx[d] < out_shape[d]) break;
                idx[d] = 0;
            }
        }
        std::vector<T> out(x.numel());
        const T* xd = x.data().data();
        for (std::size_t o = 0; o < runs; ++o) std::copy_n(xd + src[o], run, out.data() + o * run);
        return make_result<T>("permute", std::move(out_shape), std::move(out), {x},
                              [run, src = std::move(src)](Node<T>& self) {
                                  T* g = parent_grad(self, 0).data();
                                  const T* gy = self.grad.data();
                                  for (std::size_t o = 0; o < src.size(); ++o)
                                      for (std::size_t j = 0; j < run; ++j) g[src[o] + j] += gy[o * run + j];
                              });
    }
    // For each output element, the flat index into x.
    std::vector<std::size_t> src(x.numel());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_strides[axes[d]];
        src[o] = off;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<T> out(src.size());
    const T* xd = x.data().data();
    for (std::size_t o = 0; o < src.size(); ++o) out[o] = xd[src[o]];
    return make_result<T>("permute", std::move(out_shape), std::move(out), {x},
                          [src = std::move(src)](Node<T>& self) {
                              auto& g = parent_grad(self, 0);
                              for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                          });
}

/// Swaps the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose: rank < 2");
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    using namespace detail;
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Binary op where b's shape is a suffix of a's shape (b broadcast over the
// leading axes of a). fwd(x, y) -> z; dfa/dfb give partials.
template <typename T, typename Fwd, typename DA, typename DB>
BasicTensor<T> broadcast_binary(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b,
                                Fwd fwd, DA da, DB db) {
    if (!is_suffix(a.shape(), b.shape())) {
        throw ShapeError(std::string(op) + ": shape " + shape_str(b.shape()) +
                         " does not broadcast onto " + shape_str(a.shape()));
    }
    const std::size_t n = a.numel(), nb = b.numel();
    std::vector<T> out(n);
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    for (std::size_t o = 0; o < n; o += nb)
        for (std::size_t j = 0; j < nb; ++j) out[o + j] = fwd(ad[o + j], bd[j]);
    return make_result<T>(op, a.shape(), std::move(out), {a, b}, [n, nb, da, db](Node<T>& self) {
        const T* x = self.parents[0]->data.data();
        const T* y = self.parents[1]->data.data();
        const T* gy = self.grad.data();
        if (wants_grad(self, 0)) {
            T* g = parent_grad(self, 0).data();
            for (std::size_t o = 0; o < n; o += nb)
                for (std::size_t j = 0; j < nb; ++j) g[o + j] += gy[o + j] * da(x[o + j], y[j]);
        }
        if (wants_grad(self, 1)) {
            T* g = parent_grad(self, 1).data();
            for (std::size_t o = 0; o < n; o += nb)
                for (std::size_t j = 0; j < nb; ++j) g[j] += gy[o + j] * db(x[o + j], y[j]);
        }
    });
}

}  // namespace detail

/// a + b, with b broadcast over a's leading axes when b.shape is a suffix of a.shape.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T c) {
    using namespace detail;
    std::vector<T> out(x.data().begin(), x.data().end());
    for (T& v : out) v *= c;
    return make_result<T>("scale", x.shape(), std::move(out), {x}, [c](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

/// Sum of all elements, as a [1] tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    using namespace detail;
    double acc = 0.0;
    for (const T& v : x.data()) acc += static_cast<double>(v);
    return make_result<T>("sum", Shape{1}, std::vector<T>{static_cast<T>(acc)}, {x}, [](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        const T s = self.grad[0];
        for (T& v : g) v += s;
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Softmax family

/// Boolean mask aligned with a tensor's shape; each axis either matches the
/// tensor or is 1 (broadcast). keep[i] != 0 marks a participating entry.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> keep;

    Mask() = default;
    Mask(Shape s, std::vector<std::uint8_t> k) : shape(std::move(s)), keep(std::move(k)) {
        if (numel(shape) != keep.size()) throw ShapeError("mask: shape " + shape_str(shape) + " vs " + std::to_string(keep.size()) + " entries");
    }
};

namespace detail {

// For a tensor with the given shape viewed as rows of its last axis, returns
// the mask offset of each row's first element and the mask stride along a row.
inline std::pair<std::vector<std::size_t>, std::size_t> mask_row_offsets(const Shape& xs, const Mask& m) {
    if (m.shape.size() != xs.size()) {
        throw ShapeError("mask rank " + std::to_string(m.shape.size()) + " vs tensor rank " + std::to_string(xs.size()));
    }
    for (std::size_t d = 0; d < xs.size(); ++d) {
        if (m.shape[d] != xs[d] && m.shape[d] != 1) {
            throw ShapeError("mask " + shape_str(m.shape) + " does not broadcast onto " + shape_str(xs));
        }
    }
    auto ms = strides_of(m.shape);
    for (std::size_t d = 0; d < xs.size(); ++d) {
        if (m.shape[d] == 1) ms[d] = 0;
    }
    const std::size_t r = xs.size();
    const std::size_t n = xs.back();
    const std::size_t rows = numel(xs) / n;
    std::vector<std::size_t> offs(rows);
    std::vector<std::size_t> idx(r - 1, 0);
    for (std::size_t row = 0; row < rows; ++row) {
        std::size_t off = 0;
        for (std::size_t d = 0; d + 1 < r; ++d) off += idx[d] * ms[d];
        offs[row] = off;
        for (std::size_t d = r - 1; d-- > 0;) {
            if (++idx[d] < xs[d]) break;
            idx[d] = 0;
        }
    }
    return {std::move(offs), ms[r - 1]};
}

// Row-wise softmax. Fills probs (masked entries 0) and per-row log normaliser.
template <typename T>
void softmax_forward(const BasicTensor<T>& x, const Mask* mask, std::vector<T>& probs,
                     std::vector<double>& log_norm, std::vector<double>& row_max,
                     std::vector<std::uint8_t>& keep_flat) {
    if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("softmax: empty last axis");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    keep_flat.assign(x.numel(), 1);
    if (mask) {
        auto [offs, stride] = mask_row_offsets(x.shape(), *mask);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) keep_flat[r * n + j] = mask->keep[offs[r] + j * stride] != 0;
        }
    }
    probs.assign(x.numel(), T(0));
    log_norm.assign(rows, 0.0);
    row_max.assign(rows, 0.0);
    const T* xd = x.data().data();
    std::vector<T> shifted(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xd + r * n;
        const std::uint8_t* kr = keep_flat.data() + r * n;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (kr[j] && (!any || xr[j] > mx)) {
                mx = xr[j];
                any = true;
            }
        }
        if (!any) throw DegenerateRowError("softmax: row " + std::to_string(r) + " is fully masked");
        // Masked entries are staged as mx so exp stays finite, then zeroed.
        for (std::size_t j = 0; j < n; ++j) shifted[j] = kr[j] ? xr[j] : mx;
        T* pr = probs.data() + r * n;
        vexp_shifted(shifted.data(), mx, pr, n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!kr[j]) pr[j] = T(0);
            z += static_cast<double>(pr[j]);
        }
        const T inv = static_cast<T>(1.0 / z);
        for (std::size_t j = 0; j < n; ++j) pr[j] *= inv;
        row_max[r] = static_cast<double>(mx);
        log_norm[r] = std::log(z);
    }
}

}  // namespace detail

/// Softmax over the last axis. Masked entries come out exactly 0.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const Mask* mask = nullptr) {
    using namespace detail;
    std::vector<T> probs;
    std::vector<double> log_norm, row_max;
    std::vector<std::uint8_t> keep;
    softmax_forward(x, mask, probs, log_norm, row_max, keep);
    const std::size_t n = x.shape().back();
    return make_result<T>("softmax_rows", x.shape(), std::move(probs), {x}, [n](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        const std::size_t rows = self.data.size() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += static_cast<T>(y[j] * (gy[j] - dot));
        }
    });
}

/// Log-softmax over the last axis. Masked entries are set to 0 (not -inf) and
/// receive no gradient; callers weight them out.
template <typename T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x, const Mask* mask = nullptr) {
    using namespace detail;
    std::vector<T> probs;
    std::vector<double> log_norm, row_max;
    std::vector<std::uint8_t> keep;
    softmax_forward(x, mask, probs, log_norm, row_max, keep);
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<T> out(x.numel(), T(0));
    const T* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            if (keep[r * n + j]) out[r * n + j] = static_cast<T>(static_cast<double>(xd[r * n + j]) - row_max[r] - log_norm[r]);
        }
    }
    return make_result<T>("log_softmax_rows", x.shape(), std::move(out), {x},
                          [n, probs = std::move(probs), keep = std::move(keep)](Node<T>& self) {
                              auto& g = parent_grad(self, 0);
                              const std::size_t rows = self.data.size() / n;
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* gy = self.grad.data() + r * n;
                                  double gs = 0.0;
                                  for (std::size_t j = 0; j < n; ++j) {
                                      if (keep[r * n + j]) gs += gy[j];
                                  }
                                  for (std::size_t j = 0; j < n; ++j) {
                                      if (keep[r * n + j]) g[r * n + j] += static_cast<T>(gy[j] - probs[r * n + j] * gs);
                                  }
                              }
                          });
}

/// Mean negative log-likelihood of targets[i] under softmax(logits[i, :]).
/// Rows with target < 0 are ignored.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
    using namespace detail;
    if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t rows = logits.dim(0), n = logits.dim(1);
    std::vector<T> probs;
    std::vector<double> log_norm, row_max;
    std::vector<std::uint8_t> keep;
    softmax_forward(logits, nullptr, probs, log_norm, row_max, keep);
    double acc = 0.0;
    std::size_t count = 0;
    std::vector<int> tg(targets.begin(), targets.end());
    for (std::size_t r = 0; r < rows; ++r) {
        if (tg[r] < 0) continue;
        if (static_cast<std::size_t>(tg[r]) >= n) throw ContractError("cross_entropy: target id out of range");
        acc += -(static_cast<double>(logits.data()[r * n + tg[r]]) - row_max[r] - log_norm[r]);
        ++count;
    }
    if (count == 0) throw ContractError("cross_entropy: no target rows");
    const T inv = static_cast<T>(1.0 / static_cast<double>(count));
    return make_result<T>("cross_entropy", Shape{1}, std::vector<T>{static_cast<T>(acc / count)}, {logits},
                          [n, inv, tg = std::move(tg), probs = std::move(probs)](Node<T>& self) {
                              auto& g = parent_grad(self, 0);
                              const T s = self.grad[0] * inv;
                              for (std::size_t r = 0; r < tg.size(); ++r) {
                                  if (tg[r] < 0) continue;
                                  for (std::size_t j = 0; j < n; ++j) g[r * n + j] += s * probs[r * n + j];
                                  g[r * n + tg[r]] -= s;
                              }
                          });
}

// ---------------------------------------------------------------------------
// Normalisation and activations

/// Per-vector standardisation over the last axis, then gain * xhat + bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
    using namespace detail;
    if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("layer_norm: empty last axis");
    const std::size_t h = x.shape().back();
    if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
        throw ShapeError("layer_norm: x " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
    }
    const std::size_t rows = x.numel() / h;
    std::vector<T> xhat(x.numel()), out(x.numel());
    std::vector<T> inv_std(rows);
    const T* xd = x.data().data();
    const T* gd = gain.data().data();
    const T* bd = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xd + r * h;
        double mu = 0.0;
        for (std::size_t j = 0; j < h; ++j) mu += xr[j];
        mu /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(h);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        inv_std[r] = static_cast<T>(is);
        for (std::size_t j = 0; j < h; ++j) {
            xhat[r * h + j] = static_cast<T>((xr[j] - mu) * is);
            out[r * h + j] = gd[j] * xhat[r * h + j] + bd[j];
        }
    }
    return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                          [h, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                              const T* gd = self.parents[1]->data.data();
                              const T* gy = self.grad.data();
                              if (wants_grad(self, 0)) {
                                  auto& gx = parent_grad(self, 0);
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      double m1 = 0.0, m2 = 0.0;
                                      for (std::size_t j = 0; j < h; ++j) {
                                          const double dxh = static_cast<double>(gy[r * h + j]) * gd[j];
                                          m1 += dxh;
                                          m2 += dxh * xhat[r * h + j];
                                      }
                                      m1 /= static_cast<double>(h);
                                      m2 /= static_cast<double>(h);
                                      for (std::size_t j = 0; j < h; ++j) {
                                          const double dxh = static_cast<double>(gy[r * h + j]) * gd[j];
                                          gx[r * h + j] += static_cast<T>(inv_std[r] * (dxh - m1 - xhat[r * h + j] * m2));
                                      }
                                  }
                              }
                              if (wants_grad(self, 1)) {
                                  auto& gg = parent_grad(self, 1);
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < h; ++j) gg[j] += gy[r * h + j] * xhat[r * h + j];
                              }
                              if (wants_grad(self, 2)) {
                                  auto& gb = parent_grad(self, 2);
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < h; ++j) gb[j] += gy[r * h + j];
                              }
                          });
}


/// GELU, tanh approximation.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    using namespace detail;
    std::vector<T> out(x.numel());
    vgelu<T>(x.data().data(), out.data(), nullptr, out.size());
    return make_result<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        std::vector<T> d(g.size());
        vgelu<T>(self.parents[0]->data.data(), nullptr, d.data(), d.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d[i];
    });
}

/// Splits the last axis into [value | gate] halves and returns value * gelu(gate).
template <typename T>
BasicTensor<T> geglu(const BasicTensor<T>& x) {
    using namespace detail;
    if (x.rank() < 1 || x.shape().back() % 2 != 0) {
        throw ShapeError("geglu: last axis must be even, got " + shape_str(x.shape()));
    }
    const std::size_t w = x.shape().back(), f = w / 2;
    const std::size_t rows = x.numel() / w;
    Shape out_shape = x.shape();
    out_shape.back() = f;
    std::vector<T> out(rows * f);
    std::vector<T> act(f);
    const T* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        vgelu<T>(xd + r * w + f, act.data(), nullptr, f);
        for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xd[r * w + j] * act[j];
    }
    return make_result<T>("geglu", std::move(out_shape), std::move(out), {x}, [rows, w, f](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        const T* xd = self.parents[0]->data.data();
        std::vector<T> act(f), d(f);
        for (std::size_t r = 0; r < rows; ++r) {
            vgelu<T>(xd + r * w + f, act.data(), d.data(), f);
            for (std::size_t j = 0; j < f; ++j) {
                const T gy = self.grad[r * f + j];
                g[r * w + j] += gy * act[j];
                g[r * w + f + j] += gy * xd[r * w + j] * d[j];
            }
        }
    });
}

enum class Activation { gelu, geglu };

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind) {
    return kind == Activation::gelu ? gelu(x) : geglu(x);
}

/// Inverted dropout: zeroes each entry with probability p, scales survivors by 1/(1-p).
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::mt19937_64& rng) {
    using namespace detail;
    if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> factor(x.numel());
    for (T& f : factor) f = uniform01(rng) < p ? T(0) : keep_scale;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
    return make_result<T>("dropout", x.shape(), std::move(out), {x}, [factor = std::move(factor)](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
    });
}

/// Row gather: out[..., :] = table[ids[...], :]. Output shape is lead + [width].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids, Shape lead) {
    using namespace detail;
    if (table.rank() != 2) throw ShapeError("embedding: table must be 2-d, got " + shape_str(table.shape()));
    if (numel(lead) != ids.size()) throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for shape " + shape_str(lead));
    const std::size_t rows = table.dim(0), w = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<T> out(idx.size() * w);
    const T* td = table.data().data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
            throw ContractError("embedding: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(rows) + " rows");
        }
        std::copy_n(td + idx[i] * w, w, out.data() + i * w);
    }
    lead.push_back(w);
    return make_result<T>("embedding", std::move(lead), std::move(out), {table}, [w, idx = std::move(idx)](Node<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < w; ++j) g[idx[i] * w + j] += self.grad[i * w + j];
    });
}

}  // namespace relkd::numkit
