#pragma once
// Raw forward kernels. Every code path (training graph, memory folding,
// folded inference) funnels through these, which is what makes the
// fold/lookup equivalence structural instead of approximate.
//
// gemm uses a fixed i-k-j loop so each output element accumulates along k
// in ascending order. Tests rely on that order matching a plain triple
// loop bit for bit, so do not reorder the accumulation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "meki/tensor.hpp"

#if defined(__GNUC__)
#define MEKI_NOINLINE __attribute__((noinline))
#define MEKI_RESTRICT __restrict__
#else
#define MEKI_NOINLINE
#define MEKI_RESTRICT
#endif

namespace meki::ops {

// ---- multiply-accumulate accounting ------------------------------------

enum class MacComponent : int {
  other = 0,
  meki_projector = 1,
  meki_gate = 2,
  meki_output = 3,
};
inline constexpr int kMacComponents = 4;

struct MacCounter {
  bool enabled = false;
  MacComponent current = MacComponent::other;
  std::array<uint64_t, kMacComponents> macs{};

  void reset() { macs = {}; }
  uint64_t total() const {
    uint64_t t = 0;
    for (auto v : macs) t += v;
    return t;
  }
  uint64_t operator[](MacComponent c) const { return macs[(int)c]; }
};

inline MacCounter& mac_counter() {
  thread_local MacCounter counter;
  return counter;
}

inline void count_macs(uint64_t n) {
  MacCounter& c = mac_counter();
  if (c.enabled) c.macs[(int)c.current] += n;
}

// Tags matmul work done inside the scope with a component label.
struct MacScope {
  explicit MacScope(MacComponent c) : prev_(mac_counter().current) {
    mac_counter().current = c;
  }
  ~MacScope() { mac_counter().current = prev_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacComponent prev_;
};

// Enables counting for its lifetime and resets the tallies on entry.
struct MacRecording {
  MacRecording() {
    mac_counter().reset();
    mac_counter().enabled = true;
  }
  ~MacRecording() { mac_counter().enabled = false; }
  MacRecording(const MacRecording&) = delete;
  MacRecording& operator=(const MacRecording&) = delete;
};

// ---- dense kernels ------------------------------------------------------

// c[m x n] = a[m x k] * b[k x n], accumulating into c when accumulate=true.
// noinline so every call site runs the exact same machine code.
template <class S>
MEKI_NOINLINE void gemm(const S* MEKI_RESTRICT a, const S* MEKI_RESTRICT b,
                        S* MEKI_RESTRICT c, int64_t m, int64_t k, int64_t n,
                        bool accumulate) {
  count_macs((uint64_t)m * (uint64_t)k * (uint64_t)n);
  for (int64_t i = 0; i < m; ++i) {
    S* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, S(0));
    const S* ai = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S aik = ai[kk];
      const S* bk = b + kk * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  Tensor<S> c({a.rows(), b.cols()});
  gemm(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols(),
       false);
  return c;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
  if (x.ndim() != 2) throw ShapeError("transpose needs 2d, got " + shape_str(x.shape));
  Tensor<S> y({x.cols(), x.rows()});
  for (int64_t i = 0; i < x.rows(); ++i)
    for (int64_t j = 0; j < x.cols(); ++j) y.data[j * x.rows() + i] = x.data[i * x.cols() + j];
  return y;
}

// y[r x out] = x[r x in] * w[out x in]^T. Weights live row-per-output-unit.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.cols())
    throw ShapeError("linear shape mismatch: x " + shape_str(x.shape) + ", w " +
                     shape_str(w.shape));
  Tensor<S> wt = transpose2d(w);
  Tensor<S> y({x.rows(), w.rows()});
  gemm(x.data.data(), wt.data.data(), y.data.data(), x.rows(), x.cols(), w.rows(),
       false);
  return y;
}

// ---- elementwise kernels --------------------------------------------------
//
// noinline keeps a single compiled body per formula, so the training graph
// and the folded path cannot diverge through per-callsite codegen.

template <class S>
MEKI_NOINLINE void add_vec(const S* a, const S* b, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <class S>
MEKI_NOINLINE void mul_vec(const S* a, const S* b, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

// y = a + s*b
template <class S>
MEKI_NOINLINE void add_scaled_vec(const S* a, const S* b, S s, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + s * b[i];
}

template <class S>
MEKI_NOINLINE void scale_vec(const S* x, S s, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = s * x[i];
}

// ---- normalization and activations --------------------------------------

template <class S>
MEKI_NOINLINE void rmsnorm_rows(const S* x, const S* gamma, S* y, int64_t rows,
                                int64_t d, S eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * d;
    S* yr = y + r * d;
    S ss = S(0);
    for (int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    S inv = S(1) / std::sqrt(ss / (S)d + eps);
    for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gamma[j];
  }
}

template <class S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& gamma, S eps) {
  if (eps <= S(0)) throw std::invalid_argument("rmsnorm eps must be > 0");
  if (x.ndim() < 1) throw ShapeError("rmsnorm needs at least 1d input");
  int64_t d = x.shape.back();
  if (gamma.numel() != d)
    throw ShapeError("rmsnorm gamma size " + shape_str(gamma.shape) +
                     " does not match last dim of " + shape_str(x.shape));
  Tensor<S> y(x.shape);
  rmsnorm_rows(x.data.data(), gamma.data.data(), y.data.data(), x.numel() / d, d, eps);
  return y;
}

// Stable sigmoid: never exponentiates a positive argument.
template <class S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
S silu_scalar(S x) {
  return x * sigmoid_scalar(x);
}

template <class S>
MEKI_NOINLINE void sigmoid_vec(const S* x, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
}

template <class S>
MEKI_NOINLINE void silu_vec(const S* x, S* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = silu_scalar(x[i]);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.shape);
  sigmoid_vec(x.data.data(), y.data.data(), x.numel());
  return y;
}

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  Tensor<S> y(x.shape);
  silu_vec(x.data.data(), y.data.data(), x.numel());
  return y;
}

// swiglu(x) = w_down * (silu(w_act x) . (w_up x)), applied row-wise.
// Built from the same kernels the graph ops use, step for step.
template <class S>
Tensor<S> swiglu(const Tensor<S>& x, const Tensor<S>& w_up, const Tensor<S>& w_act,
                 const Tensor<S>& w_down) {
  Tensor<S> up = linear(x, w_up);
  Tensor<S> act = linear(x, w_act);
  silu_vec(act.data.data(), act.data.data(), act.numel());
  mul_vec(act.data.data(), up.data.data(), act.data.data(), act.numel());
  return linear(act, w_down);
}

// ---- embedding lookup ----------------------------------------------------

template <class S>
Tensor<S> embed_rows(const Tensor<S>& table, std::span<const int32_t> ids) {
  if (table.ndim() != 2) throw ShapeError("embedding table must be 2d");
  int64_t v = table.rows(), d = table.cols();
  Tensor<S> out({(int64_t)ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    int32_t id = ids[i];
    if (id < 0 || id >= v)
      throw std::out_of_range("token id " + std::to_string(id) +
                              " out of range for vocab " + std::to_string(v));
    std::copy(table.row(id), table.row(id) + d, out.row((int64_t)i));
  }
  return out;
}

// ---- rotary position encoding --------------------------------------------

// Rotation angles for one head dimension; angles[t][j] for pair j at
// position t. Computed in double regardless of S for stable trig.
inline std::vector<double> rope_angles(int64_t t_count, int64_t head_dim,
                                       double theta) {
  int64_t pairs = head_dim / 2;
  std::vector<double> a((size_t)(t_count * pairs));
  for (int64_t t = 0; t < t_count; ++t)
    for (int64_t j = 0; j < pairs; ++j)
      a[(size_t)(t * pairs + j)] =
          (double)t * std::pow(theta, -2.0 * (double)j / (double)head_dim);
  return a;
}

// Rotates consecutive pairs (x[2j], x[2j+1]) by the given angles; sign=-1
// applies the inverse rotation (used when pulling gradients back).
template <class S>
void rope_rotate(S* x, int64_t head_dim, const double* angles, int sign) {
  for (int64_t j = 0; j < head_dim / 2; ++j) {
    S c = (S)std::cos(angles[j]);
    S s = (S)(sign * std::sin(angles[j]));
    S a = x[2 * j], b = x[2 * j + 1];
    x[2 * j] = a * c - b * s;
    x[2 * j + 1] = a * s + b * c;
  }
}

// ---- softmax cross entropy -------------------------------------------------

template <class S>
struct XentResult {
  S loss = S(0);          // mean over rows
  Tensor<S> softmax;      // row-wise probabilities, kept for the backward pass
};

template <class S>
XentResult<S> softmax_cross_entropy(const Tensor<S>& logits,
                                    std::span<const int32_t> targets) {
  if (logits.ndim() != 2) throw ShapeError("logits must be 2d");
  int64_t rows = logits.rows(), v = logits.cols();
  if ((int64_t)targets.size() != rows)
    throw ShapeError("targets length " + std::to_string(targets.size()) +
                     " does not match logits rows " + std::to_string(rows));
  XentResult<S> res;
  res.softmax = Tensor<S>(logits.shape);
  S total = S(0);
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[(size_t)r];
    if (t < 0 || t >= v)
      throw std::out_of_range("target " + std::to_string(t) + " out of range for " +
                              std::to_string(v) + " classes");
    const S* lr = logits.row(r);
    S* pr = res.softmax.row(r);
    S mx = lr[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    S sum = S(0);
    for (int64_t j = 0; j < v; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      sum += pr[j];
    }
    S inv = S(1) / sum;
    for (int64_t j = 0; j < v; ++j) pr[j] *= inv;
    total += std::log(sum) - (lr[t] - mx);  // -log softmax[t]
  }
  res.loss = total / (S)rows;
  return res;
}

}  // namespace meki::ops
