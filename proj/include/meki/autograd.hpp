#pragma once
// Tape-based reverse-mode differentiation. A Tape owns the forward values;
// each recorded op pushes a node with a pull closure that routes the node's
// gradient to its inputs. backward() seeds the loss node and sweeps the
// tape in reverse, then flushes leaf gradients into their Parameters.
//
// With recording off the same ops run values-only (no closures, no
// stashes), which is the inference mode used by evaluation and the folded
// path. Values are identical either way because both modes call the same
// kernels.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "meki/ops.hpp"
#include "meki/tensor.hpp"

namespace meki {

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

template <class S>
struct Var {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

template <class S>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  size_t size() const { return nodes_.size(); }

  const Tensor<S>& val(Var<S> v) const { return node(v).value; }

  // ---- graph inputs ----

  Var<S> leaf(Parameter<S>& p) {
    auto it = leaf_ids_.find(&p);
    if (it != leaf_ids_.end()) return Var<S>{it->second};
    Var<S> v = push(Tensor<S>(p.value), &p, nullptr);
    leaf_ids_.emplace(&p, v.idx);
    return v;
  }

  Var<S> constant(Tensor<S> value) { return push(std::move(value), nullptr, nullptr); }

  // ---- elementwise ----

  Var<S> add(Var<S> a, Var<S> b) {
    const Tensor<S>&va = val(a), &vb = val(b);
    if (!va.same_shape(vb))
      throw ShapeError("add shape mismatch: " + shape_str(va.shape) + " vs " +
                       shape_str(vb.shape));
    Tensor<S> y(va.shape);
    ops::add_vec(va.data.data(), vb.data.data(), y.data.data(), y.numel());
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, a, b](Var<S> out) {
      const Tensor<S>& g = grad(out);
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var<S> mul(Var<S> a, Var<S> b) {
    const Tensor<S>&va = val(a), &vb = val(b);
    if (!va.same_shape(vb))
      throw ShapeError("mul shape mismatch: " + shape_str(va.shape) + " vs " +
                       shape_str(vb.shape));
    Tensor<S> y(va.shape);
    ops::mul_vec(va.data.data(), vb.data.data(), y.data.data(), y.numel());
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, a, b](Var<S> out) {
      const Tensor<S>& g = grad(out);
      Tensor<S>& ga = grad_slot(a);
      Tensor<S>& gb = grad_slot(b);
      const Tensor<S>&va2 = val(a), &vb2 = val(b);
      for (int64_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i] * vb2.data[i];
        gb.data[i] += g.data[i] * va2.data[i];
      }
    });
  }

  // a + s*b with s a one-element var
  Var<S> add_scaled(Var<S> a, Var<S> b, Var<S> s) {
    const Tensor<S>&va = val(a), &vb = val(b), &vs = val(s);
    if (!va.same_shape(vb))
      throw ShapeError("add_scaled shape mismatch: " + shape_str(va.shape) + " vs " +
                       shape_str(vb.shape));
    if (vs.numel() != 1) throw ShapeError("add_scaled scale must be a scalar");
    Tensor<S> y(va.shape);
    ops::add_scaled_vec(va.data.data(), vb.data.data(), vs.data[0], y.data.data(),
                        y.numel());
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, a, b, s](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const S sv = val(s).data[0];
      const Tensor<S>& vb2 = val(b);
      Tensor<S>& ga = grad_slot(a);
      Tensor<S>& gb = grad_slot(b);
      Tensor<S>& gs = grad_slot(s);
      S ds = S(0);
      for (int64_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] += sv * g.data[i];
        ds += g.data[i] * vb2.data[i];
      }
      gs.data[0] += ds;
    });
  }

  // s*x with s a one-element var
  Var<S> scale(Var<S> s, Var<S> x) {
    const Tensor<S>&vs = val(s), &vx = val(x);
    if (vs.numel() != 1) throw ShapeError("scale factor must be a scalar");
    Tensor<S> y(vx.shape);
    ops::scale_vec(vx.data.data(), vs.data[0], y.data.data(), y.numel());
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, s, x](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const S sv = val(s).data[0];
      const Tensor<S>& vx2 = val(x);
      Tensor<S>& gx = grad_slot(x);
      Tensor<S>& gs = grad_slot(s);
      S ds = S(0);
      for (int64_t i = 0; i < g.numel(); ++i) {
        gx.data[i] += sv * g.data[i];
        ds += g.data[i] * vx2.data[i];
      }
      gs.data[0] += ds;
    });
  }

  Var<S> sum(Var<S> x) {
    const Tensor<S>& vx = val(x);
    S total = S(0);
    for (S v : vx.data) total += v;
    Tensor<S> y({1});
    y.data[0] = total;
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, x](Var<S> out) {
      const S g = grad(out).data[0];
      Tensor<S>& gx = grad_slot(x);
      for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
    });
  }

  // ---- dense layers ----

  Var<S> matmul(Var<S> a, Var<S> b) {
    Tensor<S> y = ops::matmul(val(a), val(b));
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, a, b](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const Tensor<S>&va = val(a), &vb = val(b);
      // da += g * b^T
      Tensor<S> bt = ops::transpose2d(vb);
      ops::gemm(g.data.data(), bt.data.data(), grad_slot(a).data.data(), g.rows(),
                g.cols(), bt.cols(), true);
      // db += a^T * g
      Tensor<S> at = ops::transpose2d(va);
      ops::gemm(at.data.data(), g.data.data(), grad_slot(b).data.data(), at.rows(),
                at.cols(), g.cols(), true);
    });
  }

  // y = x * w^T, w stored [out x in]
  Var<S> linear(Var<S> x, Var<S> w) {
    Tensor<S> y = ops::linear(val(x), val(w));
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, x, w](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const Tensor<S>&vx = val(x), &vw = val(w);
      // dx += g * w
      ops::gemm(g.data.data(), vw.data.data(), grad_slot(x).data.data(), g.rows(),
                g.cols(), vw.cols(), true);
      // dw += g^T * x
      Tensor<S> gt = ops::transpose2d(g);
      ops::gemm(gt.data.data(), vx.data.data(), grad_slot(w).data.data(), gt.rows(),
                gt.cols(), vx.cols(), true);
    });
  }

  Var<S> rmsnorm(Var<S> x, Var<S> gamma, S eps) {
    Tensor<S> y = ops::rmsnorm(val(x), val(gamma), eps);
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, x, gamma, eps](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const Tensor<S>&vx = val(x), &vg = val(gamma);
      Tensor<S>& gx = grad_slot(x);
      Tensor<S>& gg = grad_slot(gamma);
      int64_t d = vx.shape.back();
      int64_t rows = vx.numel() / d;
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = vx.data.data() + r * d;
        const S* gr = g.data.data() + r * d;
        S ss = S(0);
        for (int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        S r2 = ss / (S)d + eps;
        S inv = S(1) / std::sqrt(r2);
        S inv3 = inv * inv * inv;
        S dot = S(0);  // sum_i g_i gamma_i x_i
        for (int64_t j = 0; j < d; ++j) dot += gr[j] * vg.data[j] * xr[j];
        S* gxr = gx.data.data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          gxr[j] += gr[j] * vg.data[j] * inv - dot * xr[j] * inv3 / (S)d;
          gg.data[j] += gr[j] * xr[j] * inv;
        }
      }
    });
  }

  Var<S> sigmoid(Var<S> x) {
    Tensor<S> y = ops::sigmoid(val(x));
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, x](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const Tensor<S>& y2 = val(out);
      Tensor<S>& gx = grad_slot(x);
      for (int64_t i = 0; i < g.numel(); ++i)
        gx.data[i] += g.data[i] * y2.data[i] * (S(1) - y2.data[i]);
    });
  }

  Var<S> silu(Var<S> x) {
    Tensor<S> y = ops::silu(val(x));
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr, [this, x](Var<S> out) {
      const Tensor<S>& g = grad(out);
      const Tensor<S>& vx = val(x);
      Tensor<S>& gx = grad_slot(x);
      for (int64_t i = 0; i < g.numel(); ++i) {
        S sig = ops::sigmoid_scalar(vx.data[i]);
        gx.data[i] += g.data[i] * sig * (S(1) + vx.data[i] * (S(1) - sig));
      }
    });
  }

  Var<S> embed(Var<S> table, std::vector<int32_t> ids) {
    Tensor<S> y = ops::embed_rows(val(table), std::span<const int32_t>(ids));
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr,
                [this, table, ids = std::move(ids)](Var<S> out) {
                  const Tensor<S>& g = grad(out);
                  Tensor<S>& gt = grad_slot(table);
                  int64_t d = g.cols();
                  for (size_t i = 0; i < ids.size(); ++i) {
                    S* dst = gt.data.data() + (int64_t)ids[i] * d;
                    const S* src = g.row((int64_t)i);
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                  }
                });
  }

  // ---- attention ----

  // Causal multi-head self attention over already-projected q/k/v rows
  // [T x d]. Applies rotary position encoding to q and k internally.
  Var<S> causal_attention(Var<S> q, Var<S> k, Var<S> v, int n_heads, double theta) {
    const Tensor<S>&vq = val(q), &vk = val(k), &vv = val(v);
    if (vq.ndim() != 2 || !vq.same_shape(vk) || !vq.same_shape(vv))
      throw ShapeError("attention q/k/v must share a 2d shape, got " +
                       shape_str(vq.shape) + "/" + shape_str(vk.shape) + "/" +
                       shape_str(vv.shape));
    int64_t t_count = vq.rows(), d = vq.cols();
    if (n_heads < 1 || d % n_heads != 0)
      throw ShapeError("head count " + std::to_string(n_heads) +
                       " does not divide width " + std::to_string(d));
    int64_t dh = d / n_heads;
    if (dh % 2 != 0)
      throw ShapeError("head dim " + std::to_string(dh) +
                       " must be even for rotary pairs");

    auto angles = ops::rope_angles(t_count, dh, theta);
    int64_t pairs = dh / 2;

    Tensor<S> qr = vq;
    Tensor<S> kr = vk;
    for (int64_t t = 0; t < t_count; ++t)
      for (int h = 0; h < n_heads; ++h) {
        ops::rope_rotate(qr.row(t) + h * dh, dh, angles.data() + t * pairs, +1);
        ops::rope_rotate(kr.row(t) + h * dh, dh, angles.data() + t * pairs, +1);
      }

    const S scale = (S)(1.0 / std::sqrt((double)dh));
    Tensor<S> probs({(int64_t)n_heads, t_count, t_count});
    Tensor<S> out({t_count, d});
    for (int h = 0; h < n_heads; ++h) {
      S* ph = probs.data.data() + (int64_t)h * t_count * t_count;
      for (int64_t t = 0; t < t_count; ++t) {
        S* pt = ph + t * t_count;
        const S* qt = qr.row(t) + h * dh;
        S mx = S(0);
        for (int64_t u = 0; u <= t; ++u) {
          const S* ku = kr.row(u) + h * dh;
          S s = S(0);
          for (int64_t j = 0; j < dh; ++j) s += qt[j] * ku[j];
          s *= scale;
          pt[u] = s;
          mx = (u == 0) ? s : std::max(mx, s);
        }
        S sum = S(0);
        for (int64_t u = 0; u <= t; ++u) {
          pt[u] = std::exp(pt[u] - mx);
          sum += pt[u];
        }
        S inv = S(1) / sum;
        for (int64_t u = 0; u <= t; ++u) pt[u] *= inv;
        S* ot = out.row(t) + h * dh;
        std::fill(ot, ot + dh, S(0));
        for (int64_t u = 0; u <= t; ++u) {
          const S pu = pt[u];
          const S* vu = vv.row(u) + h * dh;
          for (int64_t j = 0; j < dh; ++j) ot[j] += pu * vu[j];
        }
      }
    }

    if (!record_) return push(std::move(out), nullptr, nullptr);

    return push(
        std::move(out), nullptr,
        [this, q, k, v, n_heads, dh, scale, angles = std::move(angles),
         qr = std::move(qr), kr = std::move(kr), probs = std::move(probs)](Var<S> o) {
          const Tensor<S>& g = grad(o);
          const Tensor<S>& vv2 = val(v);
          int64_t t_count = g.rows();
          int64_t pairs = dh / 2;
          Tensor<S> dqr(qr.shape);
          Tensor<S> dkr(kr.shape);
          Tensor<S>& gv = grad_slot(v);
          std::vector<S> dp((size_t)t_count);
          for (int h = 0; h < n_heads; ++h) {
            const S* ph = probs.data.data() + (int64_t)h * t_count * t_count;
            for (int64_t t = 0; t < t_count; ++t) {
              const S* pt = ph + t * t_count;
              const S* gt = g.row(t) + h * dh;
              // dv and dp
              S common = S(0);
              for (int64_t u = 0; u <= t; ++u) {
                const S* vu = vv2.row(u) + h * dh;
                S acc = S(0);
                for (int64_t j = 0; j < dh; ++j) acc += gt[j] * vu[j];
                dp[(size_t)u] = acc;
                common += pt[u] * acc;
                S* gvu = gv.row(u) + h * dh;
                for (int64_t j = 0; j < dh; ++j) gvu[j] += pt[u] * gt[j];
              }
              // softmax jacobian, then chain into q and k
              S* dqt = dqr.row(t) + h * dh;
              const S* qt = qr.row(t) + h * dh;
              for (int64_t u = 0; u <= t; ++u) {
                S ds = pt[u] * (dp[(size_t)u] - common) * scale;
                const S* ku = kr.row(u) + h * dh;
                S* dku = dkr.row(u) + h * dh;
                for (int64_t j = 0; j < dh; ++j) {
                  dqt[j] += ds * ku[j];
                  dku[j] += ds * qt[j];
                }
              }
            }
          }
          // rotate gradients back to the unroped frame
          for (int64_t t = 0; t < t_count; ++t)
            for (int h = 0; h < n_heads; ++h) {
              ops::rope_rotate(dqr.row(t) + h * dh, dh, angles.data() + t * pairs, -1);
              ops::rope_rotate(dkr.row(t) + h * dh, dh, angles.data() + t * pairs, -1);
            }
          Tensor<S>& gq = grad_slot(q);
          Tensor<S>& gk = grad_slot(k);
          for (int64_t i = 0; i < gq.numel(); ++i) {
            gq.data[i] += dqr.data[i];
            gk.data[i] += dkr.data[i];
          }
        });
  }

  // ---- loss ----

  Var<S> softmax_cross_entropy(Var<S> logits, std::vector<int32_t> targets) {
    auto res = ops::softmax_cross_entropy(val(logits), std::span<const int32_t>(targets));
    Tensor<S> y({1});
    y.data[0] = res.loss;
    if (!record_) return push(std::move(y), nullptr, nullptr);
    return push(std::move(y), nullptr,
                [this, logits, targets = std::move(targets),
                 probs = std::move(res.softmax)](Var<S> out) {
                  const S g = grad(out).data[0];
                  Tensor<S>& gl = grad_slot(logits);
                  int64_t rows = probs.rows(), v = probs.cols();
                  const S inv_rows = g / (S)rows;
                  for (int64_t r = 0; r < rows; ++r) {
                    const S* pr = probs.row(r);
                    S* gr = gl.row(r);
                    for (int64_t j = 0; j < v; ++j) gr[j] += pr[j] * inv_rows;
                    gr[targets[(size_t)r]] -= inv_rows;
                  }
                });
  }

  // ---- reverse sweep ----

  // Seeds d(loss) = seed and propagates to every contributing leaf,
  // accumulating into Parameter::grad. Gradients from an earlier backward
  // call on this tape are discarded, so backward / zero_grad / backward
  // reproduces identical parameter gradients.
  void backward(Var<S> loss, S seed = S(1)) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (val(loss).numel() != 1)
      throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                  shape_str(val(loss).shape));
    grads_.assign(nodes_.size(), Tensor<S>());
    grad_slot(loss).data[0] = seed;
    for (int32_t i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[(size_t)i];
      if (grads_[(size_t)i].numel() == 0) continue;  // node did not contribute
      if (n.pull) n.pull(Var<S>{i});
      if (n.param) {
        const Tensor<S>& g = grads_[(size_t)i];
        for (int64_t j = 0; j < g.numel(); ++j) n.param->grad.data[j] += g.data[j];
      }
    }
  }

  // Gradient of a node from the most recent backward sweep; zero tensor if
  // the node never contributed.
  Tensor<S> node_grad(Var<S> v) const {
    if ((size_t)v.idx < grads_.size() && grads_[(size_t)v.idx].numel() > 0)
      return grads_[(size_t)v.idx];
    return Tensor<S>(val(v).shape);
  }

 private:
  struct Node {
    Tensor<S> value;
    Parameter<S>* param;
    std::function<void(Var<S>)> pull;
  };

  const Node& node(Var<S> v) const {
    if (v.idx < 0 || (size_t)v.idx >= nodes_.size())
      throw std::out_of_range("invalid tape var");
    return nodes_[(size_t)v.idx];
  }

  Var<S> push(Tensor<S> value, Parameter<S>* param, std::function<void(Var<S>)> pull) {
    nodes_.push_back(Node{std::move(value), param, std::move(pull)});
    return Var<S>{(int32_t)(nodes_.size() - 1)};
  }

  // read-only view used by pull closures
  const Tensor<S>& grad(Var<S> v) { return grad_slot(v); }

  void accumulate(Var<S> v, const Tensor<S>& g) {
    Tensor<S>& slot = grad_slot(v);
    for (int64_t i = 0; i < g.numel(); ++i) slot.data[i] += g.data[i];
  }

  // allocate-on-demand gradient storage
  Tensor<S>& grad_slot(Var<S> v) {
    Tensor<S>& g = grads_[(size_t)v.idx];
    if (g.numel() == 0 && node(v).value.numel() > 0) g = Tensor<S>(node(v).value.shape);
    return g;
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
  std::unordered_map<Parameter<S>*, int32_t> leaf_ids_;
  bool record_;
};

}  // namespace meki
