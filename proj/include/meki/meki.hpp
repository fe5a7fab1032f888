#pragma once
// The memory branch: a per-layer token-indexed expert table combined with a
// dynamic projection of the shared embedding, gated by the hidden state and
// injected back into the residual stream.
//
// All functions build graph nodes on a Tape so the same code serves
// training (recording) and evaluation (values only). Row-batched: token
// positions are rows, so "per token t" contracts read row-wise here.

#include <vector>

#include "meki/autograd.hpp"
#include "meki/config.hpp"

namespace meki {

template <class S>
struct MekiLayerParams {
  Parameter<S> memory;             // [vocab x d_mem] static expert table
  Parameter<S> proj_up, proj_act;  // [d_model/2 x d_model] projector halves
  Parameter<S> proj_down;          // [d_mem x d_model/2]
  Parameter<S> proj_lin;           // [d_mem x d_model] single-matrix projector
  Parameter<S> alpha, beta;        // scalar combiners
  Parameter<S> w_gate;             // [d_mem x d_model]
  Parameter<S> w_out;              // [d_model x d_mem]
  Parameter<S> expert_norm_gamma;  // [d_mem]
  Parameter<S> out_norm_gamma;     // [d_model]

  template <class F>
  void for_each_param(F&& f) {
    f(memory);
    f(proj_up);
    f(proj_act);
    f(proj_down);
    f(proj_lin);
    f(alpha);
    f(beta);
    f(w_gate);
    f(w_out);
    f(expert_norm_gamma);
    f(out_norm_gamma);
  }
};

// Initializes one layer's branch parameters. Weight matrices get N(0, 0.02^2)
// like the embeddings; w_out starts at zero so a fresh model is exactly the
// baseline; alpha starts small (0.1) and beta balanced (1.0). Both projector
// kinds are always materialized and drawn in a fixed order, so models that
// share a seed share every common tensor no matter which variant or
// projector they run.
template <class S>
MekiLayerParams<S> init_meki_params(const ModelConfig& cfg, const std::string& prefix,
                                    Rng& rng) {
  const double sd = 0.02;
  int64_t di = cfg.projector_intermediate();
  MekiLayerParams<S> p;
  p.memory = Parameter<S>(prefix + ".memory",
                          random_normal<S>(rng, {cfg.vocab_size, cfg.d_mem}, sd));
  p.proj_up =
      Parameter<S>(prefix + ".proj.w_up", random_normal<S>(rng, {di, cfg.d_model}, sd));
  p.proj_act =
      Parameter<S>(prefix + ".proj.w_act", random_normal<S>(rng, {di, cfg.d_model}, sd));
  p.proj_down =
      Parameter<S>(prefix + ".proj.w_down", random_normal<S>(rng, {cfg.d_mem, di}, sd));
  p.proj_lin = Parameter<S>(prefix + ".proj.w_lin",
                            random_normal<S>(rng, {cfg.d_mem, cfg.d_model}, sd));
  p.alpha = Parameter<S>(prefix + ".alpha", Tensor<S>::full({1}, S(0.1)));
  p.beta = Parameter<S>(prefix + ".beta", Tensor<S>::full({1}, S(1)));
  p.w_gate = Parameter<S>(prefix + ".w_gate",
                          random_normal<S>(rng, {cfg.d_mem, cfg.d_model}, sd));
  p.w_out = Parameter<S>(prefix + ".w_out", Tensor<S>::zeros({cfg.d_model, cfg.d_mem}));
  p.expert_norm_gamma =
      Parameter<S>(prefix + ".expert_norm.gamma", Tensor<S>::full({cfg.d_mem}, S(1)));
  p.out_norm_gamma =
      Parameter<S>(prefix + ".out_norm.gamma", Tensor<S>::full({cfg.d_model}, S(1)));
  return p;
}

// Tape handles for one layer's branch parameters.
template <class S>
struct MekiLeaves {
  Var<S> memory, proj_up, proj_act, proj_down, proj_lin;
  Var<S> alpha, beta, w_gate, w_out, expert_gamma, out_gamma;
};

template <class S>
MekiLeaves<S> bind_meki(Tape<S>& tape, MekiLayerParams<S>& p) {
  MekiLeaves<S> l;
  l.memory = tape.leaf(p.memory);
  l.proj_up = tape.leaf(p.proj_up);
  l.proj_act = tape.leaf(p.proj_act);
  l.proj_down = tape.leaf(p.proj_down);
  l.proj_lin = tape.leaf(p.proj_lin);
  l.alpha = tape.leaf(p.alpha);
  l.beta = tape.leaf(p.beta);
  l.w_gate = tape.leaf(p.w_gate);
  l.w_out = tape.leaf(p.w_out);
  l.expert_gamma = tape.leaf(p.expert_norm_gamma);
  l.out_gamma = tape.leaf(p.out_norm_gamma);
  return l;
}

// Static expert rows: one memory row per token id.
template <class S>
Var<S> static_lookup(Tape<S>& tape, Var<S> memory, std::vector<int32_t> ids) {
  return tape.embed(memory, std::move(ids));
}

// Dynamic expert rows: the shared embedding of each token pushed through
// the layer's projector. All projector matmuls are tagged so the counter
// can attribute (or prove the absence of) this work.
template <class S>
Var<S> dynamic_project(Tape<S>& tape, Var<S> e_global, const MekiLeaves<S>& l,
                       ProjectorKind kind, std::vector<int32_t> ids) {
  ops::MacScope scope(ops::MacComponent::meki_projector);
  Var<S> x = tape.embed(e_global, std::move(ids));
  if (kind == ProjectorKind::linear) return tape.linear(x, l.proj_lin);
  Var<S> up = tape.linear(x, l.proj_up);
  Var<S> act = tape.silu(tape.linear(x, l.proj_act));
  return tape.linear(tape.mul(act, up), l.proj_down);
}

// Combined expert rows for the active variant.
template <class S>
Var<S> expert_vector(Tape<S>& tape, const MekiLeaves<S>& l, Var<S> e_global,
                     const std::vector<int32_t>& ids, Variant variant,
                     ProjectorKind kind, S eps) {
  switch (variant) {
    case Variant::full: {
      Var<S> m_static = static_lookup(tape, l.memory, ids);
      Var<S> m_dyn = dynamic_project(tape, e_global, l, kind, ids);
      Var<S> combined = tape.add_scaled(m_static, m_dyn, l.beta);
      return tape.scale(l.alpha, tape.rmsnorm(combined, l.expert_gamma, eps));
    }
    case Variant::static_only: {
      Var<S> m_static = static_lookup(tape, l.memory, ids);
      return tape.scale(l.alpha, tape.rmsnorm(m_static, l.expert_gamma, eps));
    }
    case Variant::dynamic_only: {
      Var<S> m_dyn = dynamic_project(tape, e_global, l, kind, ids);
      return tape.scale(l.alpha, tape.rmsnorm(tape.scale(l.beta, m_dyn), l.expert_gamma, eps));
    }
    case Variant::disabled:
      break;
  }
  throw std::logic_error("expert_vector reached with the branch disabled");
}

// Gate rows from the hidden state; activation follows the fusion strategy.
template <class S>
Var<S> gate(Tape<S>& tape, Var<S> w_gate, Var<S> h, bool use_silu) {
  ops::MacScope scope(ops::MacComponent::meki_gate);
  Var<S> z = tape.linear(h, w_gate);
  return use_silu ? tape.silu(z) : tape.sigmoid(z);
}

template <class S>
Var<S> fuse(Tape<S>& tape, Var<S> e, Var<S> g, Fusion strategy) {
  return fusion_is_multiplicative(strategy) ? tape.mul(e, g) : tape.add(e, g);
}

template <class S>
Var<S> inject(Tape<S>& tape, Var<S> w_out, Var<S> out_gamma, Var<S> v, S eps) {
  ops::MacScope scope(ops::MacComponent::meki_output);
  return tape.rmsnorm(tape.linear(v, w_out), out_gamma, eps);
}

// Full training-path branch over a [T x d_model] hidden block.
template <class S>
Var<S> meki_forward_train(Tape<S>& tape, const MekiLeaves<S>& l, Var<S> e_global,
                          const std::vector<int32_t>& ids, Var<S> h,
                          const ModelConfig& cfg) {
  Var<S> e = expert_vector(tape, l, e_global, ids, cfg.variant, cfg.projector_kind,
                           (S)cfg.eps);
  Var<S> g = gate(tape, l.w_gate, h, fusion_uses_silu(cfg.fusion));
  Var<S> v = fuse(tape, e, g, cfg.fusion);
  return inject(tape, l.w_out, l.out_gamma, v, (S)cfg.eps);
}

// Lookup-path branch: expert rows come from a prefolded table instead of
// the projector. The gathered rows enter the tape as constants, so the
// lookup itself contributes zero multiply-accumulates by construction.
template <class S>
Var<S> meki_forward_fused(Tape<S>& tape, const MekiLeaves<S>& l,
                          const Tensor<S>& folded_table,
                          const std::vector<int32_t>& ids, Var<S> h,
                          const ModelConfig& cfg) {
  Var<S> e = tape.constant(ops::embed_rows(folded_table, std::span<const int32_t>(ids)));
  Var<S> g = gate(tape, l.w_gate, h, fusion_uses_silu(cfg.fusion));
  Var<S> v = fuse(tape, e, g, cfg.fusion);
  return inject(tape, l.w_out, l.out_gamma, v, (S)cfg.eps);
}

}  // namespace meki
