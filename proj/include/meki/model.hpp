#pragma once
// Decoder-only pre-norm transformer hosting the memory branch, with a
// switchable injection position. Forward passes build on a Tape; the
// per-layer residual streams are returned so the lens analysis can project
// any depth through the final norm.

#include <span>
#include <string>
#include <vector>

#include "meki/autograd.hpp"
#include "meki/config.hpp"
#include "meki/meki.hpp"

namespace meki {

template <class S>
struct BlockWeights {
  Parameter<S> attn_norm_gamma;       // [d_model]
  Parameter<S> wq, wk, wv, wo;        // [d_model x d_model]
  Parameter<S> ffn_norm_gamma;        // [d_model]
  Parameter<S> ffn_up, ffn_act;       // [d_ffn x d_model]
  Parameter<S> ffn_down;              // [d_model x d_ffn]
  MekiLayerParams<S> meki;

  template <class F>
  void for_each_param(F&& f) {
    f(attn_norm_gamma);
    f(wq);
    f(wk);
    f(wv);
    f(wo);
    f(ffn_norm_gamma);
    f(ffn_up);
    f(ffn_act);
    f(ffn_down);
    meki.for_each_param(f);
  }
};

template <class S>
struct ModelParams {
  ModelConfig config;
  Parameter<S> embedding;    // [vocab x d_model], doubles as unembedding when tied
  Parameter<S> unembedding;  // only populated when tie_embeddings is false
  std::vector<BlockWeights<S>> blocks;
  Parameter<S> final_norm_gamma;

  // Fresh model. Every tensor is drawn in a fixed order from one stream,
  // so two models initialized with the same seed agree on every tensor
  // they have in common regardless of variant/position/fusion switches.
  static ModelParams init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const double sd = 0.02;
    Rng rng(seed);
    ModelParams p;
    p.config = cfg;
    p.embedding = Parameter<S>("embedding",
                               random_normal<S>(rng, {cfg.vocab_size, cfg.d_model}, sd));
    if (!cfg.tie_embeddings)
      p.unembedding = Parameter<S>(
          "unembedding", random_normal<S>(rng, {cfg.vocab_size, cfg.d_model}, sd));
    p.blocks.reserve((size_t)cfg.n_layers);
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
      std::string bp = "blocks." + std::to_string(i);
      BlockWeights<S> b;
      b.attn_norm_gamma =
          Parameter<S>(bp + ".attn_norm.gamma", Tensor<S>::full({cfg.d_model}, S(1)));
      b.wq = Parameter<S>(bp + ".attn.wq",
                          random_normal<S>(rng, {cfg.d_model, cfg.d_model}, sd));
      b.wk = Parameter<S>(bp + ".attn.wk",
                          random_normal<S>(rng, {cfg.d_model, cfg.d_model}, sd));
      b.wv = Parameter<S>(bp + ".attn.wv",
                          random_normal<S>(rng, {cfg.d_model, cfg.d_model}, sd));
      b.wo = Parameter<S>(bp + ".attn.wo",
                          random_normal<S>(rng, {cfg.d_model, cfg.d_model}, sd));
      b.ffn_norm_gamma =
          Parameter<S>(bp + ".ffn_norm.gamma", Tensor<S>::full({cfg.d_model}, S(1)));
      b.ffn_up = Parameter<S>(bp + ".ffn.w_up",
                              random_normal<S>(rng, {cfg.d_ffn, cfg.d_model}, sd));
      b.ffn_act = Parameter<S>(bp + ".ffn.w_act",
                               random_normal<S>(rng, {cfg.d_ffn, cfg.d_model}, sd));
      b.ffn_down = Parameter<S>(bp + ".ffn.w_down",
                                random_normal<S>(rng, {cfg.d_model, cfg.d_ffn}, sd));
      b.meki = init_meki_params<S>(cfg, bp + ".meki", rng);
      p.blocks.push_back(std::move(b));
    }
    p.final_norm_gamma =
        Parameter<S>("final_norm.gamma", Tensor<S>::full({cfg.d_model}, S(1)));
    return p;
  }

  template <class F>
  void for_each_param(F&& f) {
    f(embedding);
    if (!config.tie_embeddings) f(unembedding);
    for (auto& b : blocks) b.for_each_param(f);
    f(final_norm_gamma);
  }

  int64_t param_count() {
    int64_t n = 0;
    for_each_param([&](Parameter<S>& p) { n += p.value.numel(); });
    return n;
  }
};

template <class S>
struct BlockLeaves {
  Var<S> attn_gamma, wq, wk, wv, wo, ffn_gamma, ffn_up, ffn_act, ffn_down;
  MekiLeaves<S> meki;
};

template <class S>
BlockLeaves<S> bind_block(Tape<S>& tape, BlockWeights<S>& b) {
  BlockLeaves<S> l;
  l.attn_gamma = tape.leaf(b.attn_norm_gamma);
  l.wq = tape.leaf(b.wq);
  l.wk = tape.leaf(b.wk);
  l.wv = tape.leaf(b.wv);
  l.wo = tape.leaf(b.wo);
  l.ffn_gamma = tape.leaf(b.ffn_norm_gamma);
  l.ffn_up = tape.leaf(b.ffn_up);
  l.ffn_act = tape.leaf(b.ffn_act);
  l.ffn_down = tape.leaf(b.ffn_down);
  l.meki = bind_meki(tape, b.meki);
  return l;
}

namespace detail {

template <class S>
Var<S> ffn_swiglu(Tape<S>& tape, const BlockLeaves<S>& l, Var<S> x) {
  Var<S> up = tape.linear(x, l.ffn_up);
  Var<S> act = tape.silu(tape.linear(x, l.ffn_act));
  return tape.linear(tape.mul(act, up), l.ffn_down);
}

}  // namespace detail

// One block. x is the incoming residual stream [T x d_model]; fused_table,
// when non-null, replaces the branch's expert computation with prefolded
// row lookups. Residual adds happen before each branch add, so a zeroed
// injection reproduces the baseline block value for value.
template <class S>
Var<S> block_forward(Tape<S>& tape, const BlockLeaves<S>& l, Var<S> e_global,
                     const std::vector<int32_t>& ids, Var<S> x,
                     const ModelConfig& cfg, const Tensor<S>* fused_table = nullptr) {
  const bool branch_on = cfg.variant != Variant::disabled;
  auto branch = [&](Var<S> h) {
    if (fused_table)
      return meki_forward_fused(tape, l.meki, *fused_table, ids, h, cfg);
    return meki_forward_train(tape, l.meki, e_global, ids, h, cfg);
  };

  switch (cfg.position) {
    case Position::parallel_ffn:
    case Position::parallel_attn:
    case Position::after_attn:
    case Position::after_ffn:
      break;
    default:
      throw ConfigError("unknown injection position");
  }

  Var<S> n1 = tape.rmsnorm(x, l.attn_gamma, (S)cfg.eps);
  Var<S> q = tape.linear(n1, l.wq);
  Var<S> k = tape.linear(n1, l.wk);
  Var<S> v = tape.linear(n1, l.wv);
  Var<S> attn =
      tape.linear(tape.causal_attention(q, k, v, (int)cfg.n_heads, cfg.rope_theta), l.wo);

  Var<S> a = tape.add(x, attn);
  if (branch_on && cfg.position == Position::parallel_attn)
    a = tape.add(a, branch(n1));
  if (branch_on && cfg.position == Position::after_attn) a = tape.add(a, branch(a));

  Var<S> n2 = tape.rmsnorm(a, l.ffn_gamma, (S)cfg.eps);
  Var<S> f = detail::ffn_swiglu(tape, l, n2);

  Var<S> out = tape.add(f, a);
  if (branch_on && cfg.position == Position::parallel_ffn)
    out = tape.add(out, branch(n2));
  if (branch_on && cfg.position == Position::after_ffn) out = tape.add(out, branch(out));
  return out;
}

template <class S>
struct ModelForward {
  Var<S> logits;                       // [T x vocab]
  std::vector<Var<S>> layer_streams;   // residual stream after each block
  Var<S> final_normed;                 // stream after the final norm
};

// Full forward pass. fused_tables empty -> training path; otherwise one
// prefolded expert table per layer.
template <class S>
ModelForward<S> model_forward(Tape<S>& tape, ModelParams<S>& params,
                              const std::vector<int32_t>& ids,
                              std::span<const Tensor<S>> fused_tables = {}) {
  const ModelConfig& cfg = params.config;
  if (ids.empty()) throw ShapeError("model_forward needs at least one token");
  if (!fused_tables.empty() && (int64_t)fused_tables.size() != cfg.n_layers)
    throw ConfigError("fused table count " + std::to_string(fused_tables.size()) +
                      " does not match layer count " + std::to_string(cfg.n_layers));

  Var<S> e_global = tape.leaf(params.embedding);
  Var<S> h = tape.embed(e_global, ids);

  ModelForward<S> out;
  out.layer_streams.reserve(params.blocks.size());
  for (size_t i = 0; i < params.blocks.size(); ++i) {
    BlockLeaves<S> bl = bind_block(tape, params.blocks[i]);
    const Tensor<S>* ft = fused_tables.empty() ? nullptr : &fused_tables[i];
    h = block_forward(tape, bl, e_global, ids, h, cfg, ft);
    out.layer_streams.push_back(h);
  }

  Var<S> fg = tape.leaf(params.final_norm_gamma);
  out.final_normed = tape.rmsnorm(h, fg, (S)cfg.eps);
  Var<S> unembed = cfg.tie_embeddings ? e_global : tape.leaf(params.unembedding);
  out.logits = tape.linear(out.final_normed, unembed);
  return out;
}

// Forward + loss over one sequence window: predicts ids[1..] from ids[..-1].
template <class S>
Var<S> sequence_loss(Tape<S>& tape, ModelParams<S>& params,
                     const std::vector<int32_t>& window,
                     std::span<const Tensor<S>> fused_tables = {}) {
  if (window.size() < 2)
    throw ShapeError("sequence window needs at least 2 tokens");
  std::vector<int32_t> inputs(window.begin(), window.end() - 1);
  std::vector<int32_t> targets(window.begin() + 1, window.end());
  ModelForward<S> fwd = model_forward(tape, params, inputs, fused_tables);
  return tape.softmax_cross_entropy(fwd.logits, std::move(targets));
}

}  // namespace meki
