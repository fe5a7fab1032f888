#pragma once
// Folding the dynamic projector into the static expert table, and the
// lookup-only inference path. The fold evaluates the exact training-path
// expert computation over the whole vocabulary in f64, so the folded row
// for token t equals the training-time expert vector for t, with any error
// confined to the final cast to the bank dtype.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "meki/meki.hpp"
#include "meki/model.hpp"
#include "meki/storage.hpp"

namespace meki {

template <class S>
struct FusedBank {
  std::vector<Tensor<S>> tables;  // one [vocab x d_mem] table per layer
  Dtype dtype = Dtype::f32;       // rounding applied to the rows
  uint64_t provenance = 0;        // fingerprint of the source checkpoint

  void validate(const ModelConfig& cfg) const {
    if ((int64_t)tables.size() != cfg.n_layers)
      throw ConfigError("bank has " + std::to_string(tables.size()) +
                        " tables, config expects " + std::to_string(cfg.n_layers));
    for (const auto& t : tables)
      if (t.shape != Shape{cfg.vocab_size, cfg.d_mem})
        throw ConfigError("bank table shape " + shape_str(t.shape) +
                          " does not match config");
  }
};

namespace detail {

template <class From, class To>
Parameter<To> cast_param(const Parameter<From>& p) {
  return Parameter<To>(p.name, cast_tensor<From, To>(p.value));
}

// The f64 fold core: runs the training-path expert computation for every
// token id through a values-only tape.
template <class S>
Tensor<double> fold_layer_f64(MekiLayerParams<S>& layer, Parameter<S>& e_global,
                              const ModelConfig& cfg) {
  if (cfg.variant == Variant::disabled)
    throw ConfigError("cannot fold a disabled branch");

  MekiLayerParams<double> l64;
  l64.memory = cast_param<S, double>(layer.memory);
  l64.proj_up = cast_param<S, double>(layer.proj_up);
  l64.proj_act = cast_param<S, double>(layer.proj_act);
  l64.proj_down = cast_param<S, double>(layer.proj_down);
  l64.proj_lin = cast_param<S, double>(layer.proj_lin);
  l64.alpha = cast_param<S, double>(layer.alpha);
  l64.beta = cast_param<S, double>(layer.beta);
  l64.w_gate = cast_param<S, double>(layer.w_gate);
  l64.w_out = cast_param<S, double>(layer.w_out);
  l64.expert_norm_gamma = cast_param<S, double>(layer.expert_norm_gamma);
  l64.out_norm_gamma = cast_param<S, double>(layer.out_norm_gamma);
  Parameter<double> e64 = cast_param<S, double>(e_global);

  std::vector<int32_t> ids((size_t)cfg.vocab_size);
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = (int32_t)i;

  Tape<double> tape(false);
  MekiLeaves<double> leaves = bind_meki(tape, l64);
  Var<double> e_leaf = tape.leaf(e64);
  // run the norm at the precision the training path used for its epsilon
  double eps = (double)(S)cfg.eps;
  Var<double> rows = expert_vector(tape, leaves, e_leaf, ids, cfg.variant,
                                   cfg.projector_kind, eps);
  return tape.val(rows);
}

}  // namespace detail

// Folded expert table for one layer at the working scalar type.
template <class S>
Tensor<S> fold_layer(MekiLayerParams<S>& layer, Parameter<S>& e_global,
                     const ModelConfig& cfg) {
  return cast_tensor<double, S>(detail::fold_layer_f64(layer, e_global, cfg));
}

// Folds every layer and applies bank-dtype rounding. dtype f32/f16 rounds
// rows through the narrower format (held at S); f64 keeps the fold exact
// and is only available when S is double (in-memory banks; bank files
// store f32 or f16).
template <class S>
FusedBank<S> build_fused_bank(ModelParams<S>& params, Dtype dtype) {
  const ModelConfig& cfg = params.config;
  cfg.validate();
  if (cfg.variant == Variant::disabled)
    throw ConfigError("cannot fold a disabled branch");
  if (dtype == Dtype::f64 && !std::is_same_v<S, double>)
    throw ConfigError("f64 banks require a double-precision model");

  FusedBank<S> bank;
  bank.dtype = dtype;
  bank.provenance = checkpoint_provenance(params);
  bank.tables.reserve(params.blocks.size());
  for (auto& block : params.blocks) {
    Tensor<double> t64 = detail::fold_layer_f64(block.meki, params.embedding, cfg);
    Tensor<S> t(t64.shape);
    for (int64_t i = 0; i < t64.numel(); ++i) {
      switch (dtype) {
        case Dtype::f64: t.data[i] = (S)t64.data[i]; break;
        case Dtype::f32: t.data[i] = (S)(float)t64.data[i]; break;
        case Dtype::f16: t.data[i] = (S)round_to_f16((float)t64.data[i]); break;
      }
    }
    bank.tables.push_back(std::move(t));
  }
  return bank;
}

// Lookup-path branch for one layer, reading expert rows from the bank.
template <class S>
Var<S> meki_forward_infer(Tape<S>& tape, const FusedBank<S>& bank, int64_t layer,
                          const MekiLeaves<S>& leaves,
                          const std::vector<int32_t>& ids, Var<S> h,
                          const ModelConfig& cfg) {
  if (layer < 0 || layer >= (int64_t)bank.tables.size())
    throw std::out_of_range("bank layer " + std::to_string(layer) + " out of range");
  return meki_forward_fused(tape, leaves, bank.tables[(size_t)layer], ids, h, cfg);
}

template <class S>
void write_bank(const FusedBank<S>& bank, const ModelConfig& cfg,
                const std::string& path) {
  bank.validate(cfg);
  BankHeader h;
  h.n_layers = (uint32_t)cfg.n_layers;
  h.vocab_size = (uint32_t)cfg.vocab_size;
  h.d_mem = (uint32_t)cfg.d_mem;
  h.dtype = bank.dtype;
  h.provenance = bank.provenance;
  write_bank_file(path, h, bank.tables);
}

// Loads a bank file into memory at the working scalar type. Narrow-format
// rows widen exactly, so in-memory values match the file bit for bit.
template <class S>
FusedBank<S> load_fused_bank(const std::string& path, const ModelConfig& cfg) {
  BankReader reader(path);
  const BankHeader& h = reader.header();
  if ((int64_t)h.n_layers != cfg.n_layers || (int64_t)h.vocab_size != cfg.vocab_size ||
      (int64_t)h.d_mem != cfg.d_mem)
    throw ConfigError("bank dimensions (" + std::to_string(h.n_layers) + "," +
                      std::to_string(h.vocab_size) + "," + std::to_string(h.d_mem) +
                      ") do not match config (" + std::to_string(cfg.n_layers) + "," +
                      std::to_string(cfg.vocab_size) + "," + std::to_string(cfg.d_mem) +
                      ")");
  FusedBank<S> bank;
  bank.dtype = h.dtype;
  bank.provenance = h.provenance;
  bank.tables.reserve(h.n_layers);
  for (uint32_t l = 0; l < h.n_layers; ++l) {
    Tensor<S> t({(int64_t)h.vocab_size, (int64_t)h.d_mem});
    for (uint32_t v = 0; v < h.vocab_size; ++v) {
      std::vector<float> row = reader.read_row(l, v);
      for (uint32_t j = 0; j < h.d_mem; ++j) t.data[(int64_t)v * h.d_mem + j] = (S)row[j];
    }
    bank.tables.push_back(std::move(t));
  }
  return bank;
}

struct EquivalenceReport {
  double max_abs_diff_logits = 0.0;
  std::vector<double> per_layer_max_diff;  // residual-stream divergence per layer
  double tol = 0.0;
  int64_t sequences = 0;
  bool pass = false;
};

// Runs the training-path and lookup-path forward passes on identical random
// sequences and reports the worst logit divergence.
template <class S>
EquivalenceReport verify_equivalence(ModelParams<S>& params, const FusedBank<S>& bank,
                                     int64_t n_sequences, int64_t seq_len, double tol,
                                     uint64_t seed = 1234,
                                     bool check_provenance = true) {
  const ModelConfig& cfg = params.config;
  bank.validate(cfg);
  if (check_provenance) {
    uint64_t expect = checkpoint_provenance(params);
    if (bank.provenance != expect)
      throw IntegrityError(
          "bank provenance " + std::to_string(bank.provenance) +
          " does not match checkpoint " + std::to_string(expect) +
          " (pass allow_provenance_mismatch to compare anyway)");
  }

  EquivalenceReport rep;
  rep.tol = tol;
  rep.sequences = n_sequences;
  rep.per_layer_max_diff.assign((size_t)cfg.n_layers, 0.0);

  Rng rng(seed);
  for (int64_t s = 0; s < n_sequences; ++s) {
    std::vector<int32_t> ids((size_t)seq_len);
    for (auto& id : ids) id = (int32_t)rng.uniform_int(cfg.vocab_size);

    Tape<S> tape_train(false);
    ModelForward<S> a = model_forward(tape_train, params, ids);
    Tape<S> tape_fused(false);
    ModelForward<S> b = model_forward(tape_fused, params, ids,
                                      std::span<const Tensor<S>>(bank.tables));

    const Tensor<S>&la = tape_train.val(a.logits), &lb = tape_fused.val(b.logits);
    for (int64_t i = 0; i < la.numel(); ++i) {
      double d = std::abs((double)la.data[i] - (double)lb.data[i]);
      if (d > rep.max_abs_diff_logits) rep.max_abs_diff_logits = d;
    }
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const Tensor<S>& ha = tape_train.val(a.layer_streams[(size_t)l]);
      const Tensor<S>& hb = tape_fused.val(b.layer_streams[(size_t)l]);
      double& worst = rep.per_layer_max_diff[(size_t)l];
      for (int64_t i = 0; i < ha.numel(); ++i) {
        double d = std::abs((double)ha.data[i] - (double)hb.data[i]);
        if (d > worst) worst = d;
      }
    }
  }
  rep.pass = rep.max_abs_diff_logits <= tol;
  return rep;
}

}  // namespace meki
