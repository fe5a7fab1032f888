#pragma once
// Executable versions of the arithmetic claims: the branch cost model with
// its instrumented counterpart, the per-layer logit-lens KL study, and the
// memory-width scaling sweep with its log-linear fit.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "meki/corpus.hpp"
#include "meki/model.hpp"
#include "meki/reparam.hpp"
#include "meki/trainer.hpp"

namespace meki {

struct CostReport {
  uint64_t train_macs_per_token_per_layer = 0;
  uint64_t infer_macs_per_token_per_layer = 0;
  uint64_t rom_bytes_per_token_full_depth = 0;
  uint64_t memory_weight_count = 0;
  Dtype dtype = Dtype::f16;
  // set when d_model is odd: the projector uses floor(d_model/2), so the
  // closed-form d_model^2 term is only approximate
  bool approximate = false;
};

// Pure function of the config; no model is instantiated. Training-path
// branch MACs per token per layer decompose as projector + two gates
// (gate-in d_mem x d_model and output d_model x d_mem).
inline CostReport cost_model(const ModelConfig& cfg, Dtype dtype) {
  // Deliberately lighter than ModelConfig::validate(): the cost forms are
  // defined for odd d_model too (floor(d_model/2) intermediate), where no
  // runnable attention config exists.
  if (cfg.n_layers < 1 || cfg.d_model < 1 || cfg.d_mem < 1 || cfg.vocab_size < 1)
    throw ConfigError("cost model needs positive dimensions");
  if (cfg.d_mem >= cfg.d_model)
    throw ConfigError("d_mem must be smaller than d_model");
  CostReport r;
  r.dtype = dtype;
  r.approximate = (cfg.d_model % 2) != 0;
  r.memory_weight_count = (uint64_t)cfg.n_layers * cfg.vocab_size * cfg.d_mem;
  r.rom_bytes_per_token_full_depth =
      (uint64_t)cfg.n_layers * cfg.d_mem * dtype_size(dtype);
  if (cfg.variant == Variant::disabled) return r;

  uint64_t d = (uint64_t)cfg.d_model, dm = (uint64_t)cfg.d_mem;
  uint64_t di = (uint64_t)cfg.projector_intermediate();
  uint64_t projector = 0;
  if (cfg.variant != Variant::static_only) {
    projector = cfg.projector_kind == ProjectorKind::swiglu
                    ? 2 * di * d + dm * di  // two halves in, one mix out
                    : dm * d;
  }
  uint64_t gates = 2 * d * dm;
  r.train_macs_per_token_per_layer = projector + gates;
  r.infer_macs_per_token_per_layer = gates;
  return r;
}

struct BranchMacs {
  uint64_t projector = 0;
  uint64_t gate = 0;
  uint64_t output = 0;
  uint64_t other = 0;

  uint64_t branch_total() const { return projector + gate + output; }
};

// Runs one forward pass with the counter enabled and returns the
// per-component tallies. fused_tables selects the lookup path.
template <class S>
BranchMacs measure_branch_macs(ModelParams<S>& params, const std::vector<int32_t>& ids,
                               std::span<const Tensor<S>> fused_tables = {}) {
  ops::MacRecording recording;
  Tape<S> tape(false);
  model_forward(tape, params, ids, fused_tables);
  const ops::MacCounter& c = ops::mac_counter();
  BranchMacs m;
  m.projector = c[ops::MacComponent::meki_projector];
  m.gate = c[ops::MacComponent::meki_gate];
  m.output = c[ops::MacComponent::meki_output];
  m.other = c[ops::MacComponent::other];
  return m;
}

inline void write_cost_csv(const CostReport& r, const ModelConfig& cfg,
                           const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f << "n_layers,d_model,d_mem,vocab_size,variant,projector_kind,dtype,"
       "train_macs_per_token_per_layer,infer_macs_per_token_per_layer,"
       "rom_bytes_per_token_full_depth,memory_weight_count,approximate\n";
  f << cfg.n_layers << ',' << cfg.d_model << ',' << cfg.d_mem << ',' << cfg.vocab_size
    << ',' << to_string(cfg.variant) << ',' << to_string(cfg.projector_kind) << ','
    << dtype_name(r.dtype) << ',' << r.train_macs_per_token_per_layer << ','
    << r.infer_macs_per_token_per_layer << ',' << r.rom_bytes_per_token_full_depth
    << ',' << r.memory_weight_count << ',' << (r.approximate ? 1 : 0) << '\n';
}

// ---- logit lens ---------------------------------------------------------------

struct LensReport {
  std::vector<double> kl_final_vs_lens;  // KL(final || lens) per layer
  std::vector<double> kl_lens_vs_final;  // KL(lens || final) per layer
  int64_t positions = 0;
};

namespace detail {

// log-softmax of one row in f64
inline void log_softmax_row(const double* x, double* out, int64_t n) {
  double mx = x[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  double lse = mx + std::log(sum);
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] - lse;
}

}  // namespace detail

// Projects every layer's residual stream through the final norm and
// unembedding, then measures the divergence between each early prediction
// and the final output distribution over at least min_positions tokens.
// The deepest layer reuses the model's own logits node, so its KL is zero
// by construction, as it must be.
template <class S>
LensReport logit_lens_kl(ModelParams<S>& params, const Corpus& corpus,
                         int64_t min_positions, int64_t seq_len) {
  const ModelConfig& cfg = params.config;
  if ((int64_t)corpus.val_tokens.size() < seq_len + 1)
    throw ConfigError("validation stream shorter than one window");

  LensReport rep;
  rep.kl_final_vs_lens.assign((size_t)cfg.n_layers, 0.0);
  rep.kl_lens_vs_final.assign((size_t)cfg.n_layers, 0.0);

  const int64_t v = cfg.vocab_size;
  std::vector<double> row_f((size_t)v), row_l((size_t)v);
  std::vector<double> lp_f((size_t)v), lp_l((size_t)v);

  int64_t offset = 0;
  while (rep.positions < min_positions) {
    if (offset + seq_len >= (int64_t)corpus.val_tokens.size()) offset = 0;
    std::vector<int32_t> ids(corpus.val_tokens.begin() + offset,
                             corpus.val_tokens.begin() + offset + seq_len);
    offset += seq_len;

    Tape<S> tape(false);
    ModelForward<S> fwd = model_forward(tape, params, ids);
    Var<S> fg = tape.leaf(params.final_norm_gamma);
    Var<S> unembed = cfg.tie_embeddings ? tape.leaf(params.embedding)
                                        : tape.leaf(params.unembedding);

    const Tensor<S>& final_logits = tape.val(fwd.logits);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      Var<S> lens_logits_var =
          (l == cfg.n_layers - 1)
              ? fwd.logits
              : tape.linear(tape.rmsnorm(fwd.layer_streams[(size_t)l], fg, (S)cfg.eps),
                            unembed);
      const Tensor<S>& lens_logits = tape.val(lens_logits_var);
      for (int64_t t = 0; t < (int64_t)ids.size(); ++t) {
        for (int64_t j = 0; j < v; ++j) {
          row_f[(size_t)j] = (double)final_logits.at(t, j);
          row_l[(size_t)j] = (double)lens_logits.at(t, j);
        }
        detail::log_softmax_row(row_f.data(), lp_f.data(), v);
        detail::log_softmax_row(row_l.data(), lp_l.data(), v);
        double kl_fl = 0.0, kl_lf = 0.0;
        for (int64_t j = 0; j < v; ++j) {
          double pf = std::exp(lp_f[(size_t)j]);
          double pl = std::exp(lp_l[(size_t)j]);
          kl_fl += pf * (lp_f[(size_t)j] - lp_l[(size_t)j]);
          kl_lf += pl * (lp_l[(size_t)j] - lp_f[(size_t)j]);
        }
        rep.kl_final_vs_lens[(size_t)l] += kl_fl;
        rep.kl_lens_vs_final[(size_t)l] += kl_lf;
      }
    }
    rep.positions += (int64_t)ids.size();
  }

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    rep.kl_final_vs_lens[(size_t)l] /= (double)rep.positions;
    rep.kl_lens_vs_final[(size_t)l] /= (double)rep.positions;
  }
  return rep;
}

inline void write_lens_csv(const LensReport& rep, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f << "layer,kl_final_vs_lens,kl_lens_vs_final\n";
  char buf[96];
  for (size_t l = 0; l < rep.kl_final_vs_lens.size(); ++l) {
    snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", l, rep.kl_final_vs_lens[l],
             rep.kl_lens_vs_final[l]);
    f << buf;
  }
}

// ---- d_mem sweep ---------------------------------------------------------------

struct SweepRow {
  int64_t d_mem = 0;
  uint64_t memory_weights = 0;
  uint64_t seed = 0;
  double final_val_loss = 0.0;
  bool diverged = false;
};

struct LogLinFit {
  double intercept = 0.0;  // a in loss ~ a - b*ln(memory_weights)
  double slope = 0.0;      // b, positive when loss falls with memory
  double r2 = 0.0;
  int64_t points = 0;
};

inline LogLinFit fit_log_linear(const std::vector<SweepRow>& rows) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  int64_t n = 0;
  for (const auto& r : rows) {
    if (r.diverged) continue;
    double x = std::log((double)r.memory_weights);
    double y = r.final_val_loss;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
    ++n;
  }
  LogLinFit fit;
  fit.points = n;
  if (n < 2) return fit;
  double nx = (double)n;
  double cov = sxy - sx * sy / nx;
  double varx = sxx - sx * sx / nx;
  double vary = syy - sy * sy / nx;
  if (varx <= 0.0) return fit;
  double beta = cov / varx;  // d(loss)/d(ln mem)
  fit.slope = -beta;
  fit.intercept = (sy - beta * sx) / nx;
  fit.r2 = vary > 0.0 ? (cov * cov) / (varx * vary) : 1.0;
  return fit;
}

// Trains one model per (d_mem, seed) on identical data and reports final
// validation losses. A diverging run is recorded and the sweep continues.
template <class S>
std::vector<SweepRow> dmem_sweep(const ModelConfig& base, const std::vector<int64_t>& dmems,
                                 const TrainConfig& tc, const Corpus& corpus,
                                 const std::vector<uint64_t>& seeds) {
  for (size_t i = 1; i < dmems.size(); ++i)
    if (dmems[i] <= dmems[i - 1])
      throw ConfigError("d_mem list must be sorted strictly ascending");

  std::vector<SweepRow> rows;
  for (int64_t dm : dmems) {
    ModelConfig cfg = base;
    cfg.d_mem = dm;
    cfg.validate();
    for (uint64_t seed : seeds) {
      SweepRow row;
      row.d_mem = dm;
      row.memory_weights = (uint64_t)cfg.n_layers * cfg.vocab_size * cfg.d_mem;
      row.seed = seed;
      TrainConfig tcs = tc;
      tcs.seed = seed;
      ModelParams<S> params = ModelParams<S>::init(cfg, seed);
      try {
        TrainResult res = train(params, tcs, corpus);
        row.final_val_loss = res.final_val_loss;
      } catch (const TrainDivergence&) {
        row.final_val_loss = std::numeric_limits<double>::quiet_NaN();
        row.diverged = true;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f << "d_mem,memory_weights,seed,final_val_loss,diverged\n";
  char buf[128];
  for (const auto& r : rows) {
    snprintf(buf, sizeof buf, "%lld,%llu,%llu,%.10g,%d\n", (long long)r.d_mem,
             (unsigned long long)r.memory_weights, (unsigned long long)r.seed,
             r.final_val_loss, r.diverged ? 1 : 0);
    f << buf;
  }
}

}  // namespace meki
