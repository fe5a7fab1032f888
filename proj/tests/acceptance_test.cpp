// End-to-end acceptance gate. Runs every release criterion in order and
// prints one [PASS]/[FAIL] line per criterion; the exit code is the number
// of failures. Training artifacts (loss curves, sweep table, lens tables)
// land in ./acceptance_out/.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "meki/analysis.hpp"
#include "meki/corpus.hpp"
#include "meki/model.hpp"
#include "meki/reparam.hpp"
#include "meki/storage.hpp"
#include "meki/trainer.hpp"
#include "testutil.hpp"

namespace meki {
namespace {

namespace fs = std::filesystem;
const char* kOutDir = "acceptance_out";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// ---- shared experiment setup -------------------------------------------------
// One corpus and one model family reused by the capacity, variant, fusion,
// position, and lens criteria. Sized for a single CPU core.

// The fact table is deliberately large relative to the backbone width so the
// 2000-step budget leaves the baseline short of saturation; that is where
// the extra per-token capacity shows up as a margin.
SyntheticCorpusSpec study_corpus_spec() {
  SyntheticCorpusSpec spec;
  spec.vocab_size = 512;
  spec.fact_depth = 2;
  spec.noise_prob = 0.05;
  spec.train_tokens = 131072;
  spec.val_tokens = 16384;
  spec.seed = 99;
  return spec;
}

ModelConfig study_model(Variant v) {
  ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.d_model = 32;
  cfg.d_mem = 16;
  cfg.vocab_size = 512;
  cfg.n_heads = 4;
  cfg.d_ffn = 48;
  cfg.variant = v;
  return cfg;
}

TrainConfig study_train(uint64_t seed, int64_t steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 8;
  tc.seq_len = 48;
  tc.peak_lr = 1e-3;
  tc.min_lr = 1e-4;
  tc.warmup_steps = steps / 20;
  tc.eval_interval = std::max<int64_t>(1, steps / 10);
  tc.eval_sequences = 256;
  tc.seed = seed;
  return tc;
}

constexpr int64_t kStudySteps = 2000;
const std::vector<uint64_t> kStudySeeds = {1, 2, 3};

// Parameters that actually receive gradients under a config. Dead tensors
// (the whole branch when disabled, the unused projector weights, the unused
// combiner scalars) are excluded so baselines are matched on live capacity.
int64_t live_param_count(const ModelConfig& cfg) {
  ModelParams<float> p = ModelParams<float>::init(cfg, 0);
  auto contains = [](const std::string& name, std::string_view part) {
    return name.find(part) != std::string::npos;
  };
  int64_t n = 0;
  p.for_each_param([&](Parameter<float>& par) {
    const std::string& name = par.name;
    if (contains(name, ".meki.")) {
      if (cfg.variant == Variant::disabled) return;
      if (cfg.variant == Variant::static_only &&
          (contains(name, ".proj.") || contains(name, ".beta")))
        return;
      if (cfg.variant == Variant::dynamic_only && contains(name, ".memory")) return;
      if (cfg.variant != Variant::static_only) {
        bool lin = cfg.projector_kind == ProjectorKind::linear;
        if (lin && (contains(name, ".proj.w_up") || contains(name, ".proj.w_act") ||
                    contains(name, ".proj.w_down")))
          return;
        if (!lin && contains(name, ".proj.w_lin")) return;
      }
    }
    n += par.value.numel();
  });
  return n;
}

// Baseline with the branch removed and the FFN widened until its live
// parameter count matches the branch model as closely as the FFN
// granularity allows.
ModelConfig matched_baseline(const ModelConfig& meki_cfg) {
  ModelConfig base = meki_cfg;
  base.variant = Variant::disabled;
  int64_t target = live_param_count(meki_cfg);
  // live count is affine in d_ffn: slope 3*d_model per layer
  int64_t slope = 3 * base.d_model * base.n_layers;
  int64_t at_current = live_param_count(base);
  int64_t dffn = base.d_ffn + (target - at_current + slope / 2) / slope;
  base.d_ffn = std::max<int64_t>(1, dffn);
  return base;
}

// Trained runs shared between the capacity, variant-ordering, and lens
// criteria so each model is trained exactly once.
struct Run {
  uint64_t seed = 0;
  double final_val_loss = 0.0;
  ModelParams<float> params;
};

struct Registry {
  Corpus corpus;
  std::map<Variant, std::vector<Run>> runs;

  Registry() : corpus(generate_corpus(study_corpus_spec())) {}

  std::vector<Run>& ensure(Variant v) {
    auto it = runs.find(v);
    if (it != runs.end()) return it->second;
    ModelConfig cfg =
        v == Variant::disabled ? matched_baseline(study_model(Variant::full)) : study_model(v);
    std::vector<Run> trained;
    for (uint64_t seed : kStudySeeds) {
      Run r;
      r.seed = seed;
      r.params = ModelParams<float>::init(cfg, seed);
      TrainResult res = train(r.params, study_train(seed, kStudySteps), corpus);
      r.final_val_loss = res.final_val_loss;
      write_loss_history_csv(res.history,
                             std::string(kOutDir) + "/train_" + to_string(v) + "_seed" +
                                 std::to_string(seed) + ".csv");
      trained.push_back(std::move(r));
    }
    return runs.emplace(v, std::move(trained)).first->second;
  }

  double mean_loss(Variant v) {
    const auto& rs = ensure(v);
    double s = 0.0;
    for (const auto& r : rs) s += r.final_val_loss;
    return s / (double)rs.size();
  }
};

Registry& registry() {
  static Registry reg;
  return reg;
}

// ---- criterion 1: training path vs lookup path, random models -----------------

Outcome check_fused_equivalence() {
  auto t0 = std::chrono::steady_clock::now();
  const int64_t layer_opts[] = {2, 4};
  const int64_t width_opts[] = {32, 64};
  const int64_t mem_opts[] = {8, 16};

  double worst64 = 0.0, worst32 = 0.0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    ModelConfig cfg;
    cfg.n_layers = layer_opts[seed % 2];
    cfg.d_model = width_opts[(seed / 2) % 2];
    cfg.d_mem = mem_opts[(seed / 4) % 2];
    cfg.vocab_size = 257;
    cfg.n_heads = 4;
    cfg.d_ffn = 2 * cfg.d_model;
    cfg.projector_kind = seed % 2 ? ProjectorKind::linear : ProjectorKind::swiglu;
    cfg.position = (Position)(seed % 4);

    ModelParams<double> p64 = ModelParams<double>::init(cfg, 1000 + seed);
    test::randomize_params(p64, seed + 1);
    FusedBank<double> b64 = build_fused_bank(p64, Dtype::f64);
    EquivalenceReport r64 = verify_equivalence(p64, b64, 100, 64, 1e-10, seed);
    worst64 = std::max(worst64, r64.max_abs_diff_logits);
    if (!r64.pass)
      return {false, fmt("f64 model %llu: max |logit diff| %.3g > 1e-10",
                         (unsigned long long)seed, r64.max_abs_diff_logits)};

    ModelParams<float> p32 = ModelParams<float>::init(cfg, 1000 + seed);
    test::randomize_params(p32, seed + 1);
    FusedBank<float> b32 = build_fused_bank(p32, Dtype::f32);
    EquivalenceReport r32 = verify_equivalence(p32, b32, 100, 64, 1e-4, seed);
    worst32 = std::max(worst32, r32.max_abs_diff_logits);
    if (!r32.pass)
      return {false, fmt("f32 model %llu: max |logit diff| %.3g > 1e-4",
                         (unsigned long long)seed, r32.max_abs_diff_logits)};
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool in_budget = secs < 120.0;
  return {in_budget,
          fmt("20 models x 100 seqs: f64 worst %.2e (tol 1e-10), f32 worst %.2e (tol 1e-4)%s",
              worst64, worst32, in_budget ? "" : ", but over the 120s budget")};
}

// ---- criterion 2: folded rows equal the training-path expert vectors ----------

Outcome check_fold_lookup_identity() {
  double worst = 0.0;
  for (ProjectorKind kind : {ProjectorKind::swiglu, ProjectorKind::linear}) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.d_mem = 8;
    cfg.vocab_size = 257;
    cfg.n_heads = 4;
    cfg.d_ffn = 64;
    cfg.projector_kind = kind;

    ModelParams<double> params = ModelParams<double>::init(cfg, 31);
    test::randomize_params(params, 32);
    FusedBank<double> bank = build_fused_bank(params, Dtype::f64);

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      Tape<double> tape(false);
      MekiLeaves<double> leaves = bind_meki(tape, params.blocks[(size_t)l].meki);
      Var<double> e_global = tape.leaf(params.embedding);
      std::vector<int32_t> all_ids((size_t)cfg.vocab_size);
      for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = (int32_t)i;
      Var<double> rows = expert_vector(tape, leaves, e_global, all_ids, cfg.variant,
                                       cfg.projector_kind, cfg.eps);
      const Tensor<double>& got = bank.tables[(size_t)l];
      const Tensor<double>& want = tape.val(rows);
      for (int64_t i = 0; i < want.numel(); ++i)
        worst = std::max(worst, std::abs(got.data[i] - want.data[i]));
    }
  }
  return {worst <= 1e-12,
          fmt("both projector kinds, all layers x 257 tokens: worst |diff| %.3g (tol 1e-12)",
              worst)};
}

// ---- criterion 3: finite differences over every parameter class ---------------

Outcome check_gradients_fd() {
  auto t0 = std::chrono::steady_clock::now();

  struct ClassWorst {
    double rel = 0.0;  // only measured where |diff| clears the absolute floor
    double abs = 0.0;
    int64_t scalars = 0;
  };
  std::map<std::string, ClassWorst> classes;
  auto class_of = [](const std::string& name) -> std::string {
    auto has = [&](std::string_view part) { return name.find(part) != std::string::npos; };
    if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0)
      return "norm_scales";
    if (has(".meki.memory")) return "memory";
    if (has(".meki.proj.")) return "projector";
    if (has(".meki.alpha")) return "alpha";
    if (has(".meki.beta")) return "beta";
    if (has(".meki.w_gate")) return "gate";
    if (has(".meki.w_out")) return "out_proj";
    if (has(".attn.")) return "attention";
    if (has(".ffn.")) return "ffn";
    return "embeddings";
  };

  int64_t total = 0;
  for (ProjectorKind kind : {ProjectorKind::swiglu, ProjectorKind::linear}) {
    ModelConfig cfg = test::tiny_config();
    cfg.projector_kind = kind;
    ModelParams<double> params = ModelParams<double>::init(cfg, 5);
    test::randomize_params(params, 7);

    Rng rng(11);
    std::vector<int32_t> window = test::random_ids(rng, 9, cfg.vocab_size);
    auto loss = [&]() {
      Tape<double> tape(false);
      return tape.val(sequence_loss(tape, params, window)).data[0];
    };

    Tape<double> tape(true);
    tape.backward(sequence_loss(tape, params, window));

    params.for_each_param([&](Parameter<double>& p) {
      ClassWorst& cw = classes[class_of(p.name)];
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        double fd = test::central_diff(p, i, loss);
        double ad = p.grad.data[i];
        double diff = std::abs(ad - fd);
        cw.abs = std::max(cw.abs, diff);
        if (diff > 1e-7) cw.rel = std::max(cw.rel, diff / std::max(std::abs(ad), std::abs(fd)));
        ++cw.scalars;
        ++total;
      }
    });
  }

  double worst_rel = 0.0, worst_abs = 0.0;
  std::string worst_class;
  std::string per_class;
  for (const auto& [name, cw] : classes) {
    per_class += fmt(" %s %.1e", name.c_str(), cw.abs);
    worst_rel = std::max(worst_rel, cw.rel);
    if (cw.abs > worst_abs) {
      worst_abs = cw.abs;
      worst_class = name;
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = worst_rel < 1e-4 && secs < 300.0;
  return {ok, fmt("%lld scalars: worst rel err %.1e (tol 1e-4 past a 1e-7 absolute floor); "
                  "worst |analytic - numeric| %.1e (%s); per class:%s",
                  (long long)total, worst_rel, worst_abs, worst_class.c_str(),
                  per_class.c_str())};
}

// ---- criterion 4: analytic cost model vs pinned numbers and live counters -----

Outcome check_cost_model() {
  ModelConfig rom_cfg;
  rom_cfg.n_layers = 28;
  rom_cfg.d_model = 1024;
  rom_cfg.d_mem = 256;
  rom_cfg.vocab_size = 151680;
  uint64_t rom = cost_model(rom_cfg, Dtype::f16).rom_bytes_per_token_full_depth;
  if (rom != 14336) return {false, fmt("rom bytes/token %llu != 14336", (unsigned long long)rom)};

  ModelConfig weights_cfg = rom_cfg;
  weights_cfg.d_mem = 128;
  uint64_t weights = cost_model(weights_cfg, Dtype::f16).memory_weight_count;
  if (weights != 543621120)
    return {false, fmt("memory weights %llu != 543621120", (unsigned long long)weights)};

  // live counters vs the analytic forms, training and lookup paths
  for (ProjectorKind kind : {ProjectorKind::swiglu, ProjectorKind::linear}) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_mem = 4;
    cfg.vocab_size = 32;
    cfg.n_heads = 2;
    cfg.d_ffn = 24;
    cfg.projector_kind = kind;
    ModelParams<float> params = ModelParams<float>::init(cfg, 3);
    Rng rng(4);
    std::vector<int32_t> ids = test::random_ids(rng, 9, cfg.vocab_size);
    uint64_t tl = (uint64_t)ids.size() * (uint64_t)cfg.n_layers;
    CostReport analytic = cost_model(cfg, Dtype::f32);

    BranchMacs trainm = measure_branch_macs(params, ids);
    if (trainm.branch_total() != tl * analytic.train_macs_per_token_per_layer)
      return {false, fmt("%s training path: measured %llu != analytic %llu",
                         to_string(kind), (unsigned long long)trainm.branch_total(),
                         (unsigned long long)(tl * analytic.train_macs_per_token_per_layer))};

    FusedBank<float> bank = build_fused_bank(params, Dtype::f32);
    BranchMacs lookup =
        measure_branch_macs(params, ids, std::span<const Tensor<float>>(bank.tables));
    if (lookup.projector != 0)
      return {false, fmt("%s lookup path still spends %llu projector MACs", to_string(kind),
                         (unsigned long long)lookup.projector)};
    if (lookup.branch_total() != tl * analytic.infer_macs_per_token_per_layer)
      return {false, fmt("%s lookup path: measured %llu != analytic %llu", to_string(kind),
                         (unsigned long long)lookup.branch_total(),
                         (unsigned long long)(tl * analytic.infer_macs_per_token_per_layer))};
  }

  ModelConfig off;
  off.n_layers = 2;
  off.d_model = 16;
  off.d_mem = 4;
  off.vocab_size = 32;
  off.n_heads = 2;
  off.d_ffn = 24;
  off.variant = Variant::disabled;
  ModelParams<float> base = ModelParams<float>::init(off, 3);
  Rng rng(4);
  std::vector<int32_t> ids = test::random_ids(rng, 9, off.vocab_size);
  BranchMacs none = measure_branch_macs(base, ids);
  if (none.branch_total() != 0)
    return {false, fmt("disabled branch still counts %llu MACs",
                       (unsigned long long)none.branch_total())};

  return {true, "rom 14336 B/token, 543621120 memory weights, counters match analytic forms, "
                "0 projector MACs on the lookup path"};
}

// ---- criterion 5: branch beats a live-parameter-matched baseline --------------

Outcome check_capacity_effect() {
  auto t0 = std::chrono::steady_clock::now();
  Registry& reg = registry();

  ModelConfig meki_cfg = study_model(Variant::full);
  ModelConfig base_cfg = matched_baseline(meki_cfg);
  int64_t live_meki = live_param_count(meki_cfg);
  int64_t live_base = live_param_count(base_cfg);

  double mean_full = reg.mean_loss(Variant::full);
  double mean_base = reg.mean_loss(Variant::disabled);
  double margin = mean_base - mean_full;
  double bayes = reg.corpus.bayes_cross_entropy();
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  bool ok = margin >= 0.02 && secs < 900.0;
  return {ok,
          fmt("3-seed mean val loss %.4f vs baseline %.4f (margin %.4f, need >= 0.02; "
              "optimum %.4f; live params %lld vs %lld, baseline d_ffn %lld)%s",
              mean_full, mean_base, margin, bayes, (long long)live_meki, (long long)live_base,
              (long long)base_cfg.d_ffn, secs < 900.0 ? "" : "; over the 900s budget")};
}

// ---- criterion 6: variant ordering against the same baseline ------------------

Outcome check_variant_ordering() {
  Registry& reg = registry();
  double base = reg.mean_loss(Variant::disabled);

  std::map<Variant, double> improvement;
  std::string csv_path = std::string(kOutDir) + "/variant_table.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "variant,seed,final_val_loss,mean,improvement_vs_baseline\n";
  printf("    %-13s %-24s %-8s %s\n", "variant", "per-seed val loss", "mean", "improvement");
  for (Variant v : {Variant::full, Variant::static_only, Variant::dynamic_only,
                    Variant::disabled}) {
    const auto& rs = reg.ensure(v);
    double mean = reg.mean_loss(v);
    improvement[v] = base - mean;
    std::string seeds;
    for (const auto& r : rs) {
      csv << to_string(v) << ',' << r.seed << ',' << fmt("%.6f", r.final_val_loss) << ','
          << fmt("%.6f", mean) << ',' << fmt("%.6f", improvement[v]) << '\n';
      seeds += fmt("%.4f ", r.final_val_loss);
    }
    printf("    %-13s %-24s %-8.4f %+.4f\n", to_string(v), seeds.c_str(), mean,
           improvement[v]);
  }

  double f = improvement[Variant::full];
  double s = improvement[Variant::static_only];
  double d = improvement[Variant::dynamic_only];
  bool ok = f >= s && f >= d && s >= 0.0 && d >= 0.0;
  return {ok, fmt("improvements: full %+.4f, static_only %+.4f, dynamic_only %+.4f "
                  "(need full >= each >= 0); table in %s",
                  f, s, d, csv_path.c_str())};
}

// ---- criterion 7: every fusion strategy trains without divergence -------------

Outcome check_fusion_strategies() {
  if (ModelConfig{}.fusion != Fusion::additive_sigmoid)
    return {false, "default fusion is not additive_sigmoid"};

  Registry& reg = registry();
  std::string finals;
  for (Fusion f : {Fusion::additive_sigmoid, Fusion::additive_silu,
                   Fusion::multiplicative_sigmoid, Fusion::multiplicative_silu}) {
    ModelConfig cfg = study_model(Variant::full);
    cfg.fusion = f;
    ModelParams<float> params = ModelParams<float>::init(cfg, 1);
    TrainResult res;
    try {
      res = train(params, study_train(1, 400), reg.corpus);
    } catch (const TrainDivergence& e) {
      return {false, fmt("%s diverged at step %lld (%s)", to_string(f), (long long)e.step,
                         e.parameter.c_str())};
    }
    write_loss_history_csv(res.history, std::string(kOutDir) + "/train_fusion_" +
                                            to_string(f) + ".csv");
    finals += fmt("%s %.4f  ", to_string(f), res.final_val_loss);
  }
  return {true, "400-step runs, default is additive_sigmoid; final val loss: " + finals};
}

// ---- criterion 8: every injection position runs; zero output proj is inert ----

Outcome check_positions() {
  Registry& reg = registry();
  const Corpus& corpus = reg.corpus;

  std::string finals;
  for (Position pos : {Position::parallel_ffn, Position::parallel_attn,
                       Position::after_attn, Position::after_ffn}) {
    ModelConfig cfg = study_model(Variant::full);
    cfg.position = pos;

    // Freshly initialized models keep the output projection at zero, so the
    // branch must be numerically invisible at every position.
    ModelParams<float> fresh = ModelParams<float>::init(cfg, 17);
    ModelConfig off = cfg;
    off.variant = Variant::disabled;
    ModelParams<float> plain = ModelParams<float>::init(off, 17);
    Rng rng(18);
    for (int rep = 0; rep < 4; ++rep) {
      std::vector<int32_t> ids = test::random_ids(rng, 24, cfg.vocab_size);
      Tape<float> ta(false), tb(false);
      const Tensor<float>& a = ta.val(model_forward(ta, fresh, ids).logits);
      const Tensor<float>& b = tb.val(model_forward(tb, plain, ids).logits);
      for (int64_t i = 0; i < a.numel(); ++i)
        if (a.data[i] != b.data[i])
          return {false, fmt("%s: zero output projection changed logit %lld", to_string(pos),
                             (long long)i)};
    }

    ModelParams<float> params = ModelParams<float>::init(cfg, 1);
    TrainResult res = train(params, study_train(1, 400), corpus);
    write_loss_history_csv(res.history, std::string(kOutDir) + "/train_position_" +
                                            to_string(pos) + ".csv");
    finals += fmt("%s %.4f  ", to_string(pos), res.final_val_loss);
  }
  return {true, "zero-projection equivalence at all positions; 400-step final val loss: " +
                    finals};
}

// ---- criterion 9: memory-width sweep trends down with a log-linear fit --------

Outcome check_memory_sweep() {
  ModelConfig base;
  base.n_layers = 2;
  base.d_model = 72;
  base.d_mem = 8;
  base.vocab_size = 256;
  base.n_heads = 4;
  base.d_ffn = 72;

  TrainConfig tc = study_train(0, 500);
  tc.seq_len = 32;
  tc.eval_sequences = 64;

  SyntheticCorpusSpec spec = study_corpus_spec();
  spec.vocab_size = 256;
  Corpus corpus = generate_corpus(spec);

  std::vector<int64_t> dmems = {8, 16, 32, 64};
  std::vector<SweepRow> rows = dmem_sweep<float>(base, dmems, tc, corpus, kStudySeeds);
  std::string csv_path = std::string(kOutDir) + "/sweep.csv";
  write_sweep_csv(rows, csv_path);

  std::string means_str;
  std::vector<double> means;
  for (int64_t dm : dmems) {
    double s = 0.0;
    int64_t n = 0;
    for (const auto& r : rows)
      if (r.d_mem == dm && !r.diverged) {
        s += r.final_val_loss;
        ++n;
      }
    if (n != (int64_t)kStudySeeds.size())
      return {false, fmt("d_mem %lld: %lld of %zu runs diverged", (long long)dm,
                         (long long)((int64_t)kStudySeeds.size() - n), kStudySeeds.size())};
    means.push_back(s / (double)n);
    means_str += fmt("%lld:%.4f ", (long long)dm, means.back());
  }

  int inversions = 0;
  double worst_inversion = 0.0;
  for (size_t i = 1; i < means.size(); ++i)
    if (means[i] > means[i - 1]) {
      ++inversions;
      worst_inversion = std::max(worst_inversion, means[i] - means[i - 1]);
    }

  LogLinFit fit = fit_log_linear(rows);
  bool ok = inversions <= 1 && worst_inversion <= 0.005 && fit.slope > 0.0;
  return {ok, fmt("3-seed mean val loss by d_mem: %s| %d inversion(s), worst %.4f "
                  "(allow 1 <= 0.005); log-linear slope %.4f (need > 0), r2 %.3f; %s",
                  means_str.c_str(), inversions, worst_inversion, fit.slope, fit.r2,
                  csv_path.c_str())};
}

// ---- criterion 10: depth-wise prediction convergence --------------------------

Outcome check_logit_lens() {
  Registry& reg = registry();
  int64_t n_layers = study_model(Variant::full).n_layers;

  double mean_at_late[2] = {0.0, 0.0};  // branch model, baseline
  int which = 0;
  for (Variant v : {Variant::full, Variant::disabled}) {
    for (Run& run : reg.ensure(v)) {
      LensReport rep = logit_lens_kl(run.params, reg.corpus, 10240, 64);
      write_lens_csv(rep, std::string(kOutDir) + "/lens_" + to_string(v) + "_seed" +
                              std::to_string(run.seed) + ".csv");
      if (rep.kl_final_vs_lens.back() != 0.0 || rep.kl_lens_vs_final.back() != 0.0)
        return {false, fmt("%s seed %llu: deepest layer KL %.3g / %.3g, expected exact 0",
                           to_string(v), (unsigned long long)run.seed,
                           rep.kl_final_vs_lens.back(), rep.kl_lens_vs_final.back())};
      for (size_t l = 0; l < rep.kl_final_vs_lens.size(); ++l)
        if (!(rep.kl_final_vs_lens[l] >= 0.0) || !std::isfinite(rep.kl_final_vs_lens[l]))
          return {false, fmt("%s seed %llu: KL at layer %zu is %.3g", to_string(v),
                             (unsigned long long)run.seed, l, rep.kl_final_vs_lens[l])};
      for (int64_t l = n_layers / 2; l < n_layers; ++l)
        mean_at_late[which] += rep.kl_final_vs_lens[(size_t)l];
    }
    mean_at_late[which] /=
        (double)(kStudySeeds.size() * (size_t)(n_layers - n_layers / 2));
    ++which;
  }

  return {true, fmt("deepest-layer KL exact 0 for all 6 models; late-layer mean KL: branch "
                    "%.4f vs baseline %.4f (CSVs in %s)",
                    mean_at_late[0], mean_at_late[1], kOutDir)};
}

// ---- criterion 11: on-disk formats round-trip ----------------------------------

Outcome check_formats() {
  fs::path dir = test::make_temp_dir("acceptance_fmt");
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_mem = 6;
  cfg.vocab_size = 64;
  cfg.n_heads = 2;
  cfg.d_ffn = 24;

  // checkpoint round trip at both working precisions
  {
    ModelParams<float> params = ModelParams<float>::init(cfg, 21);
    test::randomize_params(params, 22);
    std::string path = (dir / "a.mekc").string();
    write_checkpoint(params, path);
    ModelParams<float> loaded = read_checkpoint<float>(path);
    if (serialize_checkpoint(loaded) != serialize_checkpoint(params))
      return {false, "f32 checkpoint bytes changed across write->read"};
  }
  {
    ModelParams<double> params = ModelParams<double>::init(cfg, 23);
    test::randomize_params(params, 24);
    std::string path = (dir / "b.mekc").string();
    write_checkpoint(params, path);
    ModelParams<double> loaded = read_checkpoint<double>(path);
    if (serialize_checkpoint(loaded) != serialize_checkpoint(params))
      return {false, "f64 checkpoint bytes changed across write->read"};
  }

  // bank fuzz: 1000 random rows per dtype read back bit-identical
  ModelParams<float> params = ModelParams<float>::init(cfg, 25);
  test::randomize_params(params, 26);
  for (Dtype dt : {Dtype::f32, Dtype::f16}) {
    FusedBank<float> bank = build_fused_bank(params, dt);
    std::string path = (dir / (std::string("bank_") + dtype_name(dt) + ".mekb")).string();
    write_bank(bank, cfg, path);

    uint64_t expect_size = kBankHeaderBytes + (uint64_t)cfg.n_layers * cfg.vocab_size *
                                                  cfg.d_mem * dtype_size(dt);
    if (fs::file_size(path) != expect_size)
      return {false, fmt("%s bank file is %llu bytes, formula says %llu", dtype_name(dt),
                         (unsigned long long)fs::file_size(path),
                         (unsigned long long)expect_size)};

    BankReader reader(path);
    Rng rng(27);
    for (int i = 0; i < 1000; ++i) {
      int64_t l = (int64_t)rng.uniform_int(cfg.n_layers);
      int64_t t = (int64_t)rng.uniform_int(cfg.vocab_size);
      std::vector<float> row = reader.read_row(l, t);
      for (int64_t j = 0; j < cfg.d_mem; ++j) {
        float want = bank.tables[(size_t)l].data[t * cfg.d_mem + j];
        if (std::bit_cast<uint32_t>(row[(size_t)j]) != std::bit_cast<uint32_t>(want))
          return {false, fmt("%s bank row (%lld,%lld)[%lld] read %.9g, table holds %.9g",
                             dtype_name(dt), (long long)l, (long long)t, (long long)j,
                             row[(size_t)j], want)};
      }
    }
  }

  fs::remove_all(dir);
  return {true, "checkpoints bit-stable at f32/f64; 1000-row bank fuzz bit-identical at "
                "f32/f16; file sizes match the header formula"};
}

}  // namespace
}  // namespace meki

int main() {
  using namespace meki;
  fs::create_directories(kOutDir);

  struct Criterion {
    const char* name;
    Outcome (*fn)();
  };
  const Criterion criteria[] = {
      {"fused-path equivalence", check_fused_equivalence},
      {"fold-lookup identity", check_fold_lookup_identity},
      {"gradient correctness", check_gradients_fd},
      {"cost-model fidelity", check_cost_model},
      {"capacity effect", check_capacity_effect},
      {"variant ordering", check_variant_ordering},
      {"fusion strategies", check_fusion_strategies},
      {"injection positions", check_positions},
      {"memory-width scaling", check_memory_sweep},
      {"depth-wise convergence", check_logit_lens},
      {"format round-trips", check_formats},
  };

  int failures = 0;
  int index = 0;
  for (const Criterion& c : criteria) {
    ++index;
    auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.fn();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    printf("[%s] %2d %-24s %s [%.1fs]\n", out.pass ? "PASS" : "FAIL", index, c.name,
           out.detail.c_str(), secs);
    fflush(stdout);
    if (!out.pass) ++failures;
  }

  printf("%d/%d criteria passed; artifacts in %s/\n",
         (int)(sizeof criteria / sizeof criteria[0]) - failures,
         (int)(sizeof criteria / sizeof criteria[0]), kOutDir);
  return failures;
}
