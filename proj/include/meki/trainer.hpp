#pragma once
// Training loop: AdamW with decoupled weight decay, linear warmup into a
// cosine decay, global-norm gradient clipping, deterministic batching from
// a single seed. Optimizer moments are kept in f64 regardless of the model
// scalar so the update rule is identical across run dtypes.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "meki/config.hpp"
#include "meki/corpus.hpp"
#include "meki/model.hpp"

namespace meki {

struct TrainDivergence : std::runtime_error {
  int64_t step;
  std::string parameter;

  TrainDivergence(int64_t step_, std::string param)
      : std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                           " (first non-finite values in: " + param + ")"),
        step(step_),
        parameter(std::move(param)) {}
};

// Closed-form schedule: linear 0 -> peak over warmup_steps, then cosine
// peak -> min over the remaining steps.
inline double lr_at(const TrainConfig& tc, int64_t step) {
  constexpr double kPi = 3.14159265358979323846;
  if (tc.warmup_steps > 0 && step < tc.warmup_steps)
    return tc.peak_lr * (double)step / (double)tc.warmup_steps;
  int64_t denom = tc.steps - 1 - tc.warmup_steps;
  double frac = denom > 0 ? (double)(step - tc.warmup_steps) / (double)denom : 1.0;
  return tc.min_lr + 0.5 * (tc.peak_lr - tc.min_lr) * (1.0 + std::cos(kPi * frac));
}

// Parameters that train without weight decay: norm scales, the scalar
// combiners, and all embedding-class tables (including the expert memory).
inline bool no_weight_decay(const std::string& name) {
  auto ends_with = [&](std::string_view suf) {
    return name.size() >= suf.size() &&
           name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends_with(".gamma") || ends_with(".alpha") || ends_with(".beta") ||
         ends_with(".memory") || name == "embedding" || name == "unembedding";
}

// Global-norm clip across all gradients; returns the pre-clip norm.
template <class S>
double clip_global_norm(std::vector<Parameter<S>*>& params, double max_norm) {
  double ss = 0.0;
  for (auto* p : params)
    for (S g : p->grad.data) ss += (double)g * (double)g;
  double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    S scale = (S)(max_norm / norm);
    for (auto* p : params)
      for (S& g : p->grad.data) g *= scale;
  }
  return norm;
}

template <class S>
class AdamW {
 public:
  explicit AdamW(const std::vector<Parameter<S>*>& params, const TrainConfig& tc)
      : tc_(tc) {
    slots_.reserve(params.size());
    for (auto* p : params)
      slots_.push_back(Slot{std::vector<double>((size_t)p->value.numel(), 0.0),
                            std::vector<double>((size_t)p->value.numel(), 0.0),
                            !no_weight_decay(p->name)});
  }

  void step(std::vector<Parameter<S>*>& params, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(tc_.adam_beta1, (double)t_);
    double bc2 = 1.0 - std::pow(tc_.adam_beta2, (double)t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i];
      Slot& s = slots_[i];
      const double wd = s.decay ? tc_.weight_decay : 0.0;
      for (int64_t j = 0; j < p.value.numel(); ++j) {
        double g = (double)p.grad.data[j];
        s.m[(size_t)j] = tc_.adam_beta1 * s.m[(size_t)j] + (1.0 - tc_.adam_beta1) * g;
        s.v[(size_t)j] = tc_.adam_beta2 * s.v[(size_t)j] + (1.0 - tc_.adam_beta2) * g * g;
        double update = (s.m[(size_t)j] / bc1) / (std::sqrt(s.v[(size_t)j] / bc2) + kEps);
        double value = (double)p.value.data[j];
        p.value.data[j] = (S)(value - lr * (update + wd * value));
      }
    }
  }

 private:
  static constexpr double kEps = 1e-8;
  struct Slot {
    std::vector<double> m, v;
    bool decay;
  };
  std::vector<Slot> slots_;
  TrainConfig tc_;
  int64_t t_ = 0;
};

struct StepStat {
  int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool has_val = false;
};

struct TrainResult {
  std::vector<StepStat> history;
  double final_val_loss = 0.0;
};

inline void write_loss_history_csv(const std::vector<StepStat>& history,
                                   const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f << "step,lr,train_loss,val_loss\n";
  char buf[160];
  for (const auto& s : history) {
    if (s.has_val)
      snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g\n", (long long)s.step, s.lr,
               s.train_loss, s.val_loss);
    else
      snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,\n", (long long)s.step, s.lr,
               s.train_loss);
    f << buf;
  }
}

// Mean cross entropy over deterministic windows of the held-out stream.
// Window choice depends only on the corpus seed, so different training
// runs are scored on identical data.
template <class S>
double evaluate_val_loss(ModelParams<S>& params, const Corpus& corpus,
                         int64_t n_sequences, int64_t seq_len,
                         std::span<const Tensor<S>> fused_tables = {}) {
  if ((int64_t)corpus.val_tokens.size() < seq_len + 1)
    throw ConfigError("validation stream shorter than one window");
  Rng rng(corpus.spec.seed ^ 0x5EEDF00DULL);
  double total = 0.0;
  for (int64_t i = 0; i < n_sequences; ++i) {
    int64_t offset = rng.uniform_int((int64_t)corpus.val_tokens.size() - seq_len);
    std::vector<int32_t> window(corpus.val_tokens.begin() + offset,
                                corpus.val_tokens.begin() + offset + seq_len + 1);
    Tape<S> tape(false);
    total += (double)tape.val(sequence_loss(tape, params, window, fused_tables)).data[0];
  }
  return total / (double)n_sequences;
}

namespace detail {

// Best-effort attribution for a non-finite loss: name the first parameter
// carrying non-finite values or gradients.
template <class S>
std::string first_nonfinite_param(std::vector<Parameter<S>*>& params) {
  for (auto* p : params) {
    for (S v : p->value.data)
      if (!std::isfinite((double)v)) return p->name + " (value)";
    for (S g : p->grad.data)
      if (!std::isfinite((double)g)) return p->name + " (grad)";
  }
  return "loss only";
}

}  // namespace detail

// Trains in place. Deterministic for a given (params, tc, corpus) triple;
// evaluation runs every eval_interval steps and at the final step.
template <class S>
TrainResult train(ModelParams<S>& params, const TrainConfig& tc, const Corpus& corpus) {
  tc.validate();
  if ((int64_t)corpus.train_tokens.size() < tc.seq_len + 1)
    throw ConfigError("training stream shorter than one window");

  std::vector<Parameter<S>*> plist;
  params.for_each_param([&](Parameter<S>& p) { plist.push_back(&p); });
  AdamW<S> opt(plist, tc);
  Rng batch_rng = Rng(tc.seed).fork(0xBA7C);

  TrainResult result;
  result.history.reserve((size_t)tc.steps);
  const int64_t max_offset = (int64_t)corpus.train_tokens.size() - tc.seq_len;

  for (int64_t step = 0; step < tc.steps; ++step) {
    double lr = lr_at(tc, step);
    for (auto* p : plist) p->zero_grad();

    double loss_sum = 0.0;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      int64_t offset = batch_rng.uniform_int(max_offset);
      std::vector<int32_t> window(corpus.train_tokens.begin() + offset,
                                  corpus.train_tokens.begin() + offset + tc.seq_len + 1);
      Tape<S> tape(true);
      Var<S> loss = sequence_loss(tape, params, window);
      loss_sum += (double)tape.val(loss).data[0];
      tape.backward(loss, S(1) / (S)tc.batch_size);
    }
    double train_loss = loss_sum / (double)tc.batch_size;
    if (!std::isfinite(train_loss))
      throw TrainDivergence(step, detail::first_nonfinite_param(plist));

    clip_global_norm(plist, tc.grad_clip_norm);
    opt.step(plist, lr);

    StepStat stat;
    stat.step = step;
    stat.lr = lr;
    stat.train_loss = train_loss;
    if ((step + 1) % tc.eval_interval == 0 || step == tc.steps - 1) {
      stat.val_loss = evaluate_val_loss(params, corpus, tc.eval_sequences, tc.seq_len);
      stat.has_val = true;
      result.final_val_loss = stat.val_loss;
    }
    result.history.push_back(stat);
  }
  return result;
}

}  // namespace meki
