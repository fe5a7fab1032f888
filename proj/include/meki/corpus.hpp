#pragma once
// Synthetic token streams where the next token is a fixed pseudo-random
// function of the current one: fact_depth seeded permutations composed in
// sequence, each stage replaced by a uniform draw with probability
// noise_prob. Token-conditional structure like this is exactly what a
// per-token expert table can absorb, and the Bayes-optimal cross entropy
// has a closed form to test against.

#include <cmath>
#include <cstdint>
#include <vector>

#include "meki/config.hpp"
#include "meki/tensor.hpp"

namespace meki {

struct Corpus {
  SyntheticCorpusSpec spec;
  std::vector<int32_t> train_tokens;
  std::vector<int32_t> val_tokens;
  std::vector<std::vector<int32_t>> stage_maps;  // fact_depth permutations

  // noise-free successor: the composition of all stage maps
  int32_t clean_successor(int32_t x) const {
    for (const auto& m : stage_maps) x = m[(size_t)x];
    return x;
  }

  // Probability that at least one stage was replaced by a uniform draw; a
  // single replacement already makes the final token uniform because the
  // remaining stages are bijections.
  double effective_noise() const {
    return 1.0 - std::pow(1.0 - spec.noise_prob, (double)spec.fact_depth);
  }

  // Next-token law given the current token: clean_successor(x) with
  // probability 1-p_eff, otherwise uniform (which may also hit it).
  double successor_probability(int32_t x, int32_t y) const {
    double p_eff = effective_noise();
    double uniform = p_eff / (double)spec.vocab_size;
    return (y == clean_successor(x)) ? (1.0 - p_eff) + uniform : uniform;
  }

  // Entropy of the next-token law: the best achievable cross entropy.
  double bayes_cross_entropy() const {
    double v = (double)spec.vocab_size;
    double p_eff = effective_noise();
    double q = (1.0 - p_eff) + p_eff / v;
    double h = -q * std::log(q);
    if (p_eff > 0.0) {
      double u = p_eff / v;
      h -= (v - 1.0) * u * std::log(u);
    }
    return h;
  }
};

namespace detail {

inline std::vector<int32_t> random_permutation(Rng& rng, int64_t n) {
  std::vector<int32_t> p((size_t)n);
  for (int64_t i = 0; i < n; ++i) p[(size_t)i] = (int32_t)i;
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = rng.uniform_int(i + 1);
    std::swap(p[(size_t)i], p[(size_t)j]);
  }
  return p;
}

inline std::vector<int32_t> generate_stream(const Corpus& c, Rng rng, int64_t n) {
  const auto& spec = c.spec;
  std::vector<int32_t> out;
  out.reserve((size_t)n);
  int32_t x = (int32_t)rng.uniform_int(spec.vocab_size);
  out.push_back(x);
  while ((int64_t)out.size() < n) {
    int32_t y = x;
    for (const auto& m : c.stage_maps) {
      if (rng.u01() < spec.noise_prob)
        y = (int32_t)rng.uniform_int(spec.vocab_size);
      else
        y = m[(size_t)y];
    }
    out.push_back(y);
    x = y;
  }
  return out;
}

}  // namespace detail

inline Corpus generate_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  Rng rng(spec.seed);
  c.stage_maps.reserve((size_t)spec.fact_depth);
  for (int64_t s = 0; s < spec.fact_depth; ++s)
    c.stage_maps.push_back(detail::random_permutation(rng, spec.vocab_size));
  // train and val come from independent substreams of the same law
  c.train_tokens = detail::generate_stream(c, rng.fork(1), spec.train_tokens);
  c.val_tokens = detail::generate_stream(c, rng.fork(2), spec.val_tokens);
  return c;
}

}  // namespace meki
