#pragma once
// Model / training / corpus configuration plus the flat key-value config
// text format. Keys are dotted with their section ("model.d_model = 64"),
// one per line, '#' comments. The same format is embedded in checkpoint
// headers so a checkpoint is self-describing.

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "meki/tensor.hpp"

namespace meki {

enum class Fusion {
  additive_sigmoid,
  multiplicative_sigmoid,
  additive_silu,
  multiplicative_silu,
};

enum class Position {
  parallel_ffn,
  parallel_attn,
  after_attn,
  after_ffn,
};

enum class Variant {
  full,
  static_only,
  dynamic_only,
  disabled,
};

enum class ProjectorKind {
  swiglu,
  linear,
};

inline const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::additive_sigmoid: return "additive_sigmoid";
    case Fusion::multiplicative_sigmoid: return "multiplicative_sigmoid";
    case Fusion::additive_silu: return "additive_silu";
    case Fusion::multiplicative_silu: return "multiplicative_silu";
  }
  return "?";
}

inline const char* to_string(Position p) {
  switch (p) {
    case Position::parallel_ffn: return "parallel_ffn";
    case Position::parallel_attn: return "parallel_attn";
    case Position::after_attn: return "after_attn";
    case Position::after_ffn: return "after_ffn";
  }
  return "?";
}

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::static_only: return "static_only";
    case Variant::dynamic_only: return "dynamic_only";
    case Variant::disabled: return "disabled";
  }
  return "?";
}

inline const char* to_string(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::swiglu: return "swiglu";
    case ProjectorKind::linear: return "linear";
  }
  return "?";
}

namespace detail {

template <class E, size_t N>
E enum_from_string(std::string_view s, const E (&all)[N], const char* what) {
  for (E v : all)
    if (s == to_string(v)) return v;
  std::string msg = std::string("invalid ") + what + " '" + std::string(s) +
                    "'; valid values:";
  for (E v : all) msg += std::string(" ") + to_string(v);
  throw ConfigError(msg);
}

}  // namespace detail

inline Fusion fusion_from_string(std::string_view s) {
  static constexpr Fusion all[] = {
      Fusion::additive_sigmoid, Fusion::multiplicative_sigmoid,
      Fusion::additive_silu, Fusion::multiplicative_silu};
  return detail::enum_from_string(s, all, "fusion");
}

inline Position position_from_string(std::string_view s) {
  static constexpr Position all[] = {Position::parallel_ffn, Position::parallel_attn,
                                     Position::after_attn, Position::after_ffn};
  return detail::enum_from_string(s, all, "position");
}

inline Variant variant_from_string(std::string_view s) {
  static constexpr Variant all[] = {Variant::full, Variant::static_only,
                                    Variant::dynamic_only, Variant::disabled};
  return detail::enum_from_string(s, all, "variant");
}

inline ProjectorKind projector_from_string(std::string_view s) {
  static constexpr ProjectorKind all[] = {ProjectorKind::swiglu, ProjectorKind::linear};
  return detail::enum_from_string(s, all, "projector_kind");
}

// Whether the fusion strategy gates multiplicatively (otherwise additively)
inline bool fusion_is_multiplicative(Fusion f) {
  return f == Fusion::multiplicative_sigmoid || f == Fusion::multiplicative_silu;
}

// Whether the fusion strategy's gate activation is silu (otherwise sigmoid)
inline bool fusion_uses_silu(Fusion f) {
  return f == Fusion::additive_silu || f == Fusion::multiplicative_silu;
}

// ---- configs ---------------------------------------------------------------

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t d_model = 64;
  int64_t d_mem = 16;
  int64_t vocab_size = 512;
  int64_t n_heads = 4;
  int64_t d_ffn = 128;
  double rope_theta = 500000.0;
  double eps = 1e-6;
  Fusion fusion = Fusion::additive_sigmoid;
  Position position = Position::parallel_ffn;
  Variant variant = Variant::full;
  ProjectorKind projector_kind = ProjectorKind::swiglu;
  bool tie_embeddings = true;

  // intermediate width of the memory projector; floor(d_model/2), at least 1
  int64_t projector_intermediate() const {
    int64_t w = d_model / 2;
    return w < 1 ? 1 : w;
  }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || d_mem < 1 || vocab_size < 1 || n_heads < 1 ||
        d_ffn < 1)
      throw ConfigError("all model dimensions must be >= 1");
    if (d_mem >= d_model)
      throw ConfigError("d_mem (" + std::to_string(d_mem) +
                        ") must be smaller than d_model (" + std::to_string(d_model) +
                        ")");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if ((d_model / n_heads) % 2 != 0)
      throw ConfigError("head dim " + std::to_string(d_model / n_heads) +
                        " must be even for rotary pairs");
    if (eps <= 0) throw ConfigError("eps must be > 0");
    if (rope_theta <= 0) throw ConfigError("rope_theta must be > 0");
  }
};

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 16;
  int64_t seq_len = 128;
  double peak_lr = 4e-4;
  double min_lr = 2e-4;
  int64_t warmup_steps = 500;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  uint64_t seed = 42;
  int64_t eval_interval = 100;
  int64_t eval_sequences = 32;

  void validate() const {
    if (steps < 1 || batch_size < 1 || seq_len < 2)
      throw ConfigError("steps/batch_size must be >= 1 and seq_len >= 2");
    if (min_lr > peak_lr) throw ConfigError("min_lr must be <= peak_lr");
    if (warmup_steps < 0 || warmup_steps >= steps)
      throw ConfigError("warmup_steps must be in [0, steps)");
    if (eval_interval < 1 || eval_sequences < 1)
      throw ConfigError("eval_interval and eval_sequences must be >= 1");
  }
};

struct SyntheticCorpusSpec {
  int64_t vocab_size = 512;
  int64_t fact_depth = 2;
  double noise_prob = 0.05;
  int64_t train_tokens = 262144;
  int64_t val_tokens = 32768;
  uint64_t seed = 7;

  void validate() const {
    if (vocab_size < 8) throw ConfigError("corpus vocab_size must be >= 8");
    if (fact_depth < 1) throw ConfigError("fact_depth must be >= 1");
    if (noise_prob < 0.0 || noise_prob >= 0.5)
      throw ConfigError("noise_prob must be in [0, 0.5)");
    if (train_tokens < 2 || val_tokens < 2)
      throw ConfigError("train/val token counts must be >= 2");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticCorpusSpec corpus;

  void validate() const {
    model.validate();
    train.validate();
    corpus.validate();
    if (corpus.vocab_size != model.vocab_size)
      throw ConfigError("corpus.vocab_size " + std::to_string(corpus.vocab_size) +
                        " must match model.vocab_size " +
                        std::to_string(model.vocab_size));
    if (corpus.train_tokens < train.seq_len + 1 || corpus.val_tokens < train.seq_len + 1)
      throw ConfigError("corpus streams must be longer than seq_len");
  }
};

// ---- key-value text codec ---------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline int64_t parse_i64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  }
}

inline double parse_f64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "' (use true/false)");
}

inline std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

// Applies one "section.field = value" assignment.
inline void apply_config_key(RunConfig& rc, const std::string& key,
                             const std::string& value) {
  using namespace detail;
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  SyntheticCorpusSpec& c = rc.corpus;
  if (key == "model.n_layers") m.n_layers = parse_i64(value, key);
  else if (key == "model.d_model") m.d_model = parse_i64(value, key);
  else if (key == "model.d_mem") m.d_mem = parse_i64(value, key);
  else if (key == "model.vocab_size") m.vocab_size = parse_i64(value, key);
  else if (key == "model.n_heads") m.n_heads = parse_i64(value, key);
  else if (key == "model.d_ffn") m.d_ffn = parse_i64(value, key);
  else if (key == "model.rope_theta") m.rope_theta = parse_f64(value, key);
  else if (key == "model.eps") m.eps = parse_f64(value, key);
  else if (key == "model.fusion") m.fusion = fusion_from_string(value);
  else if (key == "model.position") m.position = position_from_string(value);
  else if (key == "model.variant") m.variant = variant_from_string(value);
  else if (key == "model.projector_kind") m.projector_kind = projector_from_string(value);
  else if (key == "model.tie_embeddings") m.tie_embeddings = parse_bool(value, key);
  else if (key == "train.steps") t.steps = parse_i64(value, key);
  else if (key == "train.batch_size") t.batch_size = parse_i64(value, key);
  else if (key == "train.seq_len") t.seq_len = parse_i64(value, key);
  else if (key == "train.peak_lr") t.peak_lr = parse_f64(value, key);
  else if (key == "train.min_lr") t.min_lr = parse_f64(value, key);
  else if (key == "train.warmup_steps") t.warmup_steps = parse_i64(value, key);
  else if (key == "train.weight_decay") t.weight_decay = parse_f64(value, key);
  else if (key == "train.grad_clip_norm") t.grad_clip_norm = parse_f64(value, key);
  else if (key == "train.adam_beta1") t.adam_beta1 = parse_f64(value, key);
  else if (key == "train.adam_beta2") t.adam_beta2 = parse_f64(value, key);
  else if (key == "train.seed") t.seed = parse_u64(value, key);
  else if (key == "train.eval_interval") t.eval_interval = parse_i64(value, key);
  else if (key == "train.eval_sequences") t.eval_sequences = parse_i64(value, key);
  else if (key == "corpus.vocab_size") c.vocab_size = parse_i64(value, key);
  else if (key == "corpus.fact_depth") c.fact_depth = parse_i64(value, key);
  else if (key == "corpus.noise_prob") c.noise_prob = parse_f64(value, key);
  else if (key == "corpus.train_tokens") c.train_tokens = parse_i64(value, key);
  else if (key == "corpus.val_tokens") c.val_tokens = parse_i64(value, key);
  else if (key == "corpus.seed") c.seed = parse_u64(value, key);
  else throw ConfigError("unknown config key '" + key + "'");
}

// Parses config text into defaults; later lines override earlier ones.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    try {
      apply_config_key(rc, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rc;
}

inline std::string serialize_model_config(const ModelConfig& m) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "model.n_layers = " << m.n_layers << "\n"
     << "model.d_model = " << m.d_model << "\n"
     << "model.d_mem = " << m.d_mem << "\n"
     << "model.vocab_size = " << m.vocab_size << "\n"
     << "model.n_heads = " << m.n_heads << "\n"
     << "model.d_ffn = " << m.d_ffn << "\n"
     << "model.rope_theta = " << fmt_double(m.rope_theta) << "\n"
     << "model.eps = " << fmt_double(m.eps) << "\n"
     << "model.fusion = " << to_string(m.fusion) << "\n"
     << "model.position = " << to_string(m.position) << "\n"
     << "model.variant = " << to_string(m.variant) << "\n"
     << "model.projector_kind = " << to_string(m.projector_kind) << "\n"
     << "model.tie_embeddings = " << (m.tie_embeddings ? "true" : "false") << "\n";
  return os.str();
}

inline std::string serialize_run_config(const RunConfig& rc) {
  using detail::fmt_double;
  std::ostringstream os;
  os << serialize_model_config(rc.model);
  const TrainConfig& t = rc.train;
  os << "train.steps = " << t.steps << "\n"
     << "train.batch_size = " << t.batch_size << "\n"
     << "train.seq_len = " << t.seq_len << "\n"
     << "train.peak_lr = " << fmt_double(t.peak_lr) << "\n"
     << "train.min_lr = " << fmt_double(t.min_lr) << "\n"
     << "train.warmup_steps = " << t.warmup_steps << "\n"
     << "train.weight_decay = " << fmt_double(t.weight_decay) << "\n"
     << "train.grad_clip_norm = " << fmt_double(t.grad_clip_norm) << "\n"
     << "train.adam_beta1 = " << fmt_double(t.adam_beta1) << "\n"
     << "train.adam_beta2 = " << fmt_double(t.adam_beta2) << "\n"
     << "train.seed = " << t.seed << "\n"
     << "train.eval_interval = " << t.eval_interval << "\n"
     << "train.eval_sequences = " << t.eval_sequences << "\n";
  const SyntheticCorpusSpec& c = rc.corpus;
  os << "corpus.vocab_size = " << c.vocab_size << "\n"
     << "corpus.fact_depth = " << c.fact_depth << "\n"
     << "corpus.noise_prob = " << fmt_double(c.noise_prob) << "\n"
     << "corpus.train_tokens = " << c.train_tokens << "\n"
     << "corpus.val_tokens = " << c.val_tokens << "\n"
     << "corpus.seed = " << c.seed << "\n";
  return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  return parse_config_text(text).model;
}

}  // namespace meki
