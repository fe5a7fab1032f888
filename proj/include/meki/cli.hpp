#pragma once
// Command-line entry point: train, reparam, verify, infer, cost, sweep,
// lens, bank inspect. Every command writes one JSON run manifest next to
// its outputs recording inputs, seed, and artifact hashes. Exit codes:
// 0 success, 1 domain failure (verification, integrity, bad data),
// 2 usage errors.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "meki/analysis.hpp"
#include "meki/config.hpp"
#include "meki/corpus.hpp"
#include "meki/model.hpp"
#include "meki/reparam.hpp"
#include "meki/storage.hpp"
#include "meki/trainer.hpp"

namespace meki::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- helpers -----------------------------------------------------------------

inline std::string iso8601_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline uint64_t file_fnv(const std::string& path) {
  std::string bytes = meki::detail::read_whole_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

// Worker cap for fan-out commands; MEKI_THREADS overrides detection.
inline size_t thread_cap() {
  if (const char* env = std::getenv("MEKI_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return (size_t)v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Run record written next to each command's outputs.
class Manifest {
 public:
  Manifest(const std::string& command, const std::string& config_path, uint64_t seed,
           const std::string& out_dir) {
    j_["command"] = command;
    j_["config"] = config_path.empty() ? json(nullptr) : json(config_path);
    j_["seed"] = seed;
    j_["output_dir"] = out_dir;
    j_["started_at"] = iso8601_now();
    j_["artifacts"] = json::object();
  }

  void add_artifact(const std::string& name, const std::string& path) {
    char hash[19];
    snprintf(hash, sizeof hash, "0x%016llx", (unsigned long long)file_fnv(path));
    j_["artifacts"][name] = {{"path", path}, {"fnv1a64", hash}};
  }

  template <class T>
  void add(const std::string& key, const T& value) {
    j_[key] = value;
  }

  void write(const fs::path& path) {
    j_["finished_at"] = iso8601_now();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path.string());
    f << j_.dump(2) << "\n";
  }

 private:
  json j_;
};

inline RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return parse_config_text(meki::detail::read_whole_file(path));
}

inline std::vector<int64_t> parse_int_list(const std::string& s, const char* what) {
  std::vector<int64_t> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = meki::detail::trim(cur);
    if (cur.empty()) continue;
    out.push_back(meki::detail::parse_i64(cur, what));
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

template <class F>
auto with_checkpoint_dtype(const std::string& ckpt_path, F&& f) {
  auto [cfg, dtype] = read_checkpoint_header(ckpt_path);
  if (dtype == Dtype::f32) return f(float{});
  if (dtype == Dtype::f64) return f(double{});
  throw FormatError("checkpoint dtype not runnable");
}

// ---- command implementations ----------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::string dtype = "f32";
  uint64_t seed = 0;
  bool seed_set = false;
};

template <class S>
int run_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config_path);
  if (a.seed_set) rc.train.seed = a.seed;
  rc.validate();

  fs::create_directories(a.out_dir);
  Manifest manifest("train", a.config_path, rc.train.seed, a.out_dir);

  Corpus corpus = generate_corpus(rc.corpus);
  ModelParams<S> params = ModelParams<S>::init(rc.model, rc.train.seed);
  std::cout << "training " << params.param_count() << " parameters ("
            << dtype_name(dtype_of<S>::value) << ", variant "
            << to_string(rc.model.variant) << ") for " << rc.train.steps << " steps\n";

  TrainResult res = train(params, rc.train, corpus);

  fs::path ckpt = fs::path(a.out_dir) / "checkpoint.mekc";
  fs::path losses = fs::path(a.out_dir) / "loss.csv";
  write_checkpoint(params, ckpt.string());
  write_loss_history_csv(res.history, losses.string());

  manifest.add("final_val_loss", res.final_val_loss);
  manifest.add("bayes_cross_entropy", corpus.bayes_cross_entropy());
  manifest.add_artifact("checkpoint", ckpt.string());
  manifest.add_artifact("loss_history", losses.string());
  manifest.write(fs::path(a.out_dir) / "train_manifest.json");

  std::cout << "final val loss " << res.final_val_loss << " (optimum "
            << corpus.bayes_cross_entropy() << ")\ncheckpoint: " << ckpt.string()
            << "\n";
  return 0;
}

struct ReparamArgs {
  std::string ckpt_path;
  std::string dtype = "f32";
  std::string out_path = "bank.mekb";
};

template <class S>
int run_reparam(const ReparamArgs& a) {
  ModelParams<S> params = read_checkpoint<S>(a.ckpt_path);
  Dtype dt = a.dtype == "f16" ? Dtype::f16 : Dtype::f32;
  FusedBank<S> bank = build_fused_bank(params, dt);
  write_bank(bank, params.config, a.out_path);

  fs::path out_dir = fs::path(a.out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  Manifest manifest("reparam", a.ckpt_path, 0, out_dir.string());
  manifest.add("bank_dtype", dtype_name(dt));
  char prov[19];
  snprintf(prov, sizeof prov, "0x%016llx", (unsigned long long)bank.provenance);
  manifest.add("provenance", prov);
  manifest.add_artifact("bank", a.out_path);
  manifest.write(out_dir / "reparam_manifest.json");

  std::cout << "folded " << params.config.n_layers << " layers to " << a.out_path
            << " (" << dtype_name(dt) << ", provenance " << prov << ")\n";
  return 0;
}

struct VerifyArgs {
  std::string ckpt_path;
  std::string bank_path;
  std::string out_dir = ".";
  double tol = 1e-4;
  int64_t sequences = 100;
  int64_t seq_len = 64;
  uint64_t seed = 1234;
  bool allow_provenance_mismatch = false;
};

template <class S>
int run_verify(const VerifyArgs& a) {
  ModelParams<S> params = read_checkpoint<S>(a.ckpt_path);
  FusedBank<S> bank =
      a.bank_path.empty()
          ? build_fused_bank(params, dtype_of<S>::value)  // fresh in-memory fold
          : load_fused_bank<S>(a.bank_path, params.config);

  EquivalenceReport rep =
      verify_equivalence(params, bank, a.sequences, a.seq_len, a.tol, a.seed,
                         !a.allow_provenance_mismatch);

  fs::create_directories(a.out_dir);
  Manifest manifest("verify", a.ckpt_path, a.seed, a.out_dir);
  manifest.add("bank", a.bank_path.empty() ? "(in-memory fold)" : a.bank_path);
  manifest.add("max_abs_diff_logits", rep.max_abs_diff_logits);
  manifest.add("per_layer_max_diff", rep.per_layer_max_diff);
  manifest.add("tol", rep.tol);
  manifest.add("pass", rep.pass);
  manifest.write(fs::path(a.out_dir) / "verify_manifest.json");

  std::cout << "max |logit diff| " << rep.max_abs_diff_logits << " over "
            << rep.sequences << " sequences (tol " << rep.tol << ")\n";
  for (size_t l = 0; l < rep.per_layer_max_diff.size(); ++l)
    std::cout << "  layer " << l << " max |stream diff| " << rep.per_layer_max_diff[l]
              << "\n";
  std::cout << (rep.pass ? "PASS" : "FAIL") << "\n";
  return rep.pass ? 0 : 1;
}

struct InferArgs {
  std::string ckpt_path;
  std::string bank_path;
  std::string tokens;
  std::string out_dir = ".";
  int64_t greedy = 16;
  bool allow_provenance_mismatch = false;
};

template <class S>
int run_infer(const InferArgs& a) {
  ModelParams<S> params = read_checkpoint<S>(a.ckpt_path);
  FusedBank<S> bank = load_fused_bank<S>(a.bank_path, params.config);
  if (!a.allow_provenance_mismatch) {
    uint64_t expect = checkpoint_provenance(params);
    if (bank.provenance != expect)
      throw IntegrityError("bank was folded from a different checkpoint "
                           "(pass --allow-provenance-mismatch to override)");
  }

  std::vector<int32_t> ids;
  for (int64_t v : parse_int_list(a.tokens, "tokens")) {
    if (v < 0 || v >= params.config.vocab_size)
      throw std::out_of_range("token " + std::to_string(v) + " out of range");
    ids.push_back((int32_t)v);
  }

  std::span<const Tensor<S>> tables(bank.tables);
  for (int64_t n = 0; n < a.greedy; ++n) {
    Tape<S> tape(false);
    ModelForward<S> fwd = model_forward(tape, params, ids, tables);
    const Tensor<S>& logits = tape.val(fwd.logits);
    int64_t t = logits.rows() - 1;
    int32_t best = 0;
    for (int64_t j = 1; j < logits.cols(); ++j)
      if (logits.at(t, j) > logits.at(t, best)) best = (int32_t)j;
    ids.push_back(best);
  }

  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
  std::cout << out << "\n";

  fs::create_directories(a.out_dir);
  Manifest manifest("infer", a.ckpt_path, 0, a.out_dir);
  manifest.add("prompt", a.tokens);
  manifest.add("generated", out);
  manifest.write(fs::path(a.out_dir) / "infer_manifest.json");
  return 0;
}

struct CostArgs {
  std::string config_path;
  std::string dtype = "f16";
  std::string out_dir = ".";
};

inline int run_cost(const CostArgs& a) {
  RunConfig rc = load_run_config(a.config_path);
  rc.model.validate();
  Dtype dt = a.dtype == "f16"   ? Dtype::f16
             : a.dtype == "f64" ? Dtype::f64
                                : Dtype::f32;
  CostReport rep = cost_model(rc.model, dt);

  fs::create_directories(a.out_dir);
  fs::path csv = fs::path(a.out_dir) / "cost.csv";
  write_cost_csv(rep, rc.model, csv.string());

  Manifest manifest("cost", a.config_path, 0, a.out_dir);
  manifest.add_artifact("cost_csv", csv.string());
  manifest.write(fs::path(a.out_dir) / "cost_manifest.json");

  std::cout << "train_macs_per_token_per_layer " << rep.train_macs_per_token_per_layer
            << "\ninfer_macs_per_token_per_layer " << rep.infer_macs_per_token_per_layer
            << "\nrom_bytes_per_token_full_depth " << rep.rom_bytes_per_token_full_depth
            << "\nmemory_weight_count " << rep.memory_weight_count << "\n";
  if (rep.approximate) std::cout << "(approximate: odd d_model)\n";
  return 0;
}

struct SweepArgs {
  std::string config_path;
  std::string dmem = "8,16,32,64";
  std::string seeds = "1,2,3";
  std::string out_dir = ".";
  std::string dtype = "f32";
};

template <class S>
int run_sweep(const SweepArgs& a) {
  RunConfig rc = load_run_config(a.config_path);
  std::vector<int64_t> dmems = parse_int_list(a.dmem, "dmem");
  std::vector<int64_t> seed_list = parse_int_list(a.seeds, "seeds");
  std::vector<uint64_t> seeds(seed_list.begin(), seed_list.end());

  Corpus corpus = generate_corpus(rc.corpus);

  // fan out (d_mem, seed) runs across workers; row order stays deterministic
  struct Job {
    int64_t d_mem;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (int64_t dm : dmems)
    for (uint64_t s : seeds) jobs.push_back({dm, s});
  std::vector<SweepRow> rows(jobs.size());

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      ModelConfig cfg = rc.model;
      cfg.d_mem = jobs[i].d_mem;
      TrainConfig tc = rc.train;
      tc.seed = jobs[i].seed;
      SweepRow row;
      row.d_mem = cfg.d_mem;
      row.memory_weights = (uint64_t)cfg.n_layers * cfg.vocab_size * cfg.d_mem;
      row.seed = tc.seed;
      try {
        cfg.validate();
        ModelParams<S> params = ModelParams<S>::init(cfg, tc.seed);
        row.final_val_loss = train(params, tc, corpus).final_val_loss;
      } catch (const TrainDivergence&) {
        row.final_val_loss = std::numeric_limits<double>::quiet_NaN();
        row.diverged = true;
      }
      rows[i] = row;
    }
  };
  size_t n_workers = std::min(thread_cap(), jobs.size());
  std::vector<std::thread> pool;
  for (size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  fs::create_directories(a.out_dir);
  fs::path csv = fs::path(a.out_dir) / "sweep.csv";
  write_sweep_csv(rows, csv.string());
  LogLinFit fit = fit_log_linear(rows);

  Manifest manifest("sweep", a.config_path, seeds.empty() ? 0 : seeds[0], a.out_dir);
  manifest.add("slope", fit.slope);
  manifest.add("r2", fit.r2);
  manifest.add_artifact("sweep_csv", csv.string());
  manifest.write(fs::path(a.out_dir) / "sweep_manifest.json");

  for (const auto& r : rows)
    std::cout << "d_mem " << r.d_mem << " seed " << r.seed << " val loss "
              << r.final_val_loss << (r.diverged ? " (diverged)" : "") << "\n";
  std::cout << "log-linear slope " << fit.slope << " (r2 " << fit.r2 << ")\n";
  return 0;
}

struct LensArgs {
  std::string ckpt_path;
  std::string config_path;
  std::string out_dir = ".";
  int64_t positions = 10240;
  int64_t seq_len = 64;
};

template <class S>
int run_lens(const LensArgs& a) {
  ModelParams<S> params = read_checkpoint<S>(a.ckpt_path);
  RunConfig rc = load_run_config(a.config_path);
  rc.corpus.validate();
  if (rc.corpus.vocab_size != params.config.vocab_size)
    throw ConfigError("corpus vocab does not match checkpoint vocab");
  Corpus corpus = generate_corpus(rc.corpus);

  LensReport rep = logit_lens_kl(params, corpus, a.positions, a.seq_len);

  fs::create_directories(a.out_dir);
  fs::path csv = fs::path(a.out_dir) / "lens.csv";
  write_lens_csv(rep, csv.string());

  Manifest manifest("lens", a.config_path, 0, a.out_dir);
  manifest.add("positions", rep.positions);
  manifest.add_artifact("lens_csv", csv.string());
  manifest.write(fs::path(a.out_dir) / "lens_manifest.json");

  for (size_t l = 0; l < rep.kl_final_vs_lens.size(); ++l)
    std::cout << "layer " << l << " KL(final||lens) " << rep.kl_final_vs_lens[l]
              << "\n";
  return 0;
}

struct BankInspectArgs {
  std::string bank_path;
  std::string out_dir = ".";
};

inline int run_bank_inspect(const BankInspectArgs& a) {
  BankReader reader(a.bank_path);
  const BankHeader& h = reader.header();
  std::vector<uint64_t> sums = reader.layer_checksums();

  std::cout << "bank " << a.bank_path << "\nversion " << h.version << "\nlayers "
            << h.n_layers << "\nvocab_size " << h.vocab_size << "\nd_mem " << h.d_mem
            << "\ndtype " << dtype_name(h.dtype) << "\nfile_bytes " << h.file_bytes();
  char prov[19];
  snprintf(prov, sizeof prov, "0x%016llx", (unsigned long long)h.provenance);
  std::cout << "\nprovenance " << prov << "\n";
  for (size_t l = 0; l < sums.size(); ++l) {
    char sum[19];
    snprintf(sum, sizeof sum, "0x%016llx", (unsigned long long)sums[l]);
    std::cout << "layer " << l << " checksum " << sum << "\n";
  }

  fs::create_directories(a.out_dir);
  Manifest manifest("bank-inspect", a.bank_path, 0, a.out_dir);
  manifest.add("provenance", prov);
  manifest.write(fs::path(a.out_dir) / "bank_inspect_manifest.json");
  return 0;
}

// ---- dispatch -----------------------------------------------------------------

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"token-indexed expert memory: training, folding, and analysis"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model on the synthetic corpus");
  train_cmd->add_option("--config", train_args.config_path, "run config file")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out_dir, "output directory");
  train_cmd->add_option("--dtype", train_args.dtype, "model scalar type")
      ->check(CLI::IsMember({"f32", "f64"}));
  auto* seed_opt = train_cmd->add_option("--seed", train_args.seed, "training seed");

  ReparamArgs reparam_args;
  auto* reparam_cmd =
      app.add_subcommand("reparam", "fold the projector into a lookup bank");
  reparam_cmd->add_option("--ckpt", reparam_args.ckpt_path, "source checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  reparam_cmd->add_option("--dtype", reparam_args.dtype, "bank dtype")
      ->check(CLI::IsMember({"f32", "f16"}));
  reparam_cmd->add_option("--out", reparam_args.out_path, "bank file path");

  VerifyArgs verify_args;
  auto* verify_cmd =
      app.add_subcommand("verify", "check lookup-path equivalence against a bank");
  verify_cmd->add_option("--ckpt", verify_args.ckpt_path, "checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  verify_cmd->add_option("--bank", verify_args.bank_path,
                         "bank file (default: fold in memory)");
  verify_cmd->add_option("--tol", verify_args.tol, "max allowed |logit diff|");
  verify_cmd->add_option("--sequences", verify_args.sequences, "number of sequences");
  verify_cmd->add_option("--seq-len", verify_args.seq_len, "sequence length");
  verify_cmd->add_option("--seed", verify_args.seed, "sequence sampling seed");
  verify_cmd->add_flag("--allow-provenance-mismatch",
                       verify_args.allow_provenance_mismatch,
                       "compare even if the bank came from another checkpoint");
  verify_cmd->add_option("--out", verify_args.out_dir, "manifest directory");

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "greedy generation via the lookup path");
  infer_cmd->add_option("--ckpt", infer_args.ckpt_path, "checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--bank", infer_args.bank_path, "bank file")
      ->required()
      ->check(CLI::ExistingFile);
  infer_cmd->add_option("--tokens", infer_args.tokens, "comma-separated prompt ids")
      ->required();
  infer_cmd->add_option("--greedy", infer_args.greedy, "tokens to generate");
  infer_cmd->add_flag("--allow-provenance-mismatch",
                      infer_args.allow_provenance_mismatch,
                      "run even if the bank came from another checkpoint");
  infer_cmd->add_option("--out", infer_args.out_dir, "manifest directory");

  CostArgs cost_args;
  auto* cost_cmd = app.add_subcommand("cost", "analytic cost model for a config");
  cost_cmd->add_option("--config", cost_args.config_path, "run config file")
      ->check(CLI::ExistingFile);
  cost_cmd->add_option("--dtype", cost_args.dtype, "bank dtype for byte counts")
      ->check(CLI::IsMember({"f32", "f16", "f64"}));
  cost_cmd->add_option("--out", cost_args.out_dir, "output directory");

  SweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "train across memory widths");
  sweep_cmd->add_option("--config", sweep_args.config_path, "run config file")
      ->check(CLI::ExistingFile);
  sweep_cmd->add_option("--dmem", sweep_args.dmem, "comma-separated d_mem values");
  sweep_cmd->add_option("--seeds", sweep_args.seeds, "comma-separated seeds");
  sweep_cmd->add_option("--out", sweep_args.out_dir, "output directory");
  sweep_cmd->add_option("--dtype", sweep_args.dtype, "model scalar type")
      ->check(CLI::IsMember({"f32", "f64"}));

  LensArgs lens_args;
  auto* lens_cmd =
      app.add_subcommand("lens", "per-layer divergence from the final distribution");
  lens_cmd->add_option("--ckpt", lens_args.ckpt_path, "checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  lens_cmd->add_option("--config", lens_args.config_path, "run config (for the corpus)")
      ->required()
      ->check(CLI::ExistingFile);
  lens_cmd->add_option("--positions", lens_args.positions, "token positions to average");
  lens_cmd->add_option("--seq-len", lens_args.seq_len, "window length");
  lens_cmd->add_option("--out", lens_args.out_dir, "output directory");

  BankInspectArgs inspect_args;
  auto* bank_cmd = app.add_subcommand("bank", "bank file utilities");
  bank_cmd->require_subcommand(1);
  auto* inspect_cmd = bank_cmd->add_subcommand("inspect", "dump header and checksums");
  inspect_cmd->add_option("bank", inspect_args.bank_path, "bank file")
      ->required()
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--out", inspect_args.out_dir, "manifest directory");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the error and usage hint
    return 2;
  }

  try {
    if (*train_cmd) {
      train_args.seed_set = seed_opt->count() > 0;
      return train_args.dtype == "f64" ? run_train<double>(train_args)
                                       : run_train<float>(train_args);
    }
    if (*reparam_cmd)
      return with_checkpoint_dtype(reparam_args.ckpt_path, [&](auto tag) {
        return run_reparam<decltype(tag)>(reparam_args);
      });
    if (*verify_cmd)
      return with_checkpoint_dtype(verify_args.ckpt_path, [&](auto tag) {
        return run_verify<decltype(tag)>(verify_args);
      });
    if (*infer_cmd)
      return with_checkpoint_dtype(infer_args.ckpt_path, [&](auto tag) {
        return run_infer<decltype(tag)>(infer_args);
      });
    if (*cost_cmd) return run_cost(cost_args);
    if (*sweep_cmd)
      return sweep_args.dtype == "f64" ? run_sweep<double>(sweep_args)
                                       : run_sweep<float>(sweep_args);
    if (*lens_cmd)
      return with_checkpoint_dtype(lens_args.ckpt_path, [&](auto tag) {
        return run_lens<decltype(tag)>(lens_args);
      });
    if (*bank_cmd) return run_bank_inspect(inspect_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no command\n";
  return 2;
}

}  // namespace meki::cli
