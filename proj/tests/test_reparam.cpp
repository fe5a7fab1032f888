// Folding the projector into the expert table: the folded row for a token
// must equal the training-path expert vector for that token, and the
// lookup-path forward must reproduce the training-path forward.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "meki/reparam.hpp"
#include "testutil.hpp"

namespace meki {
namespace {

template <class S>
ModelParams<S> make_model(uint64_t seed, Variant variant = Variant::full) {
  ModelConfig cfg = test::tiny_config();
  cfg.variant = variant;
  ModelParams<S> params = ModelParams<S>::init(cfg, seed);
  test::randomize_params(params, seed + 100);
  return params;
}

TEST(Fold, AlphaZeroGivesZeroTables) {
  ModelParams<double> params = make_model<double>(1);
  for (auto& b : params.blocks) b.meki.alpha.value.data[0] = 0.0;
  FusedBank<double> bank = build_fused_bank(params, Dtype::f64);
  for (const auto& t : bank.tables)
    for (double v : t.data) EXPECT_EQ(v, 0.0);
}

TEST(Fold, BetaZeroReducesToScaledNormOfMemory) {
  ModelParams<double> params = make_model<double>(2);
  for (auto& b : params.blocks) b.meki.beta.value.data[0] = 0.0;
  FusedBank<double> bank = build_fused_bank(params, Dtype::f64);

  for (size_t l = 0; l < params.blocks.size(); ++l) {
    MekiLayerParams<double>& m = params.blocks[l].meki;
    Tensor<double> normed = ops::rmsnorm(m.memory.value, m.expert_norm_gamma.value,
                                         params.config.eps);
    double alpha = m.alpha.value.data[0];
    for (int64_t i = 0; i < normed.numel(); ++i)
      EXPECT_EQ(bank.tables[l].data[i], alpha * normed.data[i]) << "layer " << l;
  }
}

TEST(Fold, RowEqualsTrainingExpertVector) {
  ModelParams<double> params = make_model<double>(3);
  const ModelConfig& cfg = params.config;
  FusedBank<double> bank = build_fused_bank(params, Dtype::f64);

  for (size_t l = 0; l < params.blocks.size(); ++l) {
    Tape<double> t(false);
    MekiLeaves<double> leaves = bind_meki(t, params.blocks[l].meki);
    Var<double> e_global = t.leaf(params.embedding);
    for (int32_t id : {0, 3, 7, (int32_t)cfg.vocab_size - 1}) {
      const Tensor<double>& row =
          t.val(expert_vector(t, leaves, e_global, {id}, cfg.variant,
                              cfg.projector_kind, cfg.eps));
      for (int64_t j = 0; j < cfg.d_mem; ++j)
        EXPECT_EQ(row.at(0, j), bank.tables[l].at(id, j))
            << "layer " << l << " token " << id;
    }
  }
}

TEST(Fold, SinglePrecisionRowsStayCloseToTrainingPath) {
  ModelParams<float> params = make_model<float>(4);
  const ModelConfig& cfg = params.config;
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);

  double worst = 0.0;
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    Tape<float> t(false);
    MekiLeaves<float> leaves = bind_meki(t, params.blocks[l].meki);
    Var<float> e_global = t.leaf(params.embedding);
    std::vector<int32_t> all((size_t)cfg.vocab_size);
    for (size_t i = 0; i < all.size(); ++i) all[i] = (int32_t)i;
    const Tensor<float>& rows =
        t.val(expert_vector(t, leaves, e_global, all, cfg.variant,
                            cfg.projector_kind, (float)cfg.eps));
    for (int64_t i = 0; i < rows.numel(); ++i)
      worst = std::max(worst,
                       std::abs((double)rows.data[i] - (double)bank.tables[l].data[i]));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Fold, HalfPrecisionRowsAreExactlyRepresentable) {
  ModelParams<float> params = make_model<float>(5);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f16);
  for (const auto& t : bank.tables)
    for (float v : t.data) EXPECT_EQ(f16_to_f32(f32_to_f16(v)), v);
}

TEST(Fold, DisabledBranchRejected) {
  ModelParams<double> params = make_model<double>(6, Variant::disabled);
  EXPECT_THROW(build_fused_bank(params, Dtype::f64), ConfigError);
}

TEST(Fold, DoubleBankRequiresDoubleModel) {
  ModelParams<float> params = make_model<float>(7);
  EXPECT_THROW(build_fused_bank(params, Dtype::f64), ConfigError);
}

TEST(Equivalence, DoublePrecisionLogitsMatchTightly) {
  ModelParams<double> params = make_model<double>(8);
  FusedBank<double> bank = build_fused_bank(params, Dtype::f64);
  EquivalenceReport rep = verify_equivalence(params, bank, 8, 16, 1e-10);
  EXPECT_TRUE(rep.pass) << "max diff " << rep.max_abs_diff_logits;
  EXPECT_EQ(rep.sequences, 8);
  EXPECT_EQ(rep.per_layer_max_diff.size(), (size_t)params.config.n_layers);
}

TEST(Equivalence, SinglePrecisionLogitsMatchLoosely) {
  ModelParams<float> params = make_model<float>(9);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);
  EquivalenceReport rep = verify_equivalence(params, bank, 8, 16, 1e-4);
  EXPECT_TRUE(rep.pass) << "max diff " << rep.max_abs_diff_logits;
}

TEST(Equivalence, HalfPrecisionDriftIsFiniteAndReported) {
  ModelParams<float> params = make_model<float>(10);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f16);
  EquivalenceReport rep = verify_equivalence(params, bank, 4, 16, 1e-4);
  EXPECT_TRUE(std::isfinite(rep.max_abs_diff_logits));
  EXPECT_GT(rep.max_abs_diff_logits, 0.0);
  // Informational: half-precision rows trade accuracy for 2x smaller banks.
  std::printf("f16 bank logit drift: %.3e\n", rep.max_abs_diff_logits);
}

TEST(Equivalence, ProvenanceMismatchRejectedUnlessWaived) {
  ModelParams<float> a = make_model<float>(11);
  ModelParams<float> b = make_model<float>(12);
  FusedBank<float> bank = build_fused_bank(a, Dtype::f32);
  EXPECT_THROW(verify_equivalence(b, bank, 2, 8, 1e-4), IntegrityError);
  EquivalenceReport rep = verify_equivalence(b, bank, 2, 8, 1e-4, 1234, false);
  EXPECT_EQ(rep.sequences, 2);
}

TEST(Equivalence, ConfigMismatchRejected) {
  ModelParams<float> params = make_model<float>(13);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);
  bank.tables.pop_back();
  EXPECT_THROW(verify_equivalence(params, bank, 2, 8, 1e-4), ConfigError);
}

TEST(BankFile, RoundTripPreservesRowsAndLeavesFileUntouched) {
  ModelParams<float> params = make_model<float>(14);
  const ModelConfig& cfg = params.config;
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);

  std::filesystem::path dir = test::make_temp_dir("bank");
  std::string path = (dir / "test.mekb").string();
  write_bank(bank, cfg, path);

  std::string before = detail::read_whole_file(path);

  FusedBank<float> loaded = load_fused_bank<float>(path, cfg);
  EXPECT_EQ(loaded.provenance, bank.provenance);
  EXPECT_EQ(loaded.dtype, bank.dtype);
  ASSERT_EQ(loaded.tables.size(), bank.tables.size());
  for (size_t l = 0; l < bank.tables.size(); ++l)
    EXPECT_TRUE(test::bits_equal(loaded.tables[l], bank.tables[l]));

  // Reading rows and running the lookup path must not modify the file.
  Tape<float> t(false);
  MekiLeaves<float> leaves = bind_meki(t, params.blocks[0].meki);
  Rng rng(15);
  Tensor<float> h = random_normal<float>(rng, {4, cfg.d_model}, 1.0f);
  meki_forward_infer(t, loaded, 0, leaves, {1, 2, 3, 4}, t.constant(std::move(h)), cfg);
  std::string after = detail::read_whole_file(path);
  EXPECT_EQ(before, after);

  std::filesystem::remove_all(dir);
}

TEST(BankFile, DimensionMismatchRejectedOnLoad) {
  ModelParams<float> params = make_model<float>(16);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);
  std::filesystem::path dir = test::make_temp_dir("bankdim");
  std::string path = (dir / "test.mekb").string();
  write_bank(bank, params.config, path);

  ModelConfig other = params.config;
  other.d_mem = params.config.d_mem / 2;
  EXPECT_THROW(load_fused_bank<float>(path, other), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(BankFile, DoubleBankHasNoFileForm) {
  ModelParams<double> params = make_model<double>(17);
  FusedBank<double> bank = build_fused_bank(params, Dtype::f64);
  std::filesystem::path dir = test::make_temp_dir("bankf64");
  std::string path = (dir / "test.mekb").string();
  EXPECT_THROW(write_bank(bank, params.config, path), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(InferPath, BankLayerOutOfRangeRejected) {
  ModelParams<float> params = make_model<float>(18);
  FusedBank<float> bank = build_fused_bank(params, Dtype::f32);
  Tape<float> t(false);
  MekiLeaves<float> leaves = bind_meki(t, params.blocks[0].meki);
  Rng rng(19);
  Tensor<float> h = random_normal<float>(rng, {1, params.config.d_model}, 1.0f);
  Var<float> hv = t.constant(std::move(h));
  EXPECT_THROW(
      meki_forward_infer(t, bank, params.config.n_layers, leaves, {0}, hv, params.config),
      std::out_of_range);
}

}  // namespace
}  // namespace meki
