#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fedcpc/checkpoint.hpp"
#include "fedcpc/cpc_model.hpp"
#include "fedcpc/errors.hpp"
#include "reference_cpc.hpp"
#include "test_helpers.hpp"

using namespace fedcpc;
using fedcpc::testing::random_tensor;
using fedcpc::testing::reference_forward;
using fedcpc::testing::reference_infonce;

namespace {

cpc::CpcConfig tiny(std::size_t k, std::size_t negatives) {
  cpc::CpcConfig c = cpc::CpcConfig::desk();
  c.input_dim = 5;
  c.enc_layers = 2;
  c.enc_units = 4;
  c.ctx_layers = 2;
  c.ctx_units = 3;
  c.future_steps = k;
  c.num_negatives = negatives;
  return c;
}

}  // namespace

TEST(CpcModel, DeskLayout) {
  auto layout = cpc::parameter_layout(cpc::CpcConfig::desk());
  std::vector<std::string> names;
  for (const auto& s : layout) names.push_back(s.name);
  std::vector<std::string> expected = {"enc.0.weight",        "enc.0.bias",   "enc.1.weight",   "enc.1.bias",
                                       "ar.0.input_weight",   "ar.0.recurrent_weight",          "ar.0.bias",
                                       "head.1.weight",       "head.1.bias",  "head.2.weight",  "head.2.bias",
                                       "head.3.weight",       "head.3.bias",  "head.4.weight",  "head.4.bias"};
  EXPECT_EQ(names, expected);
  EXPECT_EQ(layout[0].shape, (ad::Shape{768, 64}));
  EXPECT_EQ(layout[4].shape, (ad::Shape{64, 512}));
  EXPECT_EQ(layout[5].shape, (ad::Shape{128, 512}));
  EXPECT_EQ(layout[7].shape, (ad::Shape{128, 64}));
  std::size_t count = 768 * 64 + 64 + 64 * 64 + 64 + 64 * 512 + 128 * 512 + 512 + 4 * (128 * 64 + 64);
  EXPECT_EQ(cpc::parameter_count(cpc::CpcConfig::desk()), count);
}

TEST(CpcModel, PaperPresetNeedsHorizon) {
  EXPECT_THROW(cpc::CpcConfig::paper(0).validate(), ConfigError);
  auto c = cpc::CpcConfig::paper(12);
  EXPECT_EQ(c.enc_units, 512u);
  EXPECT_EQ(c.ctx_layers, 6u);
  EXPECT_EQ(c.ctx_units, 1024u);
  c.ctx_units = 512;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(CpcModel, InitIsDeterministicAndBounded) {
  auto cfg = cpc::CpcConfig::desk();
  auto a = cpc::init_params(cfg, 5);
  EXPECT_TRUE(a == cpc::init_params(cfg, 5));
  EXPECT_FALSE(a == cpc::init_params(cfg, 6));
  const auto& w0 = a.get("enc.0.weight");
  const double bound = std::sqrt(1.0 / 768.0);
  for (double v : w0.values()) EXPECT_LE(std::abs(v), bound);
  const auto& bias = a.get("ar.0.bias");
  for (std::size_t j = 128; j < 256; ++j) EXPECT_EQ(bias[j], 1.0);  // forget gate block
}

TEST(CpcModel, FlattenRoundTripAndInferConfig) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 3);
  auto flat = p.flatten();
  auto q = cpc::ModelParams::unflatten(cpc::parameter_layout(cfg), flat);
  EXPECT_TRUE(p == q);
  auto inferred = p.infer_config(cfg);
  EXPECT_TRUE(inferred.same_architecture(cfg));
  EXPECT_THROW(cpc::ModelParams::unflatten(cpc::parameter_layout(cfg), std::vector<double>(3)), DimensionError);
}

TEST(CpcModel, UniformScoresGiveLnNPerHorizon) {
  for (std::size_t n : {3u, 4u, 8u}) {
    ad::Tape tape;
    ad::Var scores = tape.constant(ad::Tensor::zeros({5, n}));
    EXPECT_DOUBLE_EQ(cpc::contrastive_nll(scores).value().item(), std::log(static_cast<double>(n)));
  }
  // Zero heads make every candidate score equal.
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 1);
  for (std::size_t k = 1; k <= 2; ++k) {
    for (double& v : p.get("head." + std::to_string(k) + ".weight").mutable_values()) v = 0.0;
    for (double& v : p.get("head." + std::to_string(k) + ".bias").mutable_values()) v = 0.0;
  }
  double loss = cpc::infonce_value(p, random_tensor({6, 5}, 2), cfg, 9);
  EXPECT_DOUBLE_EQ(loss, 2.0 * std::log(4.0));
}

TEST(CpcModel, InfoNceMatchesReferenceSum) {
  for (std::size_t negatives : {2u, 3u}) {
    auto cfg = tiny(2, negatives);
    auto p = cpc::init_params(cfg, 11);
    ad::Tensor x = random_tensor({6, 5}, 12, 2.0);
    auto [z, c] = reference_forward(p, cfg, x);
    Rng rng(77);
    long double expect = reference_infonce(p, cfg, z, c, rng);
    double got = cpc::infonce_value(p, x, cfg, 77);
    EXPECT_NEAR(got, static_cast<double>(expect), 1e-10) << "N = " << negatives + 1;
  }
}

TEST(CpcModel, ForwardMatchesReferenceLoops) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 4);
  ad::Tensor x = random_tensor({7, 5}, 5);
  auto [z_ref, c_ref] = reference_forward(p, cfg, x);
  auto z = cpc::encode(p, x);
  auto c = cpc::contextualize(p, z);
  for (std::size_t t = 0; t < 7; ++t) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(z.z.at(t, j), static_cast<double>(z_ref[t][j]), 1e-13);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c.c.at(t, j), static_cast<double>(c_ref[t][j]), 1e-13);
  }
}

TEST(CpcModel, LossLimitsAndInvariances) {
  ad::Tape tape;
  ad::Tensor s = ad::Tensor::matrix({{0.3, -1.2, 0.8, 0.1}, {2.0, 0.5, -0.5, 1.0}});
  double base = cpc::contrastive_nll(tape.constant(s)).value().item();
  EXPECT_GE(base, 0.0);

  ad::Tensor shifted = s;
  for (double& v : shifted.mutable_values()) v += 123.5;
  EXPECT_NEAR(cpc::contrastive_nll(tape.constant(shifted)).value().item(), base, 1e-12);

  ad::Tensor confident = s;
  confident.at(0, 0) = 1e4;
  confident.at(1, 0) = 1e4;
  EXPECT_LT(cpc::contrastive_nll(tape.constant(confident)).value().item(), 1e-12);

  // Temperature rescales logits without moving the argmax.
  ad::Var scaled = ad::scale(tape.constant(s), 1.0 / 0.1);
  for (std::size_t r = 0; r < 2; ++r) {
    std::size_t a = 0, b = 0;
    for (std::size_t c = 1; c < 4; ++c) {
      if (s.at(r, c) > s.at(r, a)) a = c;
      if (scaled.value().at(r, c) > scaled.value().at(r, b)) b = c;
    }
    EXPECT_EQ(a, b);
  }
}

TEST(CpcModel, EncoderIsFrameLocal) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 8);
  ad::Tensor x = random_tensor({6, 5}, 9);
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  ad::Tensor xp = x;
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 5; ++j) xp.at(t, j) = x.at(perm[t], j);
  auto z = cpc::encode(p, x).z;
  auto zp = cpc::encode(p, xp).z;
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(zp.at(t, j), z.at(perm[t], j));
}

TEST(CpcModel, ContextIsCausal) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 8);
  ad::Tensor x = random_tensor({8, 5}, 10);
  ad::Tensor y = x;
  for (std::size_t j = 0; j < 5; ++j) y.at(5, j) += 1.0;
  auto c1 = cpc::contextualize(p, cpc::encode(p, x)).c;
  auto c2 = cpc::contextualize(p, cpc::encode(p, y)).c;
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c1.at(t, j), c2.at(t, j));
}

TEST(CpcModel, NegativeSampling) {
  Rng a(3), b(3);
  EXPECT_EQ(cpc::sample_negatives(4, 10, 3, a), cpc::sample_negatives(4, 10, 3, b));
  EXPECT_THROW(cpc::sample_negatives(0, 3, 3, a), TooShortError);

  // Each non-target index is drawn with probability 3/9; chi-square over 1e5 draws.
  Rng rng(2024);
  std::vector<double> counts(10, 0.0);
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) {
    auto neg = cpc::sample_negatives(4, 10, 3, rng);
    std::sort(neg.begin(), neg.end());
    ASSERT_EQ(std::adjacent_find(neg.begin(), neg.end()), neg.end());
    for (std::size_t j : neg) {
      ASSERT_NE(j, 4u);
      counts[j] += 1.0;
    }
  }
  const double expected = draws * 3.0 / 9.0;
  double chi2 = 0.0;
  for (std::size_t j = 0; j < 10; ++j)
    if (j != 4) chi2 += (counts[j] - expected) * (counts[j] - expected) / expected;
  EXPECT_LT(chi2, 26.12);  // 8 dof, p = 0.001
}

TEST(CpcModel, ShortSequencesAreRejected) {
  auto cfg = tiny(4, 7);  // needs T > 4 and T >= 8
  auto p = cpc::init_params(cfg, 1);
  EXPECT_THROW(cpc::infonce_value(p, random_tensor({4, 5}, 1), cfg, 1), TooShortError);
  EXPECT_THROW(cpc::infonce_value(p, random_tensor({7, 5}, 1), cfg, 1), TooShortError);
  EXPECT_NO_THROW(cpc::infonce_value(p, random_tensor({8, 5}, 1), cfg, 1));
  EXPECT_EQ(cfg.min_frames(), 8u);
}

TEST(CpcModel, InitialLossNearUniformPerHorizon) {
  // Per-horizon loss at initialization, over several seeds, on random inputs.
  auto cfg = cpc::CpcConfig::desk();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = cpc::init_params(cfg, seed);
    double loss = cpc::infonce_value(p, random_tensor({40, 768}, seed + 100), cfg, seed);
    double per_horizon = loss / static_cast<double>(cfg.future_steps);
    EXPECT_NEAR(per_horizon, std::log(8.0), 0.05 * std::log(8.0)) << "seed " << seed;
  }
}

TEST(CpcModel, FullLossGradientMatchesFiniteDifferences) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 21);
  ad::Tensor x = random_tensor({9, 5}, 22);
  cpc::Sample s{&x, 5, 1.0};
  auto lg = cpc::weighted_loss_and_grad(p, std::span(&s, 1), cfg);
  EXPECT_DOUBLE_EQ(lg.loss, cpc::infonce_value(p, x, cfg, 5));
  auto flat = p.flatten();
  const double h = 1e-6;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto up = flat, down = flat;
    up[i] += h;
    down[i] -= h;
    auto pu = p, pd = p;
    pu.assign_flat(up);
    pd.assign_flat(down);
    double numeric = (cpc::infonce_value(pu, x, cfg, 5) - cpc::infonce_value(pd, x, cfg, 5)) / (2 * h);
    // Central-difference roundoff is about eps * loss / h ~ 1e-9 in absolute terms.
    EXPECT_LE(std::abs(numeric - lg.grad[i]), 1e-4 * std::max(std::abs(numeric), std::abs(lg.grad[i])) + 1e-8) << "parameter entry " << i << " analytic " << lg.grad[i] << " numeric " << numeric;
  }
}

TEST(CpcModel, WeightedLossIsLinearInWeights) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 2);
  ad::Tensor x1 = random_tensor({9, 5}, 1), x2 = random_tensor({10, 5}, 2);
  cpc::Sample one[] = {{&x1, 1, 1.0}};
  cpc::Sample two[] = {{&x2, 2, 1.0}};
  cpc::Sample both[] = {{&x1, 1, 0.25}, {&x2, 2, 0.75}};
  auto a = cpc::weighted_loss_and_grad(p, one, cfg);
  auto b = cpc::weighted_loss_and_grad(p, two, cfg);
  auto ab = cpc::weighted_loss_and_grad(p, both, cfg);
  EXPECT_NEAR(ab.loss, 0.25 * a.loss + 0.75 * b.loss, 1e-12);
  for (std::size_t i = 0; i < ab.grad.size(); ++i) EXPECT_NEAR(ab.grad[i], 0.25 * a.grad[i] + 0.75 * b.grad[i], 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = tiny(2, 3);
  auto p = cpc::init_params(cfg, 31);
  p.get("enc.0.bias")[0] = -0.0;
  p.get("enc.0.bias")[1] = 1e-310;  // subnormal
  std::string bytes = cpc::serialize_checkpoint(p, "seed = 1\nmode = central\n");
  auto back = cpc::parse_checkpoint(bytes);
  EXPECT_TRUE(back.params == p);
  EXPECT_EQ(back.metadata, "seed = 1\nmode = central\n");
  EXPECT_TRUE(std::signbit(back.params.get("enc.0.bias")[0]));
  EXPECT_EQ(cpc::serialize_checkpoint(back.params, back.metadata), bytes);
  EXPECT_EQ(bytes.rfind(cpc::checkpoint_header(p), 0), 0u);
}

TEST(Checkpoint, MalformedInputReportsLine) {
  auto p = cpc::init_params(tiny(2, 3), 1);
  std::string bytes = cpc::serialize_checkpoint(p, "");
  std::string bad = bytes;
  bad.replace(bad.find("enc.0.bias 2"), 12, "enc.0.bias x");
  try {
    cpc::parse_checkpoint(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
  EXPECT_THROW(cpc::parse_checkpoint(bytes.substr(0, bytes.size() / 2)), ParseError);
  EXPECT_THROW(cpc::parse_checkpoint("NOT A CHECKPOINT\n"), ParseError);
}
