#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fedcpc/central.hpp"
#include "fedcpc/checkpoint.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/util.hpp"
#include "test_helpers.hpp"

using namespace fedcpc;

namespace {

cpc::CpcConfig small_model() {
  cpc::CpcConfig c = cpc::CpcConfig::desk();
  c.input_dim = 6;
  c.enc_layers = 1;
  c.enc_units = 5;
  c.ctx_layers = 1;
  c.ctx_units = 4;
  c.future_steps = 2;
  c.num_negatives = 3;
  return c;
}

std::vector<corpus::UtteranceRecord> toy_corpus(std::size_t speakers, std::size_t utts) {
  std::vector<corpus::UtteranceRecord> out;
  for (std::size_t s = 0; s < speakers; ++s)
    for (std::size_t u = 0; u < utts; ++u) {
      std::string spk = "s" + std::to_string(s);
      out.push_back({spk + "-1-" + std::to_string(u), spk, corpus::ChapterId{"1"}, "-", 1.0});
    }
  return out;
}

audio::FeatureSequence toy_features(const corpus::UtteranceRecord& r) {
  std::uint64_t h = stable_hash(r.utterance_id);
  return audio::FeatureSequence{fedcpc::testing::random_tensor({8 + h % 6, 6}, h), 0.03};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

TEST(Central, EpochOrderIsAPermutation) {
  auto a = central::epoch_order(50, 1, 0);
  auto b = central::epoch_order(50, 1, 1);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 50u);
  EXPECT_EQ(*std::max_element(a.begin(), a.end()), 49u);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, central::epoch_order(50, 1, 0));
}

TEST(Central, WholeCorpusBatchGivesOneStepPerEpoch) {
  auto corpus = toy_corpus(3, 4);
  central::CentralConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = corpus.size();
  cfg.optimizer.lr = 1e-3;
  fed::RunOptions opts;
  opts.features = toy_features;
  auto r = central::run_central(corpus, cfg, small_model(), opts);
  ASSERT_EQ(r.metrics.size(), 3u);
  for (const auto& b : r.batches) EXPECT_EQ(b.size(), corpus.size());
}

TEST(Central, StepCountAndMixedSpeakerBatches) {
  auto corpus = toy_corpus(5, 5);
  central::CentralConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.optimizer.lr = 1e-3;
  fed::RunOptions opts;
  opts.features = toy_features;
  auto r = central::run_central(corpus, cfg, small_model(), opts);
  EXPECT_EQ(r.metrics.size(), 2u * 7u);  // ceil(25 / 4) per epoch
  bool mixed = false;
  for (const auto& ids : r.batches) {
    std::set<std::string> speakers;
    for (const auto& id : ids) speakers.insert(id.substr(0, id.find('-')));
    mixed |= speakers.size() > 1;
  }
  EXPECT_TRUE(mixed);

  cfg.max_steps = 3;
  EXPECT_EQ(central::run_central(corpus, cfg, small_model(), opts).metrics.size(), 3u);
}

TEST(Central, RunsAreDeterministic) {
  auto corpus = toy_corpus(4, 4);
  central::CentralConfig cfg;
  cfg.batch_size = 3;
  cfg.optimizer.lr = 1e-2;
  cfg.seed = 8;
  fed::RunOptions opts;
  opts.features = toy_features;
  auto a = central::run_central(corpus, cfg, small_model(), opts);
  auto b = central::run_central(corpus, cfg, small_model(), opts);
  EXPECT_TRUE(a.final_params == b.final_params);
  EXPECT_EQ(a.batches, b.batches);
  EXPECT_FALSE(a.final_params == a.initial);
}

TEST(Central, ZeroLearningRateKeepsWeights) {
  auto corpus = toy_corpus(2, 3);
  central::CentralConfig cfg;
  cfg.batch_size = 2;
  cfg.optimizer.kind = optim::Kind::sgd;
  cfg.optimizer.lr = 0.0;
  fed::RunOptions opts;
  opts.features = toy_features;
  auto r = central::run_central(corpus, cfg, small_model(), opts);
  EXPECT_TRUE(r.final_params == r.initial);
}

TEST(Central, ReferenceStepNormalizesWeights) {
  auto model = small_model();
  auto p = cpc::init_params(model, 2);
  ad::Tensor x1 = fedcpc::testing::random_tensor({9, 6}, 1), x2 = fedcpc::testing::random_tensor({10, 6}, 2);
  cpc::Sample raw[] = {{&x1, 1, 2.0}, {&x2, 2, 6.0}};
  cpc::Sample unit[] = {{&x1, 1, 0.25}, {&x2, 2, 0.75}};
  auto a = central::sgd_reference_step(p, raw, 0.1, model);
  auto b = central::sgd_reference_step(p, unit, 0.1, model);
  auto fa = a.flatten(), fb = b.flatten();
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i], fb[i], 1e-15);
  EXPECT_THROW(central::sgd_reference_step(p, {}, 0.1, model), ContractError);
  cpc::Sample zero[] = {{&x1, 1, 0.0}};
  EXPECT_THROW(central::sgd_reference_step(p, zero, 0.1, model), ContractError);
}

TEST(Central, CheckpointsShareTheFederatedHeader) {
  auto dir = std::filesystem::temp_directory_path() / "fedcpc_central_test";
  std::filesystem::remove_all(dir);
  auto corpus = toy_corpus(4, 4);
  auto model = small_model();
  fed::RunOptions opts;
  opts.features = toy_features;

  central::CentralConfig ccfg;
  ccfg.batch_size = 4;
  ccfg.optimizer.lr = 1e-3;
  opts.out_dir = (dir / "central").string();
  auto c = central::run_central(corpus, ccfg, model, opts);

  fed::FedConfig fcfg;
  fcfg.clients_per_round = 2;
  fcfg.client_batch_size = 2;
  fcfg.rounds_max = 2;
  opts.out_dir = (dir / "fed").string();
  auto f = fed::run_federated(corpus, fcfg, model, opts);

  std::string cb = read_file((dir / "central" / "final.ckpt").string());
  std::string fb = read_file((dir / "fed" / "final.ckpt").string());
  std::string header = cpc::checkpoint_header(c.final_params);
  EXPECT_EQ(cb.substr(0, header.size()), header);
  EXPECT_EQ(fb.substr(0, header.size()), header);
  EXPECT_EQ(c.checkpoints.size(), 2u);  // one per epoch, then final
  EXPECT_TRUE(cpc::load_checkpoint(c.checkpoints.back()).params == c.final_params);
  EXPECT_EQ(train::load_metrics((dir / "central" / "metrics.tsv").string()).size(), 4u);
  std::filesystem::remove_all(dir);
}

TEST(Central, ConfigValidation) {
  central::CentralConfig cfg;
  cfg.optimizer.kind = optim::Kind::plain;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  EXPECT_THROW(central::run_central({}, cfg, small_model()), ConfigError);
}
