#include "fedcpc/central.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "fedcpc/checkpoint.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::central {

namespace {

constexpr std::uint64_t kShuffleTag = 0x5f1e;

}  // namespace

void CentralConfig::validate() const {
  if (epochs < 1) throw ConfigError("central: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("central: batch_size must be >= 1");
  if (optimizer.kind == optim::Kind::plain) throw ConfigError("central: optimizer must be adam or sgd");
  optimizer.validate();
}

std::vector<std::size_t> epoch_order(std::size_t corpus_size, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, epoch, kShuffleTag}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

cpc::ModelParams sgd_reference_step(const cpc::ModelParams& params, std::span<const cpc::Sample> batch, double lr,
                                    const cpc::CpcConfig& model) {
  if (batch.empty()) throw ContractError("sgd_reference_step: empty batch");
  double total = 0.0;
  for (const auto& s : batch) total += s.weight;
  if (!(total > 0.0)) throw ContractError("sgd_reference_step: sample weights must sum to a positive value");
  std::vector<cpc::Sample> normalized(batch.begin(), batch.end());
  for (auto& s : normalized) s.weight /= total;
  cpc::LossAndGrad lg = cpc::weighted_loss_and_grad(params, normalized, model);
  std::vector<double> w = params.flatten();
  optim::sgd_step(w, lg.grad, lr);
  cpc::ModelParams out = params;
  out.assign_flat(w);
  return out;
}

CentralResult run_central(const std::vector<corpus::UtteranceRecord>& corpus, const CentralConfig& config,
                          const cpc::CpcConfig& model, const fed::RunOptions& options) {
  config.validate();
  model.validate();
  if (corpus.empty()) throw ConfigError("run_central: empty corpus");
  const train::FeatureSource features = options.features ? options.features : train::default_feature_source();
  const bool deterministic = deterministic_mode();

  CentralResult result;
  result.initial = cpc::init_params(model, config.seed);
  cpc::ModelParams params = result.initial;
  std::vector<double> weights = params.flatten();
  optim::AdamState adam(weights.size());

  const std::size_t steps_per_epoch = (corpus.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t every = config.checkpoint_every ? config.checkpoint_every : steps_per_epoch;
  std::size_t step = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const auto order = epoch_order(corpus.size(), config.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) {
        done = true;
        break;
      }
      const auto t0 = std::chrono::steady_clock::now();
      std::size_t end = std::min(start + config.batch_size, order.size());
      std::vector<audio::FeatureSequence> usable;
      std::vector<std::string> ids;
      std::vector<std::string> batch_ids;
      for (std::size_t i = start; i < end; ++i) {
        const auto& record = corpus[order[i]];
        batch_ids.push_back(record.utterance_id);
        try {
          audio::FeatureSequence f = features(record);
          if (f.frames() >= model.min_frames()) {
            usable.push_back(std::move(f));
            ids.push_back(record.utterance_id);
            continue;
          }
        } catch (const TooShortError&) {
        }
        ++result.utterances_skipped;
        log_warning("skipping utterance " + record.utterance_id + ": too short");
      }
      if (usable.empty()) {
        log_warning("central: every utterance of a batch was too short; step skipped");
        continue;
      }
      ++step;
      const double inv_n = 1.0 / static_cast<double>(usable.size());
      std::vector<cpc::Sample> samples;
      for (std::size_t i = 0; i < usable.size(); ++i)
        samples.push_back({&usable[i].x, train::negative_seed(config.seed, step, ids[i]), inv_n});
      cpc::LossAndGrad lg = cpc::weighted_loss_and_grad(params, samples, model);
      if (config.optimizer.kind == optim::Kind::adam) {
        optim::adam_step(weights, lg.grad, adam, config.optimizer);
      } else {
        optim::sgd_step(weights, lg.grad, config.optimizer.lr);
      }
      params.assign_flat(weights);

      train::RoundMetrics m;
      m.round = step;
      m.clients = 1;
      m.utterances = end - start;
      m.mean_client_loss = lg.loss;
      m.grad_norm = train::l2_norm(lg.grad);
      m.wall_ms = deterministic ? 0.0
                                : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                                      .count();
      result.metrics.push_back(m);
      result.batches.push_back(std::move(batch_ids));
      if (options.on_round) options.on_round(m);
      if (!options.out_dir.empty() && step % every == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_step_%06zu.ckpt", step);
        std::string path = (std::filesystem::path(options.out_dir) / name).string();
        cpc::save_checkpoint(path, params, options.metadata);
        result.checkpoints.push_back(path);
      }
    }
  }

  result.final_params = params;
  if (!options.out_dir.empty()) {
    std::string path = (std::filesystem::path(options.out_dir) / "final.ckpt").string();
    cpc::save_checkpoint(path, result.final_params, options.metadata);
    result.checkpoints.push_back(path);
    train::save_metrics((std::filesystem::path(options.out_dir) / "metrics.tsv").string(), result.metrics,
                        options.metadata);
  }
  return result;
}

}  // namespace fedcpc::central
