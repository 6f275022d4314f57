#include "fedcpc/federated.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "fedcpc/checkpoint.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::fed {

namespace {

constexpr std::uint64_t kAssignTag = 0xa551;
constexpr std::uint64_t kSelectTag = 0x5e1e;

std::string round_checkpoint_name(std::size_t round) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_round_%06zu.ckpt", round);
  return buf;
}

}  // namespace

void FedConfig::validate() const {
  if (clients_per_round < 1) throw ConfigError("fed: clients_per_round must be >= 1");
  if (client_batch_size < 1 || client_batch_size > 8) throw ConfigError("fed: client_batch_size must be in [1, 8]");
  if (local_steps < 1 || batches_per_step < 1) throw ConfigError("fed: local_steps and batches_per_step must be >= 1");
  if (fedsgd && (local_steps != 1 || batches_per_step != 1)) {
    throw ConfigError("fed: FedSGD requires local_steps = 1 and batches_per_step = 1");
  }
  if (!(client_lr > 0.0) || !std::isfinite(client_lr)) throw ConfigError("fed: client_lr must be > 0");
  if (server.kind == optim::Kind::sgd) throw ConfigError("fed: server optimizer must be adam or plain");
  server.validate();
}

std::optional<std::vector<std::size_t>> select_clients(const std::vector<corpus::ClientStream>& streams,
                                                       std::size_t clients_per_round, Rng& rng) {
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < streams.size(); ++i)
    if (!streams[i].exhausted()) live.push_back(i);
  if (live.empty()) return std::nullopt;
  std::size_t k = std::min(clients_per_round, live.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, live.size() - 1);
    std::swap(live[i], live[pick(rng)]);
  }
  live.resize(k);
  std::sort(live.begin(), live.end());
  return live;
}

ClientResult client_update(std::span<const double> weights, corpus::ClientStream& stream, std::size_t round,
                           const FedConfig& config, const cpc::CpcConfig& model,
                           const train::FeatureSource& features) {
  ClientResult result;
  std::vector<audio::FeatureSequence> usable;
  std::vector<std::string> ids;
  for (std::size_t b = 0; b < config.batches_per_step; ++b) {
    while (true) {
      auto batch = stream.next_batch();
      if (!batch) return result;  // ran dry mid-round: contributes nothing
      result.consumed += batch->size();
      std::size_t before = usable.size();
      for (const auto& record : *batch) {
        try {
          audio::FeatureSequence f = features(record);
          if (f.frames() >= model.min_frames()) {
            usable.push_back(std::move(f));
            ids.push_back(record.utterance_id);
            continue;
          }
        } catch (const TooShortError&) {
        }
        ++result.skipped;
        log_warning("skipping utterance " + record.utterance_id + ": shorter than " +
                    std::to_string(model.min_frames()) + " feature frames");
      }
      if (usable.size() > before) break;
    }
  }

  const double inv_n = 1.0 / static_cast<double>(usable.size());
  std::vector<cpc::Sample> samples;
  samples.reserve(usable.size());
  for (std::size_t i = 0; i < usable.size(); ++i)
    samples.push_back({&usable[i].x, train::negative_seed(config.seed, round, ids[i]), inv_n});

  cpc::ModelParams params = cpc::ModelParams::unflatten(cpc::parameter_layout(model), weights);
  std::vector<double> local(weights.begin(), weights.end());
  ClientUpdate update;
  for (std::size_t step = 0; step < config.local_steps; ++step) {
    if (step > 0) params.assign_flat(local);
    cpc::LossAndGrad lg = cpc::weighted_loss_and_grad(params, samples, model);
    if (step == 0) update.mean_loss = lg.loss;
    optim::sgd_step(local, lg.grad, config.client_lr);
  }
  update.weights = std::move(local);
  update.num_samples = usable.size();
  update.client = stream.client_index();
  update.round = round;
  result.update = std::move(update);
  return result;
}

std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates) {
  std::size_t n = 0;
  for (const auto& u : updates) {
    if (u.num_samples == 0) throw ContractError("aggregate: client update with n_k = 0");
    n += u.num_samples;
  }
  std::vector<double> w;
  w.reserve(updates.size());
  for (const auto& u : updates) w.push_back(static_cast<double>(u.num_samples) / static_cast<double>(n));
  return w;
}

std::vector<double> aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ContractError("aggregate: no client updates");
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ClientUpdate* a, const ClientUpdate* b) { return a->client < b->client; });
  const std::size_t len = ordered.front()->weights.size();
  std::size_t n = 0;
  for (const ClientUpdate* u : ordered) {
    if (u->weights.size() != len) throw ContractError("aggregate: weight vectors differ in length");
    if (u->num_samples == 0) throw ContractError("aggregate: client update with n_k = 0");
    n += u->num_samples;
  }
  std::vector<double> out(len, 0.0);
  for (const ClientUpdate* u : ordered) {
    const double share = static_cast<double>(u->num_samples) / static_cast<double>(n);
    for (std::size_t i = 0; i < len; ++i) out[i] += share * u->weights[i];
  }
  return out;
}

ServerState server_step(const ServerState& state, std::span<const double> averaged,
                        const optim::OptimizerConfig& server) {
  if (averaged.size() != state.weights.size()) throw DimensionError("server_step: aggregate length mismatch");
  std::vector<double> pseudo_grad(averaged.size());
  for (std::size_t i = 0; i < averaged.size(); ++i) {
    pseudo_grad[i] = state.weights[i] - averaged[i];
    if (!std::isfinite(pseudo_grad[i])) {
      throw NonFiniteError("server_step: pseudo-gradient entry " + std::to_string(i) + " is not finite; round rejected");
    }
  }
  ServerState next = state;
  switch (server.kind) {
    case optim::Kind::plain:
      next.weights.assign(averaged.begin(), averaged.end());
      break;
    case optim::Kind::adam:
      if (next.moments.m.size() != next.weights.size()) next.moments = optim::AdamState(next.weights.size());
      optim::adam_step(next.weights, pseudo_grad, next.moments, server);
      break;
    case optim::Kind::sgd:
      optim::sgd_step(next.weights, pseudo_grad, server.lr);
      break;
  }
  ++next.round;
  return next;
}

std::vector<corpus::ClientStream> build_streams(const std::vector<corpus::UtteranceRecord>& corpus,
                                                const FedConfig& config) {
  auto silos = corpus::partition_by_speaker(corpus);
  std::size_t clients = config.num_clients ? config.num_clients : silos.size();
  Rng rng(derive_seed({config.seed, kAssignTag}));
  return corpus::assign_to_clients(silos, clients, config.client_batch_size, rng);
}

FedResult run_federated(const std::vector<corpus::UtteranceRecord>& corpus, const FedConfig& config,
                        const cpc::CpcConfig& model, const RunOptions& options) {
  config.validate();
  model.validate();
  if (corpus.empty()) throw ConfigError("run_federated: empty corpus");
  const train::FeatureSource features = options.features ? options.features : train::default_feature_source();
  const bool deterministic = deterministic_mode();
  const std::size_t workers = deterministic ? 1 : std::max<std::size_t>(1, config.workers);
  const std::size_t every = config.checkpoint_every ? config.checkpoint_every
                                                    : std::max<std::size_t>(1, config.rounds_max / 10);

  std::vector<corpus::ClientStream> streams = build_streams(corpus, config);

  FedResult result;
  result.initial = cpc::init_params(model, config.seed);
  const auto layout = result.initial.layout();
  ServerState state;
  state.weights = result.initial.flatten();
  state.moments = optim::AdamState(state.weights.size());

  std::size_t attempt = 0;
  while (state.round < config.rounds_max) {
    Rng select_rng(derive_seed({config.seed, attempt, kSelectTag}));
    auto selected = select_clients(streams, config.clients_per_round, select_rng);
    if (!selected) break;  // single pass complete
    const auto start = std::chrono::steady_clock::now();

    std::vector<ClientResult> results(selected->size());
    parallel_for(selected->size(), workers, [&](std::size_t i) {
      results[i] = client_update(state.weights, streams[(*selected)[i]], attempt, config, model, features);
    });
    ++attempt;

    std::size_t consumed = 0;
    std::vector<ClientUpdate> updates;
    for (auto& r : results) {
      consumed += r.consumed;
      result.utterances_skipped += r.skipped;
      if (r.update) updates.push_back(std::move(*r.update));
    }
    result.utterances_consumed += consumed;
    state.utterances_consumed += consumed;
    if (updates.empty()) {
      log_warning("round aborted: no selected client produced an update");
      continue;
    }

    std::vector<double> averaged = aggregate(updates);
    ServerState next;
    try {
      next = server_step(state, averaged, config.server);
    } catch (const NonFiniteError& e) {
      log_warning(e.what());
      continue;
    }

    train::RoundMetrics m;
    m.clients = updates.size();
    m.utterances = consumed;
    std::size_t n = 0;
    double loss = 0.0;
    for (const auto& u : updates) {
      n += u.num_samples;
      loss += static_cast<double>(u.num_samples) * u.mean_loss;
    }
    m.mean_client_loss = loss / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < averaged.size(); ++i) {
      double g = state.weights[i] - averaged[i];
      sq += g * g;
    }
    m.grad_norm = std::sqrt(sq);

    state = std::move(next);
    m.round = state.round;
    m.wall_ms = deterministic ? 0.0
                              : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                                    .count();
    result.metrics.push_back(m);
    if (options.on_round) options.on_round(m);

    if (!options.out_dir.empty() && state.round % every == 0) {
      std::string path = (std::filesystem::path(options.out_dir) / round_checkpoint_name(state.round)).string();
      cpc::save_checkpoint(path, cpc::ModelParams::unflatten(layout, state.weights), options.metadata);
      result.checkpoints.push_back(path);
    }
  }

  result.final_params = cpc::ModelParams::unflatten(layout, state.weights);
  result.state = std::move(state);
  if (!options.out_dir.empty()) {
    std::string path = (std::filesystem::path(options.out_dir) / "final.ckpt").string();
    cpc::save_checkpoint(path, result.final_params, options.metadata);
    result.checkpoints.push_back(path);
    train::save_metrics((std::filesystem::path(options.out_dir) / "metrics.tsv").string(), result.metrics,
                        options.metadata);
  }
  return result;
}

}  // namespace fedcpc::fed
