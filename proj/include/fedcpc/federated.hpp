#pragma once

// FedSGD simulation.
//
// Each round the server broadcasts w^t to K randomly chosen clients; every
// client draws C speaker-pure batches of at most B utterances from its
// single-pass stream, takes E SGD steps on their mean InfoNCE loss, and
// returns w_k with its sample count n_k. The server averages
// w_bar = sum_k (n_k / n) w_k and either adopts it ("plain") or feeds the
// pseudo-gradient w^t - w_bar to Adam.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcpc/corpus.hpp"
#include "fedcpc/cpc_model.hpp"
#include "fedcpc/optim.hpp"
#include "fedcpc/training.hpp"

namespace fedcpc::fed {

struct FedConfig {
  std::size_t clients_per_round = 4;  // K
  std::size_t client_batch_size = 8;  // B, at most 8
  std::size_t local_steps = 1;        // E
  std::size_t batches_per_step = 1;   // C
  std::size_t rounds_max = 22000;
  double client_lr = 1.0;
  optim::OptimizerConfig server{};  // Adam, lr 1e-5
  std::uint64_t seed = 0;
  std::size_t num_clients = 0;  // client population; 0 = one client per speaker silo
  std::size_t workers = 1;
  bool fedsgd = true;               // requires E = 1 and C = 1
  std::size_t checkpoint_every = 0;  // 0 = max(1, rounds_max / 10)

  void validate() const;  // throws ConfigError
};

struct ClientUpdate {
  std::vector<double> weights;  // w_k^t, flattened
  std::size_t num_samples = 0;  // n_k: utterances that entered the loss
  std::size_t client = 0;
  std::size_t round = 0;
  double mean_loss = 0.0;  // at the broadcast weights
};

struct ClientResult {
  std::optional<ClientUpdate> update;  // empty if the stream ran dry
  std::size_t consumed = 0;            // utterances taken from the stream
  std::size_t skipped = 0;             // too short to train on
};

struct ServerState {
  std::vector<double> weights;
  std::size_t round = 0;
  optim::AdamState moments;
  std::size_t utterances_consumed = 0;
};

/// min(K, #live) distinct live streams, uniform without replacement, in
/// ascending index order. nullopt once every stream is exhausted.
std::optional<std::vector<std::size_t>> select_clients(const std::vector<corpus::ClientStream>& streams,
                                                       std::size_t clients_per_round, Rng& rng);

/// Local training on one client. `weights` is left untouched.
ClientResult client_update(std::span<const double> weights, corpus::ClientStream& stream, std::size_t round,
                           const FedConfig& config, const cpc::CpcConfig& model,
                           const train::FeatureSource& features);

/// Aggregation weights n_k / n, in the order given.
std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates);

/// sum_k (n_k / n) w_k, summed in ascending client order. Throws
/// ContractError on an empty list or mismatched lengths.
std::vector<double> aggregate(std::span<const ClientUpdate> updates);

/// Applies the server optimizer to the pseudo-gradient w^t - w_bar.
/// Throws NonFiniteError (state untouched) if it has NaN/Inf entries.
ServerState server_step(const ServerState& state, std::span<const double> averaged,
                        const optim::OptimizerConfig& server);

struct RunOptions {
  train::FeatureSource features;  // default: audio_ref loader
  std::string out_dir;            // empty: no files written
  std::string metadata;           // embedded in checkpoints and metrics
  std::function<void(const train::RoundMetrics&)> on_round;
};

struct FedResult {
  cpc::ModelParams initial;
  cpc::ModelParams final_params;
  ServerState state;
  std::vector<train::RoundMetrics> metrics;
  std::size_t utterances_consumed = 0;
  std::size_t utterances_skipped = 0;
  std::vector<std::string> checkpoints;
};

/// select -> broadcast -> client_update -> aggregate -> server_step until
/// rounds_max or until every stream is drained.
FedResult run_federated(const std::vector<corpus::UtteranceRecord>& corpus, const FedConfig& config,
                        const cpc::CpcConfig& model, const RunOptions& options = {});

/// Client streams exactly as run_federated builds them.
std::vector<corpus::ClientStream> build_streams(const std::vector<corpus::UtteranceRecord>& corpus,
                                                const FedConfig& config);

}  // namespace fedcpc::fed
