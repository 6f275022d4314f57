#pragma once

// Centralized CPC baseline: the whole corpus is pooled, reshuffled every
// epoch and trained with a single optimizer. Batches may mix speakers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedcpc/corpus.hpp"
#include "fedcpc/cpc_model.hpp"
#include "fedcpc/federated.hpp"
#include "fedcpc/optim.hpp"
#include "fedcpc/training.hpp"

namespace fedcpc::central {

struct CentralConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  optim::OptimizerConfig optimizer{};  // Adam, lr 1e-5
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;         // 0 = no limit
  std::size_t checkpoint_every = 0;  // 0 = once per epoch

  void validate() const;
};

struct CentralResult {
  cpc::ModelParams initial;
  cpc::ModelParams final_params;
  std::vector<train::RoundMetrics> metrics;
  std::vector<std::vector<std::string>> batches;  // utterance ids of every step
  std::size_t utterances_skipped = 0;
  std::vector<std::string> checkpoints;
};

/// Utterance order of one epoch (indices into the corpus).
std::vector<std::size_t> epoch_order(std::size_t corpus_size, std::uint64_t seed, std::size_t epoch);

CentralResult run_central(const std::vector<corpus::UtteranceRecord>& corpus, const CentralConfig& config,
                          const cpc::CpcConfig& model, const fed::RunOptions& options = {});

/// w' = w - lr * grad(sum_i a_i L_i) with a_i = weight_i / sum_j weight_j.
cpc::ModelParams sgd_reference_step(const cpc::ModelParams& params, std::span<const cpc::Sample> batch, double lr,
                                    const cpc::CpcConfig& model);

}  // namespace fedcpc::central
