#pragma once

// Pieces shared by the federated and central training arms.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedcpc/corpus.hpp"
#include "fedcpc/frontend.hpp"

namespace fedcpc::train {

using FeatureSource = std::function<audio::FeatureSequence(const corpus::UtteranceRecord&)>;

/// Reads audio via audio_ref (synthetic or PCM relative to base_dir).
FeatureSource default_feature_source(const std::string& base_dir = "");

/// Negative-sampling seed of one utterance at one training step. Keyed by
/// utterance id so it does not depend on which client or batch holds it.
std::uint64_t negative_seed(std::uint64_t run_seed, std::size_t step, const std::string& utterance_id);

/// One line of the metrics log. Central runs log one line per optimizer
/// step with clients = 1.
struct RoundMetrics {
  std::size_t round = 0;
  std::size_t clients = 0;
  std::size_t utterances = 0;
  double mean_client_loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

/// Tab-separated, one header row then one row per round. `preamble` lines
/// are written first, each prefixed with "# ".
void write_metrics(std::ostream& out, const std::vector<RoundMetrics>& rows, const std::string& preamble = "");
void save_metrics(const std::string& path, const std::vector<RoundMetrics>& rows, const std::string& preamble = "");
std::vector<RoundMetrics> load_metrics(const std::string& path);

double l2_norm(const std::vector<double>& v);

}  // namespace fedcpc::train
