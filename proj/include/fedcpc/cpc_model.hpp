#pragma once

// Contrastive Predictive Coding network: a frame-local feed-forward feature
// encoder, a stacked unidirectional LSTM context encoder, and one linear
// future-prediction head per horizon k = 1..K, trained with InfoNCE.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedcpc/autodiff.hpp"
#include "fedcpc/tensor.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::cpc {

enum class Preset { desk, paper };

struct CpcConfig {
  std::size_t input_dim = 768;
  std::size_t enc_layers = 3;
  std::size_t enc_units = 512;
  std::size_t ctx_layers = 6;
  std::size_t ctx_units = 1024;
  std::size_t future_steps = 4;   // K
  double temperature = 1.0;       // kappa
  std::size_t num_negatives = 7;  // N - 1
  Preset preset = Preset::desk;

  /// Full-size architecture (3x512 encoder, 6x1024 LSTM). The horizon count
  /// has no published value, so the caller must supply it.
  static CpcConfig paper(std::size_t future_steps);
  /// 2x64 encoder, 1x128 LSTM, K = 4, 7 negatives.
  static CpcConfig desk();

  /// Candidate set size N (true latent plus negatives).
  std::size_t candidates() const noexcept { return num_negatives + 1; }
  /// Shortest usable sequence: max(K + 1, N).
  std::size_t min_frames() const noexcept;

  void validate() const;  // throws ConfigError
  bool same_architecture(const CpcConfig& other) const noexcept;
};

struct ParamSpec {
  std::string name;
  ad::Shape shape;

  bool operator==(const ParamSpec&) const = default;
};

/// Names and shapes of every parameter, in canonical (flattening) order.
std::vector<ParamSpec> parameter_layout(const CpcConfig& config);
std::size_t parameter_count(const CpcConfig& config);

/// All CPC weights. Row-vector convention: y = x W + b, so weights are
/// stored [fan_in, fan_out] and biases [1, fan_out].
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(std::vector<ParamSpec> layout, std::vector<ad::Tensor> tensors);

  /// All-zero parameters for a config.
  static ModelParams zeros(const CpcConfig& config);
  static ModelParams unflatten(std::vector<ParamSpec> layout, std::span<const double> flat);

  const std::vector<ParamSpec>& layout() const noexcept { return layout_; }
  const std::vector<ad::Tensor>& tensors() const noexcept { return tensors_; }
  std::vector<ad::Tensor>& tensors() noexcept { return tensors_; }

  const ad::Tensor& get(const std::string& name) const;
  ad::Tensor& get(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  /// Total scalar count.
  std::size_t flat_size() const noexcept;
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

  /// Architecture recovered from tensor shapes. Loss hyperparameters
  /// (temperature, negatives) are copied from `base`.
  CpcConfig infer_config(const CpcConfig& base = CpcConfig{}) const;

  bool operator==(const ModelParams& other) const;

 private:
  std::vector<ParamSpec> layout_;
  std::vector<ad::Tensor> tensors_;
};

/// Uniform(-a, a) with a = sqrt(1 / fan_in); LSTM layers use fan_in = hidden
/// size and a forget-gate bias of 1.0. Deterministic per seed.
ModelParams init_params(const CpcConfig& config, std::uint64_t seed);

struct LatentSequence {
  ad::Tensor z;  // T x enc_units
};

struct ContextSequence {
  ad::Tensor c;  // T x ctx_units
};

// ---------------------------------------------------------------------------
// Graph-level forward pass

/// Parameters placed on a tape, grouped by role.
struct BoundParams {
  std::vector<ad::Var> enc_weight;
  std::vector<ad::Var> enc_bias;
  std::vector<ad::LstmWeights> ar;
  std::vector<ad::Var> head_weight;  // [ctx_units, enc_units], index k-1
  std::vector<ad::Var> head_bias;
  std::vector<ad::Var> all;  // layout order
};

BoundParams bind_params(ad::Tape& tape, const ModelParams& params, bool trainable);

/// T x input_dim -> T x enc_units; every layer is affine + ReLU.
ad::Var encode(const BoundParams& params, ad::Var x);

/// Stacked LSTM from zero initial state; row t depends only on rows <= t.
ad::Var contextualize(const BoundParams& params, ad::Var z);

/// `count` distinct indices from [0, length) excluding `target`, drawn
/// uniformly without replacement. Throws TooShortError if length < count + 1.
std::vector<std::size_t> sample_negatives(std::size_t target, std::size_t length, std::size_t count, Rng& rng);

/// Mean over rows of -log softmax(row)[0]; column 0 holds the true candidate.
ad::Var contrastive_nll(ad::Var candidate_scores);

/// L = sum_k -1/(T-k) sum_t log softmax_{z in Z}(z^T (W_k c_t + b_k) / kappa)[true],
/// with negatives drawn independently for every (t, k).
ad::Var infonce_loss(const BoundParams& params, ad::Var z, ad::Var c, const CpcConfig& config, Rng& rng);

// ---------------------------------------------------------------------------
// Value-level helpers

LatentSequence encode(const ModelParams& params, const ad::Tensor& x);
ContextSequence contextualize(const ModelParams& params, const LatentSequence& z);

/// InfoNCE of one utterance; negatives come from Rng(negative_seed).
double infonce_value(const ModelParams& params, const ad::Tensor& x, const CpcConfig& config,
                     std::uint64_t negative_seed);

struct Sample {
  const ad::Tensor* features = nullptr;  // T x input_dim
  std::uint64_t negative_seed = 0;
  double weight = 1.0;
};

struct LossAndGrad {
  double loss = 0.0;          // sum_i weight_i * L_i
  std::vector<double> grad;   // flattened, layout order
};

/// Weighted sum of per-utterance InfoNCE losses and its gradient.
/// Accumulation follows sample order.
LossAndGrad weighted_loss_and_grad(const ModelParams& params, std::span<const Sample> samples,
                                   const CpcConfig& config);

}  // namespace fedcpc::cpc
