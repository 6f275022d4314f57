#pragma once

// Frozen-encoder linear probe: mean-pooled context vectors, standardized,
// classified by multinomial logistic regression.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedcpc/corpus.hpp"
#include "fedcpc/cpc_model.hpp"
#include "fedcpc/training.hpp"

namespace fedcpc::probe {

/// Train/eval split over utterance indices. Every class contributes the same
/// share of its utterances to the eval side.
struct ProbeTask {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
  std::size_t num_classes = 0;
};

/// Stratified split; throws ContractError for fewer than 2 classes or a class
/// too small to appear on both sides.
ProbeTask split_task(const std::vector<std::size_t>& labels, double eval_fraction, std::uint64_t seed);

/// Per speaker, utterances of the first `train_chapters` chapters (chapter
/// order) train the probe and all later chapters evaluate it, so the probe is
/// scored on recording sessions it never saw. Throws ContractError if a
/// speaker has no chapter left for evaluation.
ProbeTask split_by_chapter(const std::vector<corpus::UtteranceRecord>& records, const std::vector<std::size_t>& labels,
                           std::size_t train_chapters);

/// Throws DimensionError naming the mismatched dimensions.
void check_compatible(const cpc::ModelParams& params, const cpc::CpcConfig& expected);

/// contextualize(encode(x)) with frozen weights.
cpc::ContextSequence extract_contexts(const cpc::ModelParams& params, const ad::Tensor& features);

std::vector<double> mean_pool(const cpc::ContextSequence& contexts);

struct ProbeConfig {
  std::size_t epochs = 200;
  double lr = 0.1;
  double l2 = 1e-3;
  std::size_t batch_size = 16;
  std::size_t train_chapters = 3;  // 0: stratified random split by eval_fraction
  double eval_fraction = 0.3;
  bool shuffle_labels = false;  // permute training labels; a chance-level control
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::vector<double> weights;  // dim x classes, row-major
  std::vector<double> bias;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  double train_accuracy = 0.0;
  double accuracy = 0.0;  // held-out, utterance level
  std::size_t n_eval = 0;
};

/// Softmax regression on `vectors[task.train]`, scored on `vectors[task.eval]`.
ProbeResult train_probe(const std::vector<std::vector<double>>& vectors, const std::vector<std::size_t>& labels,
                        const ProbeTask& task, const ProbeConfig& config);

/// Pooled context vector of every record.
std::vector<std::vector<double>> pooled_contexts(const cpc::ModelParams& params,
                                                 const std::vector<corpus::UtteranceRecord>& records,
                                                 const train::FeatureSource& features, std::size_t workers = 1);

/// split_by_chapter or split_task, as selected by `config.train_chapters`.
ProbeTask make_task(const std::vector<corpus::UtteranceRecord>& records, const std::vector<std::size_t>& labels,
                    const ProbeConfig& config);

/// `labels`, with the training labels permuted when `config.shuffle_labels` is set.
std::vector<std::size_t> training_labels(const std::vector<std::size_t>& labels, const ProbeTask& task,
                                         const ProbeConfig& config);

/// Speaker-ID probe of one encoder on a labelled corpus.
ProbeResult evaluate_encoder(const cpc::ModelParams& params, const std::vector<corpus::UtteranceRecord>& records,
                             const std::vector<std::size_t>& labels, const train::FeatureSource& features,
                             const ProbeConfig& config, std::size_t workers = 1);

/// Dense 0-based class labels from speaker ids, in sorted speaker order.
std::vector<std::size_t> speaker_labels(const std::vector<corpus::UtteranceRecord>& records);

struct ReportRow {
  std::string arm;
  std::string checkpoint;
  double accuracy = 0.0;
  std::size_t n_eval = 0;
};

/// Tab-separated `arm checkpoint accuracy n_eval`. When both a "federated"
/// and a "central" row are present the accuracy gap follows as a comment.
void write_report(std::ostream& out, const std::vector<ReportRow>& rows, const std::string& preamble = "");

}  // namespace fedcpc::probe
