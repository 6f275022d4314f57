#include "fedcpc/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fedcpc/errors.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::probe {

namespace {

constexpr std::uint64_t kSplitTag = 0x5b17;
constexpr std::uint64_t kEpochTag = 0xe90c;

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

ProbeTask split_task(const std::vector<std::size_t>& labels, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("probe: eval_fraction must be in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw ContractError("probe: need at least 2 classes, got " + std::to_string(by_class.size()));

  ProbeTask task;
  task.num_classes = by_class.rbegin()->first + 1;
  Rng rng(derive_seed({seed, kSplitTag}));
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(members.size())));
    n_eval = std::clamp<std::size_t>(n_eval, 1, members.size() - (members.size() > 1 ? 1 : 0));
    if (members.size() < 2) throw ContractError("probe: class " + std::to_string(label) + " has a single utterance");
    task.eval.insert(task.eval.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_eval));
    task.train.insert(task.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_eval), members.end());
  }
  std::sort(task.train.begin(), task.train.end());
  std::sort(task.eval.begin(), task.eval.end());
  return task;
}

ProbeTask split_by_chapter(const std::vector<corpus::UtteranceRecord>& records, const std::vector<std::size_t>& labels,
                           std::size_t train_chapters) {
  if (records.size() != labels.size()) throw DimensionError("probe: records and labels differ in length");
  if (train_chapters == 0) throw ConfigError("probe: train_chapters must be >= 1");
  std::map<std::string, std::vector<corpus::ChapterId>> chapters;
  for (const auto& r : records) chapters[r.speaker_id].push_back(r.chapter_id);
  for (auto& [speaker, list] : chapters) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
    if (list.size() <= train_chapters) {
      throw ContractError("probe: speaker " + speaker + " has " + std::to_string(list.size()) +
                          " chapters; need more than " + std::to_string(train_chapters));
    }
  }
  ProbeTask task;
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& list = chapters.at(records[i].speaker_id);
    const bool train = records[i].chapter_id < list[train_chapters];
    (train ? task.train : task.eval).push_back(i);
    max_label = std::max(max_label, labels[i]);
  }
  task.num_classes = max_label + 1;
  if (chapters.size() < 2) throw ContractError("probe: need at least 2 classes");
  return task;
}

void check_compatible(const cpc::ModelParams& params, const cpc::CpcConfig& expected) {
  cpc::CpcConfig got = params.infer_config(expected);
  std::ostringstream diff;
  auto field = [&](const char* name, std::size_t have, std::size_t want) {
    if (have != want) diff << ' ' << name << '=' << have << " (expected " << want << ')';
  };
  field("input_dim", got.input_dim, expected.input_dim);
  field("enc_layers", got.enc_layers, expected.enc_layers);
  field("enc_units", got.enc_units, expected.enc_units);
  field("ctx_layers", got.ctx_layers, expected.ctx_layers);
  field("ctx_units", got.ctx_units, expected.ctx_units);
  field("future_steps", got.future_steps, expected.future_steps);
  if (!diff.str().empty()) throw DimensionError("checkpoint does not match the model config:" + diff.str());
}

cpc::ContextSequence extract_contexts(const cpc::ModelParams& params, const ad::Tensor& features) {
  const ad::Tensor& w0 = params.get("enc.0.weight");
  if (features.cols() != w0.rows()) {
    throw DimensionError("feature dim " + std::to_string(features.cols()) + " does not match checkpoint input_dim " +
                         std::to_string(w0.rows()));
  }
  return cpc::contextualize(params, cpc::encode(params, features));
}

std::vector<double> mean_pool(const cpc::ContextSequence& contexts) {
  const ad::Tensor& c = contexts.c;
  std::vector<double> out(c.cols(), 0.0);
  for (std::size_t t = 0; t < c.rows(); ++t)
    for (std::size_t j = 0; j < c.cols(); ++j) out[j] += c.at(t, j);
  for (double& v : out) v /= static_cast<double>(c.rows());
  return out;
}

ProbeResult train_probe(const std::vector<std::vector<double>>& vectors, const std::vector<std::size_t>& labels,
                        const ProbeTask& task, const ProbeConfig& config) {
  if (vectors.size() != labels.size()) throw DimensionError("probe: vectors and labels differ in length");
  if (task.train.empty() || task.eval.empty()) throw ContractError("probe: empty train or eval split");
  {
    std::vector<std::size_t> seen;
    for (std::size_t i : task.train) seen.push_back(labels[i]);
    std::sort(seen.begin(), seen.end());
    if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2)
      throw ContractError("probe: training split holds a single class");
  }
  const std::size_t dim = vectors[task.train.front()].size();
  const std::size_t classes = task.num_classes;

  // Standardize with training statistics.
  std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
  for (std::size_t i : task.train)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += vectors[i][j];
  for (double& m : mean) m /= static_cast<double>(task.train.size());
  for (std::size_t i : task.train)
    for (std::size_t j = 0; j < dim; ++j) scale[j] += (vectors[i][j] - mean[j]) * (vectors[i][j] - mean[j]);
  for (double& s : scale) {
    s = std::sqrt(s / static_cast<double>(task.train.size()));
    s = s > 1e-8 ? 1.0 / s : 0.0;
  }
  auto standardized = [&](std::size_t i) {
    if (vectors[i].size() != dim) throw DimensionError("probe: vectors differ in length");
    std::vector<double> x(dim);
    for (std::size_t j = 0; j < dim; ++j) x[j] = (vectors[i][j] - mean[j]) * scale[j];
    return x;
  };
  std::vector<std::vector<double>> xs(vectors.size());
  for (std::size_t i : task.train) xs[i] = standardized(i);
  for (std::size_t i : task.eval) xs[i] = standardized(i);

  ProbeResult r;
  r.dim = dim;
  r.num_classes = classes;
  r.weights.assign(dim * classes, 0.0);
  r.bias.assign(classes, 0.0);

  auto logits = [&](const std::vector<double>& x) {
    std::vector<double> z = r.bias;
    for (std::size_t j = 0; j < dim; ++j) {
      if (x[j] == 0.0) continue;
      const double* row = &r.weights[j * classes];
      for (std::size_t c = 0; c < classes; ++c) z[c] += x[j] * row[c];
    }
    return z;
  };

  std::vector<std::size_t> order = task.train;
  std::vector<double> gw(dim * classes), gb(classes);
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed({config.seed, epoch, kEpochTag}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(start + bs, order.size());
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const auto& x = xs[order[b]];
        std::vector<double> p = logits(x);
        const double mx = *std::max_element(p.begin(), p.end());
        double norm = 0.0;
        for (double& v : p) norm += (v = std::exp(v - mx));
        for (double& v : p) v /= norm;
        p[labels[order[b]]] -= 1.0;
        for (std::size_t j = 0; j < dim; ++j) {
          double* row = &gw[j * classes];
          for (std::size_t c = 0; c < classes; ++c) row[c] += x[j] * p[c];
        }
        for (std::size_t c = 0; c < classes; ++c) gb[c] += p[c];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = 0; i < gw.size(); ++i) r.weights[i] -= config.lr * (gw[i] * inv + config.l2 * r.weights[i]);
      for (std::size_t c = 0; c < classes; ++c) r.bias[c] -= config.lr * gb[c] * inv;
    }
  }

  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    std::size_t hits = 0;
    for (std::size_t i : idx) hits += argmax(logits(xs[i])) == labels[i];
    return static_cast<double>(hits) / static_cast<double>(idx.size());
  };
  r.train_accuracy = accuracy(task.train);
  r.accuracy = accuracy(task.eval);
  r.n_eval = task.eval.size();
  return r;
}

std::vector<std::vector<double>> pooled_contexts(const cpc::ModelParams& params,
                                                 const std::vector<corpus::UtteranceRecord>& records,
                                                 const train::FeatureSource& features, std::size_t workers) {
  const train::FeatureSource source = features ? features : train::default_feature_source();
  std::vector<std::vector<double>> out(records.size());
  parallel_for(records.size(), deterministic_mode() ? 1 : workers, [&](std::size_t i) {
    out[i] = mean_pool(extract_contexts(params, source(records[i]).x));
  });
  return out;
}

ProbeTask make_task(const std::vector<corpus::UtteranceRecord>& records, const std::vector<std::size_t>& labels,
                    const ProbeConfig& config) {
  return config.train_chapters ? split_by_chapter(records, labels, config.train_chapters)
                               : split_task(labels, config.eval_fraction, config.seed);
}

std::vector<std::size_t> training_labels(const std::vector<std::size_t>& labels, const ProbeTask& task,
                                         const ProbeConfig& config) {
  std::vector<std::size_t> out = labels;
  if (!config.shuffle_labels) return out;
  std::vector<std::size_t> train;
  for (std::size_t i : task.train) train.push_back(labels[i]);
  Rng rng(derive_seed({config.seed, 0x5aff}));
  std::shuffle(train.begin(), train.end(), rng);
  for (std::size_t j = 0; j < task.train.size(); ++j) out[task.train[j]] = train[j];
  return out;
}

ProbeResult evaluate_encoder(const cpc::ModelParams& params, const std::vector<corpus::UtteranceRecord>& records,
                             const std::vector<std::size_t>& labels, const train::FeatureSource& features,
                             const ProbeConfig& config, std::size_t workers) {
  ProbeTask task = make_task(records, labels, config);
  return train_probe(pooled_contexts(params, records, features, workers), training_labels(labels, task, config),
                     task, config);
}

std::vector<std::size_t> speaker_labels(const std::vector<corpus::UtteranceRecord>& records) {
  std::map<std::string, std::size_t> ids;
  for (const auto& r : records) ids.emplace(r.speaker_id, 0);
  std::size_t next = 0;
  for (auto& [id, label] : ids) label = next++;
  std::vector<std::size_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(ids.at(r.speaker_id));
  return out;
}

void write_report(std::ostream& out, const std::vector<ReportRow>& rows, const std::string& preamble) {
  std::istringstream pre(preamble);
  std::string line;
  while (std::getline(pre, line)) out << "# " << line << '\n';
  out << "arm\tcheckpoint\taccuracy\tn_eval\n";
  const ReportRow* fed = nullptr;
  const ReportRow* central = nullptr;
  for (const auto& r : rows) {
    out << r.arm << '\t' << r.checkpoint << '\t' << format_double(r.accuracy) << '\t' << r.n_eval << '\n';
    if (r.arm == "federated") fed = &r;
    if (r.arm == "central") central = &r;
  }
  if (fed && central) out << "# gap federated-central: " << format_double(fed->accuracy - central->accuracy) << '\n';
}

}  // namespace fedcpc::probe
