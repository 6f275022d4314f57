// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "fedcpc/central.hpp"
#include "fedcpc/experiment.hpp"
#include "fedcpc/federated.hpp"
#include "fedcpc/gradcheck.hpp"
#include "fedcpc/synth.hpp"
#include "fedcpc/util.hpp"
#include "reference_cpc.hpp"
#include "test_helpers.hpp"

using namespace fedcpc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

fs::path work_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fedcpc_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Criterion 1: gradient check of the desk model, every group below 1e-4, under 2 min.
Outcome gradient_fidelity() {
  std::ostringstream out, err;
  auto config = cli::ExperimentConfig::desk();
  auto t0 = std::chrono::steady_clock::now();
  fs::path report_path = work_dir("gradcheck") / "gradcheck.tsv";
  int code = cli::cmd_gradcheck(config.model, config.seed, report_path.string(), err);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  gradcheck::GradcheckConfig gc;
  gc.seed = config.seed;
  auto report = gradcheck::run_gradcheck(config.model, gc);
  double worst = 0.0;
  std::string where;
  for (const auto& g : report.groups)
    if (g.max_rel_err >= worst) worst = g.max_rel_err, where = g.group;
  bool pass = code == 0 && report.passed() && worst < 1e-4 && secs < 120.0;
  return {pass, std::to_string(report.groups.size()) + " groups, max rel err " + fmt("%.2e", worst) + " (" + where +
                    "), " + fmt("%.1f s", secs)};
}

// Criterion 2: T=6, K=2, N=4 against the plain-loop oracle within 1e-10;
// uniform scores give ln N per horizon.
Outcome infonce_oracle() {
  auto cfg = cpc::CpcConfig::desk();
  cfg.input_dim = 7;
  cfg.enc_units = 5;
  cfg.ctx_units = 6;
  cfg.future_steps = 2;
  cfg.num_negatives = 3;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = cpc::init_params(cfg, seed);
    ad::Tensor x = testing::random_tensor({6, 7}, seed + 10, 2.0);
    auto [z, c] = testing::reference_forward(p, cfg, x);
    Rng rng(seed + 20);
    long double expect = testing::reference_infonce(p, cfg, z, c, rng);
    worst = std::max(worst, std::abs(cpc::infonce_value(p, x, cfg, seed + 20) - static_cast<double>(expect)));
  }
  ad::Tape tape;
  double uniform = cpc::contrastive_nll(tape.constant(ad::Tensor::zeros({4, 4}))).value().item();
  auto p = cpc::init_params(cfg, 1);
  for (std::size_t k = 1; k <= 2; ++k) {
    for (double& v : p.get("head." + std::to_string(k) + ".weight").mutable_values()) v = 0.0;
    for (double& v : p.get("head." + std::to_string(k) + ".bias").mutable_values()) v = 0.0;
  }
  double per_horizon = cpc::infonce_value(p, testing::random_tensor({6, 7}, 3), cfg, 4) / 2.0;
  bool pass = worst < 1e-10 && uniform == std::log(4.0) && std::abs(per_horizon - std::log(4.0)) < 1e-15;
  return {pass, "max |diff| " + fmt("%.2e", worst) + ", uniform " + fmt("%.17g", uniform) + " vs ln 4 " +
                    fmt("%.17g", std::log(4.0))};
}

// Criterion 3: one plain-averaged FedSGD round equals one SGD step on the union batch.
Outcome fedsgd_equivalence() {
  auto t0 = std::chrono::steady_clock::now();
  auto model = cpc::CpcConfig::desk();
  auto corpus = audio::synth_corpus(10, 2, 3, 42).records;
  fed::FedConfig cfg;
  cfg.clients_per_round = 4;
  cfg.client_batch_size = 2;
  cfg.rounds_max = 1;
  cfg.client_lr = 0.1;
  cfg.server.kind = optim::Kind::plain;
  cfg.seed = 1;
  auto features = train::default_feature_source();
  fed::RunOptions opts;
  opts.features = features;
  auto result = fed::run_federated(corpus, cfg, model, opts);

  auto streams = fed::build_streams(corpus, cfg);
  Rng select(derive_seed({cfg.seed, 0, 0x5e1e}));
  auto selected = fed::select_clients(streams, cfg.clients_per_round, select);
  std::vector<audio::FeatureSequence> feats;
  std::vector<std::string> ids;
  for (std::size_t c : *selected) {
    corpus::Batch batch = *streams[c].next_batch();
    for (const auto& r : batch) {
      feats.push_back(features(r));
      ids.push_back(r.utterance_id);
    }
  }
  std::vector<cpc::Sample> union_batch;
  for (std::size_t i = 0; i < feats.size(); ++i)
    union_batch.push_back({&feats[i].x, train::negative_seed(cfg.seed, 0, ids[i]), 1.0});
  auto reference = central::sgd_reference_step(result.initial, union_batch, cfg.client_lr, model).flatten();
  auto federated = result.final_params.flatten();
  double diff = 0.0;
  for (std::size_t i = 0; i < federated.size(); ++i) diff = std::max(diff, std::abs(federated[i] - reference[i]));
  double moved = 0.0;
  auto initial = result.initial.flatten();
  for (std::size_t i = 0; i < federated.size(); ++i) moved = std::max(moved, std::abs(federated[i] - initial[i]));
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool pass = diff < 1e-9 && moved > 0.0 && secs < 60.0;
  return {pass, "max |diff| " + fmt("%.2e", diff) + " over " + std::to_string(feats.size()) +
                    " utterances (update size " + fmt("%.2e", moved) + "), " + fmt("%.1f s", secs)};
}

// Criterion 4: purity, single-pass coverage, chapter order and replay on 100 speakers.
Outcome partition_invariants() {
  auto t0 = std::chrono::steady_clock::now();
  auto corpus = audio::synth_corpus(100, 6, 5, 7).records;
  fed::FedConfig cfg;
  cfg.client_batch_size = 4;
  cfg.num_clients = 30;  // several speakers per client
  cfg.seed = 5;
  auto streams = fed::build_streams(corpus, cfg);
  auto replay = fed::build_streams(corpus, cfg);

  std::size_t batches = 0, pure = 0;
  bool ordered = true, same = streams.size() == replay.size();
  std::multiset<std::string> seen;
  for (std::size_t c = 0; c < streams.size(); ++c) {
    if (same) same = streams[c].batches() == replay[c].batches();
    std::map<std::string, corpus::ChapterId> last;
    while (auto b = streams[c].next_batch()) {
      ++batches;
      pure += std::all_of(b->begin(), b->end(), [&](const auto& u) { return u.speaker_id == b->front().speaker_id; });
      for (const auto& u : *b) {
        seen.insert(u.utterance_id);
        auto it = last.find(u.speaker_id);
        if (it != last.end() && u.chapter_id < it->second) ordered = false;
        last[u.speaker_id] = u.chapter_id;
      }
    }
  }
  std::multiset<std::string> all;
  for (const auto& r : corpus) all.insert(r.utterance_id);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool pass = pure == batches && seen == all && ordered && same && secs < 30.0;
  return {pass, std::to_string(pure) + "/" + std::to_string(batches) + " pure batches, coverage " +
                    (seen == all ? "exact" : "broken") + ", chapter order " + (ordered ? "kept" : "broken") +
                    ", replay " + (same ? "identical" : "differs") + ", " + fmt("%.1f s", secs)};
}

std::map<std::string, double> probe_accuracies(const fs::path& report) {
  std::map<std::string, double> acc;
  std::istringstream in(read_file(report));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#' || line.starts_with("arm\t")) continue;
    std::istringstream f(line);
    std::string arm, ckpt, value;
    std::getline(f, arm, '\t');
    std::getline(f, ckpt, '\t');
    std::getline(f, value, '\t');
    acc[arm] = std::stod(value);
  }
  return acc;
}

double mean_loss(const std::vector<train::RoundMetrics>& rows, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += rows[i].mean_client_loss;
  return s / static_cast<double>(to - from);
}

// Criteria 5 and 6: desk pipeline on the pinned corpus with the canonical seed.
std::pair<Outcome, Outcome> learning_signal_and_parity() {
  auto t0 = std::chrono::steady_clock::now();
  fs::path dir = work_dir("desk");
  auto config = cli::ExperimentConfig::desk();
  std::ostringstream err;
  Outcome five, six;
  if (cli::cmd_pretrain(config, (dir / "federated").string(), err) != 0) {
    five.detail = six.detail = "federated pretrain failed: " + err.str();
    return {five, six};
  }
  double fed_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto central_config = config;
  central_config.mode = cli::Mode::central;
  if (cli::cmd_pretrain(central_config, (dir / "central").string(), err) != 0) {
    six.detail = "central pretrain failed: " + err.str();
  }
  fs::path report = dir / "probe.tsv";
  int probe_code = cli::cmd_probe(config,
                                  {{"random", "random"},
                                   {"federated", (dir / "federated" / "final.ckpt").string()},
                                   {"central", (dir / "central" / "final.ckpt").string()}},
                                  report.string(), err);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (probe_code != 0) {
    five.detail = six.detail = "probe failed: " + err.str();
    return {five, six};
  }
  auto acc = probe_accuracies(report);
  auto rows = train::load_metrics((dir / "federated" / "metrics.tsv").string());
  const std::size_t window = 10;
  double ratio = rows.size() >= 2 * window
                     ? mean_loss(rows, rows.size() - window, rows.size()) / mean_loss(rows, 0, window)
                     : NAN;
  double gain = 100.0 * (acc["federated"] - acc["random"]);
  five.pass = rows.size() == config.fed.rounds_max && ratio <= 0.8 && gain >= 10.0 && secs < 900.0;
  five.detail = std::to_string(rows.size()) + " rounds, loss ratio " + fmt("%.3f", ratio) + " (last/first " +
                std::to_string(window) + " rounds), probe federated " + fmt("%.1f%%", 100.0 * acc["federated"]) +
                " vs random " + fmt("%.1f%%", 100.0 * acc["random"]) + " (+" + fmt("%.1f", gain) + " points), " +
                "federated pretrain " + fmt("%.0f s", fed_secs) + ", total " + fmt("%.0f s", secs);
  double gap = 100.0 * (acc["federated"] - acc["central"]);
  bool reported = read_file(report).find("# gap federated-central: ") != std::string::npos;
  six.pass = six.detail.empty() && std::abs(gap) <= 5.0 && reported;
  six.detail += "federated " + fmt("%.1f%%", 100.0 * acc["federated"]) + " vs central " +
                fmt("%.1f%%", 100.0 * acc["central"]) + ", gap " + fmt("%+.1f", gap) + " points" +
                (reported ? ", gap line in probe report" : ", gap line missing");
  return {five, six};
}

// Criterion 7: two full pipeline runs from one serialized config are byte-identical.
Outcome determinism() {
  setenv("FEDCPC_DETERMINISTIC", "1", 1);
  fs::path root = work_dir("determinism");
  std::istringstream text(
      "synth.speakers = 6\n"
      "synth.chapters = 4\n"
      "synth.utterances = 5\n"
      "data.manifest = corpus/manifest.tsv\n"
      "fed.rounds = 8\n"
      "central.max_steps = 6\n");
  std::string serialized = cli::serialize(cli::parse_config(text));
  std::ofstream(root / "config.txt") << serialized;

  const fs::path home = fs::current_path();
  std::map<std::string, std::string> artefacts[2];
  std::string failure;
  for (int run = 0; run < 2 && failure.empty(); ++run) {
    fs::path dir = root / ("run" + std::to_string(run));
    fs::create_directories(dir);
    fs::current_path(dir);
    auto config = cli::load_config((root / "config.txt").string());
    std::ostringstream err;
    auto central_config = config;
    central_config.mode = cli::Mode::central;
    if (cli::cmd_synth(config.synth, "corpus", err) || cli::cmd_silo(config.manifest, "silo.tsv", err) ||
        cli::cmd_pretrain(config, "federated", err) || cli::cmd_pretrain(central_config, "central", err) ||
        cli::cmd_probe(config, {{"federated", "federated/final.ckpt"}, {"central", "central/final.ckpt"}},
                       "probe.tsv", err)) {
      failure = err.str();
    }
    for (const char* name : {"corpus/manifest.tsv", "silo.tsv", "federated/metrics.tsv", "central/metrics.tsv",
                             "probe.tsv"})
      artefacts[run][name] = read_file(name);
    for (const char* name : {"federated/final.ckpt", "central/final.ckpt"}) artefacts[run][name] = sha256_file(name);
    fs::current_path(home);
  }
  unsetenv("FEDCPC_DETERMINISTIC");
  if (!failure.empty()) return {false, "pipeline failed: " + failure};
  std::vector<std::string> differing;
  for (const auto& [name, value] : artefacts[0])
    if (artefacts[1][name] != value) differing.push_back(name);
  std::string detail = "federated checkpoint sha256 " + artefacts[0]["federated/final.ckpt"].substr(0, 16) + "..., ";
  if (differing.empty()) return {true, detail + std::to_string(artefacts[0].size()) + " artefacts identical"};
  for (const auto& d : differing) detail += "differs: " + d + " ";
  return {false, detail};
}

}  // namespace

int main() {
  set_log_quiet(true);
  std::vector<std::pair<std::string, std::function<Outcome()>>> quick = {
      {"1 gradient fidelity", gradient_fidelity},
      {"2 InfoNCE oracle", infonce_oracle},
      {"3 FedSGD equals central SGD", fedsgd_equivalence},
      {"4 partition invariants", partition_invariants},
  };
  bool all = true;
  auto print = [&](const std::string& name, const Outcome& o) {
    std::printf("criterion %s: %s (%s)\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  };
  auto guard = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };
  for (const auto& [name, f] : quick) print(name, guard(f));
  std::pair<Outcome, Outcome> desk;
  try {
    desk = learning_signal_and_parity();
  } catch (const std::exception& e) {
    desk.first = desk.second = {false, std::string("exception: ") + e.what()};
  }
  print("5 end-to-end learning signal", desk.first);
  print("6 federated-central parity", desk.second);
  print("7 determinism", guard(determinism));
  return all ? 0 : 1;
}
