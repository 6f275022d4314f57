#include "fedcpc/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "fedcpc/checkpoint.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/gradcheck.hpp"
#include "fedcpc/synth.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::cli {

namespace fs = std::filesystem;

std::string to_string(Mode mode) { return mode == Mode::federated ? "federated" : "central"; }

Mode parse_mode(const std::string& text) {
  if (text == "federated") return Mode::federated;
  if (text == "central") return Mode::central;
  throw ConfigError("unknown mode '" + text + "' (expected federated or central)");
}

namespace {

std::string preset_name(cpc::Preset p) { return p == cpc::Preset::paper ? "paper" : "desk"; }

cpc::Preset parse_preset(const std::string& text) {
  if (text == "desk") return cpc::Preset::desk;
  if (text == "paper") return cpc::Preset::paper;
  throw ConfigError("unknown preset '" + text + "' (expected desk or paper)");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

struct Key {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  // Where the value comes from, per preset: "paper", "desk" or "chosen".
  std::function<std::string(cpc::Preset)> origin;
};

template <typename T>
std::string str(const T& v) {
  if constexpr (std::is_same_v<T, double>) {
    return format_double(v);
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    return std::to_string(v);
  }
}

auto fixed(std::string both) {
  return [both](cpc::Preset) { return both; };
}
auto per_preset(std::string paper, std::string desk) {
  return [paper, desk](cpc::Preset p) { return p == cpc::Preset::paper ? paper : desk; };
}

#define FEDCPC_SIZE_KEY(NAME, FIELD, ORIGIN)                                                   \
  Key {                                                                                        \
    NAME, [](const ExperimentConfig& c) { return str(c.FIELD); },                              \
        [](ExperimentConfig& c, const std::string& v) { c.FIELD = to_size(v); }, ORIGIN        \
  }
#define FEDCPC_DOUBLE_KEY(NAME, FIELD, ORIGIN)                                                 \
  Key {                                                                                        \
    NAME, [](const ExperimentConfig& c) { return str(c.FIELD); },                              \
        [](ExperimentConfig& c, const std::string& v) { c.FIELD = to_double(v); }, ORIGIN      \
  }
#define FEDCPC_STRING_KEY(NAME, FIELD, ORIGIN)                                                 \
  Key {                                                                                        \
    NAME, [](const ExperimentConfig& c) { return c.FIELD; },                                   \
        [](ExperimentConfig& c, const std::string& v) { c.FIELD = v; }, ORIGIN                 \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"preset", [](const ExperimentConfig& c) { return preset_name(c.preset); },
          [](ExperimentConfig&, const std::string&) {}, fixed("chosen")},
      Key{"acknowledge_paper", [](const ExperimentConfig& c) { return str(c.acknowledge_paper); },
          [](ExperimentConfig& c, const std::string& v) { c.acknowledge_paper = to_bool(v); }, fixed("chosen")},
      Key{"mode", [](const ExperimentConfig& c) { return to_string(c.mode); },
          [](ExperimentConfig& c, const std::string& v) { c.mode = parse_mode(v); }, fixed("chosen")},
      FEDCPC_SIZE_KEY("seed", seed, fixed("chosen")),
      FEDCPC_SIZE_KEY("workers", workers, fixed("chosen")),
      FEDCPC_STRING_KEY("data.manifest", manifest, fixed("chosen")),
      FEDCPC_STRING_KEY("data.base_dir", base_dir, fixed("chosen")),
      FEDCPC_SIZE_KEY("synth.speakers", synth.speakers, fixed("desk")),
      FEDCPC_SIZE_KEY("synth.chapters", synth.chapters, fixed("desk")),
      FEDCPC_SIZE_KEY("synth.utterances", synth.utterances, fixed("desk")),
      FEDCPC_SIZE_KEY("synth.seed", synth.seed, fixed("desk")),
      FEDCPC_SIZE_KEY("model.input_dim", model.input_dim, fixed("paper")),
      FEDCPC_SIZE_KEY("model.enc_layers", model.enc_layers, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("model.enc_units", model.enc_units, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("model.ctx_layers", model.ctx_layers, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("model.ctx_units", model.ctx_units, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("model.future_steps", model.future_steps, per_preset("required", "desk")),
      FEDCPC_DOUBLE_KEY("model.temperature", model.temperature, fixed("chosen")),
      FEDCPC_SIZE_KEY("model.negatives", model.num_negatives, fixed("chosen")),
      FEDCPC_SIZE_KEY("fed.clients_per_round", fed.clients_per_round, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("fed.batch_size", fed.client_batch_size, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("fed.local_steps", fed.local_steps, fixed("paper")),
      FEDCPC_SIZE_KEY("fed.batches_per_step", fed.batches_per_step, fixed("paper")),
      FEDCPC_SIZE_KEY("fed.rounds", fed.rounds_max, per_preset("paper", "desk")),
      FEDCPC_DOUBLE_KEY("fed.client_lr", fed.client_lr, fixed("paper")),
      FEDCPC_SIZE_KEY("fed.num_clients", fed.num_clients, fixed("chosen")),
      FEDCPC_SIZE_KEY("fed.checkpoint_every", fed.checkpoint_every, fixed("chosen")),
      Key{"server.optimizer", [](const ExperimentConfig& c) { return optim::to_string(c.fed.server.kind); },
          [](ExperimentConfig& c, const std::string& v) { c.fed.server.kind = optim::parse_kind(v); },
          fixed("paper")},
      FEDCPC_DOUBLE_KEY("server.lr", fed.server.lr, per_preset("paper", "desk")),
      FEDCPC_DOUBLE_KEY("server.beta1", fed.server.beta1, fixed("chosen")),
      FEDCPC_DOUBLE_KEY("server.beta2", fed.server.beta2, fixed("chosen")),
      FEDCPC_DOUBLE_KEY("server.eps", fed.server.eps, fixed("chosen")),
      FEDCPC_SIZE_KEY("central.epochs", central.epochs, fixed("chosen")),
      FEDCPC_SIZE_KEY("central.batch_size", central.batch_size, per_preset("paper", "desk")),
      FEDCPC_SIZE_KEY("central.max_steps", central.max_steps, per_preset("paper", "desk")),
      Key{"central.optimizer", [](const ExperimentConfig& c) { return optim::to_string(c.central.optimizer.kind); },
          [](ExperimentConfig& c, const std::string& v) { c.central.optimizer.kind = optim::parse_kind(v); },
          fixed("chosen")},
      FEDCPC_DOUBLE_KEY("central.lr", central.optimizer.lr, per_preset("chosen", "desk")),
      FEDCPC_SIZE_KEY("central.checkpoint_every", central.checkpoint_every, fixed("chosen")),
      FEDCPC_SIZE_KEY("probe.epochs", probe.epochs, fixed("desk")),
      FEDCPC_DOUBLE_KEY("probe.lr", probe.lr, fixed("desk")),
      FEDCPC_DOUBLE_KEY("probe.l2", probe.l2, fixed("desk")),
      FEDCPC_SIZE_KEY("probe.batch_size", probe.batch_size, fixed("desk")),
      FEDCPC_SIZE_KEY("probe.train_chapters", probe.train_chapters, fixed("desk")),
      FEDCPC_DOUBLE_KEY("probe.eval_fraction", probe.eval_fraction, fixed("desk")),
      Key{"probe.shuffle_labels", [](const ExperimentConfig& c) { return str(c.probe.shuffle_labels); },
          [](ExperimentConfig& c, const std::string& v) { c.probe.shuffle_labels = to_bool(v); }, fixed("chosen")},
  };
  return table;
}

#undef FEDCPC_SIZE_KEY
#undef FEDCPC_DOUBLE_KEY
#undef FEDCPC_STRING_KEY

const Key* find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return &k;
  return nullptr;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Runs `body`, turning any exception into a message on `err` and exit code 1.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
  }
  return 1;
}

}  // namespace

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.preset = cpc::Preset::desk;
  c.model = cpc::CpcConfig::desk();
  c.fed.clients_per_round = 8;
  c.fed.client_batch_size = 2;
  c.fed.rounds_max = 200;
  c.fed.client_lr = 1.0;
  c.fed.server.kind = optim::Kind::adam;
  c.fed.server.lr = 2e-3;
  c.central.batch_size = 16;  // K * B utterances, as one federated round
  c.central.max_steps = 200;
  c.central.optimizer = c.fed.server;
  return c;
}

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.preset = cpc::Preset::paper;
  c.model = cpc::CpcConfig{};
  c.model.preset = cpc::Preset::paper;
  c.model.future_steps = 0;  // no published value
  c.fed.clients_per_round = 48;
  c.fed.client_batch_size = 8;
  c.fed.rounds_max = 22000;
  c.fed.client_lr = 1.0;
  c.fed.server.kind = optim::Kind::adam;
  c.fed.server.lr = 1e-5;
  c.central.batch_size = 64;
  c.central.max_steps = 130000;
  c.central.optimizer = c.fed.server;
  return c;
}

fed::FedConfig ExperimentConfig::fed_config() const {
  fed::FedConfig f = fed;
  f.seed = seed;
  f.workers = workers;
  return f;
}

central::CentralConfig ExperimentConfig::central_config() const {
  central::CentralConfig c = central;
  c.seed = seed;
  return c;
}

probe::ProbeConfig ExperimentConfig::probe_config() const {
  probe::ProbeConfig p = probe;
  p.seed = seed;
  return p;
}

void ExperimentConfig::validate() const {
  if (preset == cpc::Preset::paper) {
    if (!acknowledge_paper) {
      throw ConfigError(
          "the paper preset is far beyond desktop compute; set acknowledge_paper = true (or pass "
          "--acknowledge-paper) to run it anyway");
    }
    if (model.future_steps == 0) throw ConfigError("paper preset: model.future_steps must be set explicitly");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (manifest.empty() && (synth.speakers < 1 || synth.chapters < 1 || synth.utterances < 1)) {
    throw ConfigError("synth counts must be >= 1");
  }
  model.validate();
  fed_config().validate();
  central_config().validate();
}

ExperimentConfig parse_config(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::size_t, std::pair<std::string, std::string>>> entries;
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  std::string preset = "desk";
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, "expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!find_key(key)) throw ParseError(source, line_no, "unknown key '" + key + "'");
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh) {
      throw ParseError(source, line_no, "key '" + key + "' repeated (first on line " + std::to_string(it->second) + ")");
    }
    if (key == "preset") preset = value;
    entries.push_back({line_no, {key, value}});
  }
  ExperimentConfig config;
  try {
    config = parse_preset(preset) == cpc::Preset::paper ? ExperimentConfig::paper() : ExperimentConfig::desk();
  } catch (const ConfigError& e) {
    throw ParseError(source, seen.at("preset"), e.what());
  }
  for (const auto& [no, kv] : entries) {
    try {
      find_key(kv.first)->set(config, kv.second);
    } catch (const ConfigError& e) {
      throw ParseError(source, no, kv.first + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError(source, no, kv.first + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return parse_config(in, path);
}

std::string serialize(const ExperimentConfig& config) {
  std::ostringstream out;
  out << "# fedcpc experiment config\n";
  out << "# origin tags: paper = published value, desk = desk-scale default, chosen = not given by the paper\n";
  for (const auto& k : keys()) {
    out << k.name << " = " << k.get(config) << "  # " << k.origin(config.preset) << '\n';
  }
  return out.str();
}

std::vector<corpus::UtteranceRecord> load_corpus(const ExperimentConfig& config) {
  if (!config.manifest.empty()) return corpus::load_manifest(config.manifest);
  return audio::synth_corpus(config.synth.speakers, config.synth.chapters, config.synth.utterances, config.synth.seed)
      .records;
}

int cmd_silo(const std::string& manifest, const std::string& out, std::ostream& err) {
  return guarded(err, [&] {
    auto records = corpus::load_manifest(manifest);
    auto summary = corpus::summarize_silos(corpus::partition_by_speaker(records));
    std::ostringstream report;
    corpus::write_silo_report(report, summary);
    if (out.empty()) {
      std::cout << report.str();
    } else {
      write_text(out, report.str());
    }
    err << "silo: " << records.size() << " utterances in " << summary.size() << " speaker silos\n";
    return 0;
  });
}

int cmd_synth(const SynthSettings& s, const std::string& out_dir, std::ostream& err) {
  return guarded(err, [&] {
    if (out_dir.empty()) throw ConfigError("synth: --out is required");
    auto corpus = audio::synth_corpus(s.speakers, s.chapters, s.utterances, s.seed);
    corpus::save_manifest(path_in(out_dir, "manifest.tsv"), corpus.records);
    std::ostringstream gen;
    gen << "# synthetic corpus; audio_ref fields are generator specs\n"
        << "synth.speakers = " << s.speakers << "\nsynth.chapters = " << s.chapters
        << "\nsynth.utterances = " << s.utterances << "\nsynth.seed = " << s.seed << '\n';
    write_text(path_in(out_dir, "synth.txt"), gen.str());
    err << "synth: wrote " << corpus.records.size() << " utterances to " << out_dir << '\n';
    return 0;
  });
}

int cmd_pretrain(const ExperimentConfig& config, const std::string& out_dir, std::ostream& err) {
  return guarded(err, [&] {
    config.validate();
    if (out_dir.empty()) throw ConfigError("pretrain: --out is required");
    const auto records = load_corpus(config);
    const std::string text = serialize(config);
    write_text(path_in(out_dir, "config.txt"), text);
    fed::RunOptions options;
    options.features = train::default_feature_source(config.base_dir);
    options.out_dir = out_dir;
    options.metadata = text;
    std::size_t lines = 0;
    if (config.mode == Mode::federated) {
      auto result = fed::run_federated(records, config.fed_config(), config.model, options);
      lines = result.metrics.size();
      if (result.utterances_skipped) err << "pretrain: skipped " << result.utterances_skipped << " short utterances\n";
    } else {
      auto result = central::run_central(records, config.central_config(), config.model, options);
      lines = result.metrics.size();
      if (result.utterances_skipped) err << "pretrain: skipped " << result.utterances_skipped << " short utterances\n";
    }
    err << "pretrain (" << to_string(config.mode) << "): " << lines << " updates, final checkpoint "
        << path_in(out_dir, "final.ckpt") << " sha256 " << sha256_file(path_in(out_dir, "final.ckpt")) << '\n';
    return 0;
  });
}

int cmd_probe(const ExperimentConfig& config, const std::vector<ProbeArm>& arms, const std::string& out,
              std::ostream& err) {
  return guarded(err, [&] {
    config.validate();
    if (arms.empty()) throw ConfigError("probe: no checkpoint given");
    std::vector<cpc::ModelParams> encoders;
    for (const auto& arm : arms) {
      if (arm.checkpoint == "random") {
        encoders.push_back(cpc::init_params(config.model, config.seed));
        continue;
      }
      if (!fs::exists(arm.checkpoint)) throw std::runtime_error("checkpoint not found: " + arm.checkpoint);
      auto ckpt = cpc::load_checkpoint(arm.checkpoint);
      probe::check_compatible(ckpt.params, config.model);
      encoders.push_back(std::move(ckpt.params));
    }
    const auto records = load_corpus(config);
    const auto labels = probe::speaker_labels(records);
    const auto pc = config.probe_config();
    const auto features = train::default_feature_source(config.base_dir);

    // Features are computed once per utterance and shared by every arm.
    std::vector<std::vector<std::vector<double>>> pooled(encoders.size(),
                                                         std::vector<std::vector<double>>(records.size()));
    parallel_for(records.size(), deterministic_mode() ? 1 : config.workers, [&](std::size_t i) {
      const auto f = features(records[i]);
      for (std::size_t a = 0; a < encoders.size(); ++a)
        pooled[a][i] = probe::mean_pool(probe::extract_contexts(encoders[a], f.x));
    });
    const probe::ProbeTask task = probe::make_task(records, labels, pc);
    const auto train_labels = probe::training_labels(labels, task, pc);
    std::vector<probe::ReportRow> rows;
    for (std::size_t a = 0; a < encoders.size(); ++a) {
      auto result = probe::train_probe(pooled[a], train_labels, task, pc);
      rows.push_back({arms[a].arm, arms[a].checkpoint, result.accuracy, result.n_eval});
    }
    std::ostringstream report;
    probe::write_report(report, rows, serialize(config));
    if (out.empty()) {
      std::cout << report.str();
    } else {
      write_text(out, report.str());
    }
    return 0;
  });
}

int cmd_gradcheck(const cpc::CpcConfig& model, std::uint64_t seed, const std::string& out, std::ostream& err) {
  return guarded(err, [&] {
    gradcheck::GradcheckConfig gc;
    gc.seed = seed;
    auto report = gradcheck::run_gradcheck(model, gc);
    std::ostringstream text;
    gradcheck::write_report(text, report);
    if (out.empty()) {
      std::cout << text.str();
    } else {
      write_text(out, text.str());
    }
    if (!report.passed()) {
      err << "gradcheck: finite-difference mismatch above " << format_double(gc.tolerance) << '\n';
      return 1;
    }
    return 0;
  });
}

}  // namespace fedcpc::cli
