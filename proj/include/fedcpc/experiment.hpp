#pragma once

// Experiment configuration and the command implementations behind the CLI.
//
// The config file is flat `key = value` text, '#' starts a comment. Unknown
// keys are errors. serialize() writes every key, so a serialized config
// reproduces a run exactly.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedcpc/central.hpp"
#include "fedcpc/cpc_model.hpp"
#include "fedcpc/federated.hpp"
#include "fedcpc/probe.hpp"

namespace fedcpc::cli {

enum class Mode { federated, central };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& text);

struct SynthSettings {
  std::size_t speakers = 10;
  std::size_t chapters = 12;
  std::size_t utterances = 40;
  std::uint64_t seed = 42;
};

struct ExperimentConfig {
  cpc::Preset preset = cpc::Preset::desk;
  bool acknowledge_paper = false;
  Mode mode = Mode::federated;
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  std::string manifest;  // empty: synthesize from `synth`
  std::string base_dir;
  SynthSettings synth;

  cpc::CpcConfig model = cpc::CpcConfig::desk();
  fed::FedConfig fed;
  central::CentralConfig central;
  probe::ProbeConfig probe;

  /// Desk defaults (the values the acceptance suite runs).
  static ExperimentConfig desk();
  /// Full-size settings. `future_steps` must still be given explicitly.
  static ExperimentConfig paper();

  /// Run seeds and worker count pushed down into the sub-configs.
  fed::FedConfig fed_config() const;
  central::CentralConfig central_config() const;
  probe::ProbeConfig probe_config() const;

  void validate() const;  // throws ConfigError
};

/// Parses on top of the preset named by a `preset` key (desk if absent).
/// Throws ParseError (with line) for syntax errors and unknown keys.
ExperimentConfig parse_config(std::istream& in, const std::string& source = "config");
ExperimentConfig load_config(const std::string& path);

/// Every key, one per line, each annotated with where its value comes from.
std::string serialize(const ExperimentConfig& config);

/// Corpus named by the config: the manifest if set, otherwise a synthetic one.
std::vector<corpus::UtteranceRecord> load_corpus(const ExperimentConfig& config);

// Commands. Each returns a process exit code; diagnostics go to `err`.

int cmd_silo(const std::string& manifest, const std::string& out, std::ostream& err);
int cmd_synth(const SynthSettings& settings, const std::string& out_dir, std::ostream& err);
int cmd_pretrain(const ExperimentConfig& config, const std::string& out_dir, std::ostream& err);

struct ProbeArm {
  std::string arm;
  std::string checkpoint;  // "random" probes the seeded random-init encoder
};
int cmd_probe(const ExperimentConfig& config, const std::vector<ProbeArm>& arms, const std::string& out,
              std::ostream& err);
int cmd_gradcheck(const cpc::CpcConfig& model, std::uint64_t seed, const std::string& out, std::ostream& err);

}  // namespace fedcpc::cli
