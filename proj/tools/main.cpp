#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/experiment.hpp"
#include "fedcpc/optim.hpp"

using namespace fedcpc;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> mode;
  std::optional<std::string> server_opt;
  bool acknowledge_paper = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Experiment config file (key = value)");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--workers", o.workers, "Worker threads for client updates");
  cmd->add_option("--mode", o.mode, "federated or central")->check(CLI::IsMember({"federated", "central"}));
  cmd->add_option("--server-opt", o.server_opt, "Server optimizer")->check(CLI::IsMember({"adam", "plain"}));
  cmd->add_flag("--acknowledge-paper", o.acknowledge_paper, "Allow the full-size paper preset");
}

cli::ExperimentConfig resolve(const Overrides& o) {
  cli::ExperimentConfig c = o.config.empty() ? cli::ExperimentConfig::desk() : cli::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (o.mode) c.mode = cli::parse_mode(*o.mode);
  if (o.server_opt) c.fed.server.kind = optim::parse_kind(*o.server_opt);
  if (o.acknowledge_paper) c.acknowledge_paper = true;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated CPC pre-training simulator"};
  app.require_subcommand(1);

  std::string out;
  std::string manifest;
  auto* silo = app.add_subcommand("silo", "Partition a manifest into speaker silos and report counts");
  silo->add_option("manifest", manifest, "Manifest (tab-separated)")->required();
  silo->add_option("--out", out, "Report path (default: stdout)");

  cli::SynthSettings synth;
  std::optional<std::uint64_t> synth_seed;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic speaker corpus manifest");
  synth_cmd->add_option("--speakers", synth.speakers)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--chapters", synth.chapters)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--utterances", synth.utterances)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth_seed, "Corpus seed");
  synth_cmd->add_option("--out", out, "Output directory")->required();

  Overrides pre;
  auto* pretrain = app.add_subcommand("pretrain", "Run federated or central CPC pre-training");
  add_common(pretrain, pre);
  pretrain->add_option("--out", out, "Output directory")->required();

  Overrides prb;
  std::vector<std::string> checkpoints;
  auto* probe_cmd = app.add_subcommand("probe", "Linear speaker probe on frozen encoders");
  add_common(probe_cmd, prb);
  probe_cmd->add_option("checkpoints", checkpoints, "arm=path pairs; path 'random' probes the random-init encoder")
      ->required();
  probe_cmd->add_option("--out", out, "Report path (default: stdout)");

  Overrides gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the CPC gradient");
  add_common(grad, gc);
  grad->add_option("--out", out, "Report path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, std::cerr, std::cerr);
  }

  try {
    if (*silo) return cli::cmd_silo(manifest, out, std::cerr);
    if (*synth_cmd) {
      if (synth_seed) synth.seed = *synth_seed;
      return cli::cmd_synth(synth, out, std::cerr);
    }
    if (*pretrain) return cli::cmd_pretrain(resolve(pre), out, std::cerr);
    if (*probe_cmd) {
      std::vector<cli::ProbeArm> arms;
      for (const auto& spec : checkpoints) {
        auto eq = spec.find('=');
        if (eq == std::string::npos) {
          arms.push_back({spec == "random" ? "random" : "checkpoint", spec});
        } else {
          arms.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
        }
      }
      return cli::cmd_probe(resolve(prb), arms, out, std::cerr);
    }
    if (*grad) {
      auto config = resolve(gc);
      config.validate();
      return cli::cmd_gradcheck(config.model, config.seed, out, std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
