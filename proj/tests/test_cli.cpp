#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fedcpc/checkpoint.hpp"
#include "fedcpc/errors.hpp"
#include "fedcpc/experiment.hpp"
#include "fedcpc/probe.hpp"
#include "fedcpc/training.hpp"
#include "fedcpc/util.hpp"

using namespace fedcpc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fedcpc_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::size_t data_lines(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty() && line.front() != '#') ++n;
  return n;
}

cli::ExperimentConfig small_config(const std::string& extra = "") {
  std::istringstream in(
      "synth.speakers = 4\n"
      "synth.chapters = 2\n"
      "synth.utterances = 3\n"
      "fed.clients_per_round = 2\n"
      "fed.rounds = 5\n"
      "central.epochs = 1\n"
      "central.max_steps = 0\n"
      "probe.train_chapters = 1\n"
      "probe.epochs = 20\n" +
      extra);
  return cli::parse_config(in);
}

}  // namespace

TEST(Cli, SerializeRoundTrips) {
  auto c = small_config("seed = 9\nmode = central\nserver.lr = 0.0125\n");
  std::string text = cli::serialize(c);
  std::istringstream in(text);
  auto back = cli::parse_config(in);
  EXPECT_EQ(cli::serialize(back), text);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.mode, cli::Mode::central);
  EXPECT_EQ(back.fed.server.lr, 0.0125);
  EXPECT_NE(text.find("fed.client_lr = 1  # paper"), std::string::npos);
}

TEST(Cli, ConfigErrorsNameTheLine) {
  auto line_of = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      cli::parse_config(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("seed = 1\n# c\nbogus.key = 3\n"), 3u);
  EXPECT_EQ(line_of("seed = 1\nseed = 2\n"), 2u);
  EXPECT_EQ(line_of("seed 1\n"), 1u);
  EXPECT_EQ(line_of("\nfed.rounds = many\n"), 2u);
}

TEST(Cli, PaperPresetNeedsAcknowledgement) {
  std::istringstream a("preset = paper\nmodel.future_steps = 12\n");
  EXPECT_THROW(cli::parse_config(a).validate(), ConfigError);
  std::istringstream b("preset = paper\nacknowledge_paper = true\n");
  EXPECT_THROW(cli::parse_config(b).validate(), ConfigError);  // no horizon
  std::istringstream c("preset = paper\nacknowledge_paper = true\nmodel.future_steps = 12\n");
  auto cfg = cli::parse_config(c);
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.fed.clients_per_round, 48u);
  EXPECT_EQ(cfg.model.ctx_units, 1024u);
}

TEST(Cli, SynthAndSilo) {
  auto dir = scratch("synth");
  std::ostringstream err;
  ASSERT_EQ(cli::cmd_synth({10, 3, 5, 42}, (dir / "a").string(), err), 0) << err.str();
  ASSERT_EQ(cli::cmd_synth({10, 3, 5, 42}, (dir / "b").string(), err), 0);
  std::string manifest = read_file(dir / "a" / "manifest.tsv");
  EXPECT_EQ(data_lines(manifest), 150u);
  EXPECT_EQ(manifest, read_file(dir / "b" / "manifest.tsv"));

  ASSERT_EQ(cli::cmd_silo((dir / "a" / "manifest.tsv").string(), (dir / "silo.tsv").string(), err), 0);
  std::string report = read_file(dir / "silo.tsv");
  EXPECT_EQ(data_lines(report), 1u + 10u + 1u);  // header, speakers, TOTAL
  EXPECT_NE(report.find("TOTAL\t150\t30\t"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, MalformedManifestFailsWithLine) {
  auto dir = scratch("bad");
  std::ofstream(dir / "m.tsv") << "u1\ts\t1\ta\t1\nu2\ts\t1\n";
  std::ostringstream err;
  EXPECT_NE(cli::cmd_silo((dir / "m.tsv").string(), "", err), 0);
  EXPECT_NE(err.str().find(":2:"), std::string::npos) << err.str();

  std::string cmd = std::string(FEDCPC_CLI) + " silo " + (dir / "m.tsv").string() + " 2>" + (dir / "e.txt").string();
  int status = std::system(cmd.c_str());
  EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) != 0);
  EXPECT_NE(read_file(dir / "e.txt").find("m.tsv:2:"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, PretrainWritesRunArtifacts) {
  auto dir = scratch("pretrain");
  std::ostringstream err;
  auto fed_cfg = small_config();
  ASSERT_EQ(cli::cmd_pretrain(fed_cfg, (dir / "fed").string(), err), 0) << err.str();
  EXPECT_EQ(train::load_metrics((dir / "fed" / "metrics.tsv").string()).size(), 5u);
  EXPECT_TRUE(fs::exists(dir / "fed" / "final.ckpt"));
  EXPECT_EQ(read_file(dir / "fed" / "config.txt"), cli::serialize(fed_cfg));

  auto central_cfg = small_config("mode = central\ncentral.batch_size = 10\n");
  ASSERT_EQ(cli::cmd_pretrain(central_cfg, (dir / "central").string(), err), 0) << err.str();
  EXPECT_EQ(train::load_metrics((dir / "central" / "metrics.tsv").string()).size(), 3u);  // ceil(24 / 10)

  ASSERT_EQ(cli::cmd_pretrain(fed_cfg, (dir / "again").string(), err), 0);
  EXPECT_EQ(sha256_file((dir / "fed" / "final.ckpt").string()), sha256_file((dir / "again" / "final.ckpt").string()));
  fs::remove_all(dir);
}

TEST(Cli, ProbeMatchesInProcessEvaluation) {
  auto dir = scratch("probe");
  std::ostringstream err;
  auto cfg = small_config();
  ASSERT_EQ(cli::cmd_pretrain(cfg, (dir / "run").string(), err), 0) << err.str();
  std::string ckpt = (dir / "run" / "final.ckpt").string();

  EXPECT_NE(cli::cmd_probe(cfg, {{"federated", (dir / "missing.ckpt").string()}}, "", err), 0);
  EXPECT_NE(err.str().find("missing.ckpt"), std::string::npos);

  ASSERT_EQ(cli::cmd_probe(cfg, {{"federated", ckpt}, {"random", "random"}}, (dir / "r.tsv").string(), err), 0)
      << err.str();
  std::istringstream report(read_file(dir / "r.tsv"));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(report, line)) {
    if (line.empty() || line.front() == '#' || line.starts_with("arm\t")) continue;
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string x; std::getline(fields, x, '\t');) f.push_back(x);
    rows.push_back(f);
  }
  ASSERT_EQ(rows.size(), 2u);

  const auto records = cli::load_corpus(cfg);
  const auto labels = probe::speaker_labels(records);
  auto direct = probe::evaluate_encoder(cpc::load_checkpoint(ckpt).params, records, labels,
                                        train::default_feature_source(), cfg.probe_config());
  EXPECT_EQ(std::stod(rows[0][2]), direct.accuracy);
  EXPECT_EQ(std::stoul(rows[0][3]), direct.n_eval);
  fs::remove_all(dir);
}

TEST(Cli, IncompatibleCheckpointIsReported) {
  auto dir = scratch("mismatch");
  std::ostringstream err;
  auto cfg = small_config("model.enc_units = 32\n");
  ASSERT_EQ(cli::cmd_pretrain(cfg, (dir / "run").string(), err), 0) << err.str();
  EXPECT_NE(cli::cmd_probe(small_config(), {{"federated", (dir / "run" / "final.ckpt").string()}}, "", err), 0);
  EXPECT_NE(err.str().find("enc_units=32"), std::string::npos) << err.str();
  fs::remove_all(dir);
}

TEST(Cli, ShippedConfigsMatchPresets) {
  const fs::path dir = FEDCPC_CONFIG_DIR;
  auto desk = cli::load_config((dir / "desk.conf").string());
  EXPECT_EQ(cli::serialize(desk), cli::serialize(cli::ExperimentConfig::desk()));
  EXPECT_NO_THROW(desk.validate());
  auto paper = cli::load_config((dir / "paper.conf").string());
  EXPECT_EQ(cli::serialize(paper), cli::serialize(cli::ExperimentConfig::paper()));
  EXPECT_THROW(paper.validate(), ConfigError);
}
