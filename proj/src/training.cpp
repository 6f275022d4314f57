#include "fedcpc/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "fedcpc/errors.hpp"
#include "fedcpc/synth.hpp"
#include "fedcpc/util.hpp"

namespace fedcpc::train {

FeatureSource default_feature_source(const std::string& base_dir) {
  return [base_dir](const corpus::UtteranceRecord& r) { return audio::load_features(r, base_dir); };
}

std::uint64_t negative_seed(std::uint64_t run_seed, std::size_t step, const std::string& utterance_id) {
  return derive_seed({run_seed, step, stable_hash(utterance_id), 0x4e47});
}

void write_metrics(std::ostream& out, const std::vector<RoundMetrics>& rows, const std::string& preamble) {
  std::istringstream pre(preamble);
  std::string line;
  while (std::getline(pre, line)) out << "# " << line << '\n';
  out << "round\tclients\tutterances\tmean_client_loss\tgrad_norm\twall_ms\n";
  for (const auto& r : rows) {
    out << r.round << '\t' << r.clients << '\t' << r.utterances << '\t' << format_double(r.mean_client_loss) << '\t'
        << format_double(r.grad_norm) << '\t' << format_double(r.wall_ms) << '\n';
  }
}

void save_metrics(const std::string& path, const std::vector<RoundMetrics>& rows, const std::string& preamble) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write metrics " + path);
  write_metrics(out, rows, preamble);
}

std::vector<RoundMetrics> load_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics " + path);
  std::vector<RoundMetrics> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream fields(line);
    RoundMetrics r;
    if (!(fields >> r.round >> r.clients >> r.utterances >> r.mean_client_loss >> r.grad_norm >> r.wall_ms)) {
      throw ParseError(path, line_no, "expected 6 metric fields");
    }
    rows.push_back(r);
  }
  return rows;
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace fedcpc::train
