#include "fedcpc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include "fedcpc/util.hpp"

namespace fedcpc::gradcheck {

namespace {

constexpr std::uint64_t kInputTag = 0x9c0d;
constexpr std::uint64_t kPickTag = 0x9c0e;

}  // namespace

bool Report::passed() const {
  return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.passed; });
}

std::string group_of(const std::string& name) {
  if (name.rfind("enc.", 0) == 0) return "encoder";
  auto second_dot = name.find('.', name.find('.') + 1);
  if (name.rfind("ar.", 0) == 0) return "lstm." + name.substr(3, second_dot - 3);
  return name.substr(0, second_dot);
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

Report run_gradcheck(const cpc::CpcConfig& model, const GradcheckConfig& config) {
  model.validate();
  const std::size_t frames = std::max(config.frames, model.min_frames());
  cpc::ModelParams params = cpc::init_params(model, config.seed);

  Rng input_rng(derive_seed({config.seed, kInputTag}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> xs(frames * model.input_dim);
  for (double& v : xs) v = normal(input_rng);
  const ad::Tensor x({frames, model.input_dim}, xs);
  const std::uint64_t negatives = derive_seed({config.seed, 0x4e47});

  const cpc::Sample sample{&x, negatives, 1.0};
  const cpc::LossAndGrad lg = cpc::weighted_loss_and_grad(params, std::span(&sample, 1), model);

  Report report;
  report.loss = lg.loss;
  Rng pick(derive_seed({config.seed, kPickTag}));
  std::vector<double> flat = params.flatten();
  std::size_t offset = 0;
  for (const auto& spec : params.layout()) {
    const std::size_t n = ad::shape_size(spec.shape);
    std::vector<std::size_t> entries;
    if (n <= config.entries_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) entries.push_back(i);
    } else {
      // Largest-magnitude entry plus a uniform sample.
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs(lg.grad[offset + i]) > std::abs(lg.grad[offset + best])) best = i;
      entries.push_back(best);
      std::uniform_int_distribution<std::size_t> idx(0, n - 1);
      while (entries.size() < config.entries_per_tensor) entries.push_back(idx(pick));
    }

    const std::string group = group_of(spec.name);
    auto it = std::find_if(report.groups.begin(), report.groups.end(),
                           [&](const GroupResult& g) { return g.group == group; });
    if (it == report.groups.end()) {
      report.groups.push_back({group, 0, 0.0, "", true});
      it = report.groups.end() - 1;
    }
    for (std::size_t e : entries) {
      const std::size_t at = offset + e;
      const double saved = flat[at];
      flat[at] = saved + config.step;
      params.assign_flat(flat);
      const double up = cpc::infonce_value(params, x, model, negatives);
      flat[at] = saved - config.step;
      params.assign_flat(flat);
      const double down = cpc::infonce_value(params, x, model, negatives);
      flat[at] = saved;
      const double numeric = (up - down) / (2.0 * config.step);
      const double err = relative_error(lg.grad[at], numeric, config.denominator_floor);
      ++it->entries;
      if (err > it->max_rel_err || it->worst.empty()) {
        it->max_rel_err = std::max(err, it->max_rel_err);
        it->worst = spec.name + "[" + std::to_string(e) + "]";
      }
    }
    offset += n;
  }
  params.assign_flat(flat);
  for (auto& g : report.groups) g.passed = g.max_rel_err < config.tolerance;
  return report;
}

void write_report(std::ostream& out, const Report& report) {
  out << "group\tentries\tmax_rel_err\tworst\tstatus\n";
  for (const auto& g : report.groups) {
    out << g.group << '\t' << g.entries << '\t' << format_double(g.max_rel_err) << '\t' << g.worst << '\t'
        << (g.passed ? "PASS" : "FAIL") << '\n';
  }
}

}  // namespace fedcpc::gradcheck
