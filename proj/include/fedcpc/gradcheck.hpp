#pragma once

// Central finite differences against the reverse-mode gradient of the full
// CPC loss, reported per parameter group.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedcpc/cpc_model.hpp"

namespace fedcpc::gradcheck {

struct GradcheckConfig {
  double step = 1e-5;
  double tolerance = 1e-4;
  double denominator_floor = 1e-6;
  std::size_t entries_per_tensor = 12;
  std::size_t frames = 14;
  std::uint64_t seed = 0;
};

struct GroupResult {
  std::string group;  // "encoder", "lstm.<l>", "head.<k>"
  std::size_t entries = 0;
  double max_rel_err = 0.0;
  std::string worst;  // "<tensor>[<flat index>]"
  bool passed = false;
};

struct Report {
  std::vector<GroupResult> groups;
  double loss = 0.0;

  bool passed() const;
};

/// Group of a parameter name (see GroupResult::group).
std::string group_of(const std::string& param_name);

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

Report run_gradcheck(const cpc::CpcConfig& model, const GradcheckConfig& config);

void write_report(std::ostream& out, const Report& report);

}  // namespace fedcpc::gradcheck
