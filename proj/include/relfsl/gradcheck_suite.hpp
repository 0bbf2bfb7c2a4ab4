// SPDX-License-Identifier: Apache-2.0
//
// The registered gradient-check suite: every differentiable primitive, the
// relational modules and a small conv-bn-relu network.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "relfsl/gradcheck.hpp"

namespace relfsl {

struct GradcheckCase {
  std::string name;
  std::function<GradcheckReport(std::uint64_t seed, const GradcheckOptions& options)> run;
};

std::vector<GradcheckCase> gradcheck_cases();

/// Tolerance 1e-4 for f32, 1e-6 for f64; epsilon 1e-5.
GradcheckOptions suite_options(Precision precision);

struct GradcheckResult {
  std::string name;
  std::uint64_t seed = 0;
  GradcheckReport report;
};

struct GradcheckSummary {
  std::vector<GradcheckResult> results;
  double seconds = 0.0;
  bool pass() const;
};

/// Runs every case for seeds 0..seeds-1.
GradcheckSummary run_gradcheck_suite(Precision precision, std::size_t seeds = 5,
                                     const std::function<void(const GradcheckResult&)>& on_result = {});

}  // namespace relfsl
