#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "vesselseg/ops.hpp"

namespace vesselseg {

/// |analytic - numeric| / max(|analytic|, |numeric|, kGradcheckFloor).
inline constexpr double kGradcheckFloor = 1e-6;
double gradcheck_relative_error(double analytic, double numeric);

/// Compares backward() against central differences for every element of every
/// input. `loss` must build a scalar from the inputs on the given tape.
/// Returns the maximum relative error.
double check_gradients(std::vector<Tensor<double>> inputs,
                       const std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>& loss,
                       double step = 1e-4);

/// Same, but probes only the listed (input, element) coordinates.
double check_gradients_at(std::vector<Tensor<double>> inputs,
                          const std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>& loss,
                          const std::vector<std::pair<size_t, Index>>& probes, double step = 1e-4);

struct GradcheckEntry {
  std::string name;
  double tolerance = 1e-5;
  /// Runs one randomized check and returns its max relative error.
  std::function<double(std::uint64_t seed)> run;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  int seeds = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  double seconds = 0;
  bool passed() const;
  /// 0 when every entry is under tolerance, 1 otherwise.
  int exit_code() const { return passed() ? 0 : 1; }
  void print(std::ostream& os) const;
};

/// One entry per differentiable primitive (tolerance 1e-5) plus the two
/// composite training objectives (tolerance 1e-4).
std::vector<GradcheckEntry> default_gradcheck_entries();

GradcheckReport run_gradcheck(const std::vector<GradcheckEntry>& entries, int seeds = 20);

}  // namespace vesselseg
