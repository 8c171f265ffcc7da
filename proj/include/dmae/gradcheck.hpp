#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmae/graph.hpp"

namespace dmae {

struct GradCheckReport {
  bool passed = true;
  std::size_t checked = 0;     // coordinates compared
  std::string worst_name;      // parameter holding the worst coordinate
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;

  std::string summary() const;
};

/// Builds the function under test on a fresh graph and returns its output.
/// The output may have any shape; it is contracted with fixed random weights
/// to a scalar before differentiation.
using GradCheckForward = std::function<Var(Graph<double>&)>;

/// Compares analytic gradients of every coordinate of `params` against
/// central differences with step 1e-5. A coordinate with
/// max(|a|, |n|) > 1e-8 fails when |a - n| exceeds
/// rel_tol * max(|a|, |n|) + r, where r = 8 eps sum|y_i w_i| / step bounds
/// the rounding error of the difference quotient. The report's worst
/// coordinate is the one closest to failing.
GradCheckReport check_gradients(const GradCheckForward& forward,
                                const std::vector<Parameter<double>*>& params,
                                double rel_tol, std::uint64_t seed = 7);

}  // namespace dmae
