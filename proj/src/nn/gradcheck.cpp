#include "dmae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "dmae/ops.hpp"

namespace dmae {
namespace {

constexpr double kStep = 1e-5;
constexpr double kMagnitudeFloor = 1e-8;
// Allowance for rounding in the difference quotient, in units of
// eps * sum|y_i w_i| / step.
constexpr double kRoundingAllowance = 8.0;

double contract(const Tensor<double>& y, const Tensor<double>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
  return s;
}

double contract_abs(const Tensor<double>& y, const Tensor<double>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] * weights[i]);
  return s;
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << ": " << checked << " coordinates";
  if (!worst_name.empty()) {
    os << ", worst " << worst_name << "[" << worst_index << "] analytic=" << analytic
       << " numeric=" << numeric << " rel_error=" << rel_error;
  }
  return os.str();
}

GradCheckReport check_gradients(const GradCheckForward& forward,
                                const std::vector<Parameter<double>*>& params,
                                double rel_tol, std::uint64_t seed) {
  Tensor<double> weights;
  double rounding = 0.0;
  {
    Graph<double> g;
    Var y = forward(g);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    weights = Tensor<double>(g.value(y).shape());
    for (auto& w : weights.storage()) w = u(rng);
    rounding = kRoundingAllowance * std::numeric_limits<double>::epsilon() *
               contract_abs(g.value(y), weights) / kStep;
  }
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    Var y = forward(g);
    Var s = ops::mean_all(g, ops::mul_const(g, y, weights));
    g.backward(s);
  }
  // mean_all divides by the element count; undo it so analytic and numeric
  // refer to the same contraction.
  const double n = static_cast<double>(weights.size());
  auto evaluate = [&]() {
    Graph<double> g;
    return contract(g.value(forward(g)), weights);
  };

  GradCheckReport report;
  double worst = -1.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + kStep;
      const double up = evaluate();
      p->value[i] = saved - kStep;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * kStep);
      const double analytic = p->grad[i] * n;
      const double mag = std::max(std::abs(analytic), std::abs(numeric));
      if (mag <= kMagnitudeFloor) continue;
      ++report.checked;
      const double rel = std::abs(analytic - numeric) / mag;
      const double excess = std::abs(analytic - numeric) / (rel_tol * mag + rounding);
      if (excess > worst) {
        worst = excess;
        report.worst_name = p->name;
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
        report.rel_error = rel;
      }
    }
  }
  report.passed = worst <= 1.0;
  return report;
}

}  // namespace dmae
