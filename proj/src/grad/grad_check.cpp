#include "vdpo/grad/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vdpo/error.hpp"
#include "vdpo/rng.hpp"

namespace vdpo::grad {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const DifferentiableFn& fn, std::span<const double> params,
                           double step, double floor) {
  if (!(step > 0.0)) throw invalid_argument("grad_check step must be positive");
  const ValueAndGrad base = fn(params);
  if (base.grad.size() != params.size()) {
    throw Error(ErrorKind::kShape, "analytic gradient has " +
                                       std::to_string(base.grad.size()) +
                                       " entries for " + std::to_string(params.size()) +
                                       " parameters");
  }

  GradCheckReport report;
  report.coordinates = params.size();
  std::vector<double> p(params.begin(), params.end());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double plus = fn(p).value;
    p[i] = orig - step;
    const double minus = fn(p).value;
    p[i] = orig;
    const double numeric = (plus - minus) / (2.0 * step);
    const double analytic = base.grad[i];
    if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
      throw Error(ErrorKind::kNumeric,
                  "non-finite gradient at coordinate " + std::to_string(i));
    }
    const double err = relative_error(analytic, numeric, floor);
    if (i == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_coordinate = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

GradCheckReport projected_grad_check(const DifferentiableFn& fn, std::span<const double> params,
                                     std::size_t count, std::uint64_t seed, double step,
                                     double floor) {
  if (count == 0) throw invalid_argument("projected_grad_check needs at least one direction");
  const std::size_t n = params.size();
  Rng rng(seed);
  std::vector<std::vector<double>> dirs(count, std::vector<double>(n));
  for (auto& d : dirs) {
    double norm = 0.0;
    for (auto& x : d) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : d) x /= norm;
  }
  std::vector<double> p(n);
  DifferentiableFn projected = [&](std::span<const double> t) {
    std::copy(params.begin(), params.end(), p.begin());
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t i = 0; i < n; ++i) p[i] += t[j] * dirs[j][i];
    }
    ValueAndGrad full = fn(p);
    if (full.grad.size() != n) {
      throw Error(ErrorKind::kShape, "analytic gradient has " + std::to_string(full.grad.size()) +
                                         " entries for " + std::to_string(n) + " parameters");
    }
    ValueAndGrad out{full.value, std::vector<double>(count, 0.0)};
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t i = 0; i < n; ++i) out.grad[j] += dirs[j][i] * full.grad[i];
    }
    return out;
  };
  const std::vector<double> origin(count, 0.0);
  return grad_check(projected, origin, step, floor);
}

}  // namespace vdpo::grad
