#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace vdpo::grad {

inline constexpr double kDefaultFdStep = 1e-6;
inline constexpr double kDefaultFdFloor = 1e-9;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<double> grad;
};

// A pure, deterministic scalar function of a flat parameter vector that can
// also report its analytic gradient.
using DifferentiableFn = std::function<ValueAndGrad(std::span<const double>)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = kDefaultFdFloor);

// Compares the analytic gradient with central differences
// (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
GradCheckReport grad_check(const DifferentiableFn& fn, std::span<const double> params,
                           double step = kDefaultFdStep, double floor = kDefaultFdFloor);

// The same check in random-projection coordinates: `count` seeded unit
// directions d_j, g(t) = f(params + sum_j t_j d_j) checked at t = 0, with
// analytic gradient D^T grad f. Useful when some exact partial derivatives
// are zero or tiny and sit below finite-difference round-off.
GradCheckReport projected_grad_check(const DifferentiableFn& fn, std::span<const double> params,
                                     std::size_t count, std::uint64_t seed,
                                     double step = kDefaultFdStep,
                                     double floor = kDefaultFdFloor);

}  // namespace vdpo::grad
