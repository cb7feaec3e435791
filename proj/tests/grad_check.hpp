#pragma once

// Central finite-difference oracle. Test-only: it never looks at the
// backward closures, only at forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rashnet/autograd.hpp"
#include "rashnet/ops.hpp"

namespace rashnet::testing {

using ScalarFn = std::function<Variable(const std::vector<Variable>&)>;

inline Tensor random_tensor(Shape shape, DType dtype, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape), dtype);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

/// Values bounded away from zero, for ops with a kink at 0.
inline Tensor random_nonzero(Shape shape, DType dtype, std::mt19937_64& rng, double margin = 0.05) {
  Tensor t(std::move(shape), dtype);
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, sign(rng) ? mag(rng) : -mag(rng));
  return t;
}

/// Per-entry relative error with a small absolute floor in the denominator,
/// so entries whose true gradient is ~0 are judged on absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

/// Reduces any tensor-valued op to a scalar with fixed random weights.
inline Variable weighted_sum(const Variable& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Variable w(random_tensor(y.shape(), y.dtype(), rng), false);
  return sum(mul(y, w));
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t entries = 0;
};

/// Evaluates fn once with recording to get analytic gradients, then perturbs
/// every entry of every input by ±h. Inputs are copied, never mutated.
inline GradCheckResult check_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                       double h = 1e-5, double floor = 1e-4) {
  std::vector<Variable> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  Variable loss = fn(vars);
  backward(loss);

  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      auto eval = [&](double delta) {
        NoGradGuard guard;
        std::vector<Variable> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t.set(i, t.get(i) + delta);
          probe.emplace_back(std::move(t), false);
        }
        return fn(probe).value().get(0);
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = vars[k].has_grad() ? vars[k].grad().get(i) : 0.0;
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, numeric, floor));
      ++r.entries;
    }
  }
  return r;
}

}  // namespace rashnet::testing
