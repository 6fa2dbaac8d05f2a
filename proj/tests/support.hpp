#pragma once

// Shared helpers for the unit tests: central finite differences and small
// random generators.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "quadd/tensor.hpp"

namespace quadd::testing {

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Largest relative error between autodiff and central differences over all
// elements of every leaf. f rebuilds the graph from the leaves each call.
inline double fd_max_rel_error(const std::function<Tensor(std::vector<Tensor>&)>& f, std::vector<Tensor> leaves,
                               double eps = 1e-4, double floor = 1e-6) {
  Tape::current().reset();
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  Tensor loss = f(leaves);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());
  Tape::current().reset();

  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < leaves[li].size(); ++i) {
      auto d = leaves[li].mutable_data();
      const double x0 = d[i];
      d[i] = x0 + eps;
      const double up = f(leaves).item();
      d[i] = x0 - eps;
      const double down = f(leaves).item();
      d[i] = x0;
      worst = std::max(worst, rel_err(analytic[li][i], (up - down) / (2 * eps), floor));
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace quadd::testing
