#pragma once

#include <functional>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "stseg/autodiff.hpp"

namespace oracle {

using Builder = std::function<stseg::Var<double>(const std::vector<stseg::Var<double>>&)>;

/// Compares analytic gradients of weighted_sum(build(inputs), R) against
/// central finite differences for every input. Returns the worst relative
/// error over all inputs.
inline double probe_gradients(const Builder& build, const std::vector<Tensor<double>>& inputs, std::uint64_t seed = 99,
                              double step = 1e-5) {
  std::vector<stseg::Var<double>> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  auto out = build(vars);
  std::mt19937_64 rng(seed);
  const auto weights = random_tensor(out.shape(), rng);
  stseg::backward(stseg::weighted_sum(out, weights));

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor<double>& probe) {
      std::vector<stseg::Var<double>> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.emplace_back(j == k ? probe : inputs[j]);
      stseg::NoGradGuard ng;
      const auto y = build(vs);
      double acc = 0;
      for (std::size_t i = 0; i < weights.size(); ++i) acc += y.value()[i] * weights[i];
      return acc;
    };
    const auto numeric = finite_diff(f, inputs[k], step);
    worst = std::max(worst, rel_err(vars[k].grad(), numeric));
  }
  return worst;
}

}  // namespace oracle
