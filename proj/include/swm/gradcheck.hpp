#pragma once

#include <functional>
#include <vector>

#include "swm/autograd.hpp"

namespace swm {

/// Central finite-difference gradient check in float64.
/// `build` reconstructs the scalar loss from leaf variables each call.
/// Returns the maximum relative error over every input element.
inline double gradcheck(
    const std::function<Tape64::Var(Tape64&, const std::vector<Tape64::Var>&)>& build,
    std::vector<Tensor64> inputs, double eps = 1e-5) {
  auto eval = [&](const std::vector<Tensor64>& xs) {
    Tape64 tape;
    std::vector<Tape64::Var> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    return tape.value(build(tape, vars)).data[0];
  };

  Tape64 tape;
  std::vector<Tape64::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  tape.backward(build(tape, vars));

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor64 analytic = tape.grad(vars[i]);
    for (size_t j = 0; j < inputs[i].data.size(); ++j) {
      double keep = inputs[i].data[j];
      inputs[i].data[j] = keep + eps;
      double fp = eval(inputs);
      inputs[i].data[j] = keep - eps;
      double fm = eval(inputs);
      inputs[i].data[j] = keep;
      double numeric = (fp - fm) / (2.0 * eps);
      double err = std::abs(analytic.data[j] - numeric) /
                   std::max({1.0, std::abs(analytic.data[j]), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace swm
