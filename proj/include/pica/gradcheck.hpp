#pragma once

#include <functional>
#include <vector>

#include "pica/ops.hpp"
#include "pica/tensor.hpp"

namespace pica {

// Checks the recorded backward rule of an operation against central finite
// differences of sum(op(inputs)). Returns
//   max over input elements of |analytic - cd| / max(|analytic|, |cd|, 1e-8).
// The assertion against a threshold lives in the calling test.
template <typename T>
double fd_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&, Tape<T>*)>& op,
    std::vector<Tensor<T>> inputs, double eps) {
  if (eps <= 0) throw std::invalid_argument("fd_check: eps must be positive");

  // Analytic gradients via one taped forward + backward.
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    for (auto& t : inputs) tape.watch(t);
    Tensor<T> y = op(inputs, &tape);
    Tensor<T> loss = sum(y, &tape);
    tape.backward(loss);
    for (auto& t : inputs) analytic.push_back(t.grad_vec());
  }

  auto eval = [&]() {
    Tensor<T> y = op(inputs, nullptr);
    // compensated summation keeps the reduction noise below the op's own
    double acc = 0, comp = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      const double v = double(y.data()[i]) - comp;
      const double s = acc + v;
      comp = (s - acc) - v;
      acc = s;
    }
    return acc;
  };

  double worst = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    T* v = inputs[t].data();
    for (std::int64_t i = 0; i < inputs[t].numel(); ++i) {
      const T keep = v[i];
      v[i] = keep + T(eps);
      const double up = eval();
      v[i] = keep - T(eps);
      const double dn = eval();
      v[i] = keep;
      const double cd = (up - dn) / (2.0 * eps);
      const double an = double(analytic[t][std::size_t(i)]);
      const double err = std::abs(an - cd) / std::max({std::abs(an), std::abs(cd), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace pica
