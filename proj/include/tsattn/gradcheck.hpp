#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "ops.hpp"

namespace tsattn {

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
  std::string worst;  // "input[i]" of the worst element
};

/// Builds an output from leaf variables recorded on the given tape.
using GradCheckFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients against central finite differences.
/// Non-scalar outputs are reduced as sum(out * R) with a fixed random R so
/// every output element contributes. Relative error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckResult gradient_check(const std::vector<Tensor<double>>& inputs, const GradCheckFn& fn,
                                      double h = 1e-3, double floor = 1e-8, std::uint64_t seed = 7) {
  Tensor<double> projection;
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, bool with_grad, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x, with_grad));
    auto out = fn(tape, leaves);
    if (projection.empty()) {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      projection = Tensor<double>(out.shape());
      for (auto& v : projection.storage()) v = out.value().size() == 1 ? 1.0 : dist(rng);
    }
    auto loss = sum(mul(out, tape.constant(projection)));
    if (grads) {
      tape.backward(loss);
      for (const auto& l : leaves) grads->push_back(l.grad());
    }
    return loss.value()[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, true, &analytic);

  GradCheckResult r;
  auto xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double up = evaluate(xs, false, nullptr);
      xs[k][i] = orig - h;
      const double down = evaluate(xs, false, nullptr);
      xs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = "input" + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

/// Uniform random tensor in [lo, hi).
inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

/// Uniform magnitudes in [lo, hi) with random sign, keeping values away from zero.
inline Tensor<double> random_tensor_away_from_zero(Shape shape, std::mt19937_64& rng, double lo = 0.1,
                                                   double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.storage()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

}  // namespace tsattn
