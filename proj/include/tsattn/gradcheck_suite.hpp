#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "attention.hpp"
#include "gradcheck.hpp"

namespace tsattn {

/// A named finite-difference check over one differentiable operation.
struct OpCheck {
  std::string name;
  std::function<GradCheckResult()> run;
};

namespace detail {

inline GradCheckResult worst_of(std::initializer_list<GradCheckResult> rs) {
  GradCheckResult out;
  for (const auto& r : rs) {
    if (r.max_rel_error >= out.max_rel_error) {
      out.max_rel_error = r.max_rel_error;
      out.worst = r.worst;
    }
    out.max_abs_error = std::max(out.max_abs_error, r.max_abs_error);
    out.checked += r.checked;
  }
  return out;
}

using Leaves = std::vector<Var<double>>;

// U (B,T,F,C=3), temporal w/b, spectral w/b, fusion logits
inline std::vector<Tensor<double>> attention_inputs(std::mt19937_64& rng) {
  return {random_tensor({2, 5, 4, 3}, rng), random_tensor({1, 1, 3, 1}, rng), random_tensor({1}, rng),
          random_tensor({1, 1, 3, 1}, rng), random_tensor({1}, rng),         random_tensor({3}, rng)};
}

}  // namespace detail

/// Every differentiable operation in the library, each on small random inputs.
inline std::vector<OpCheck> op_checks(std::uint64_t seed = 0) {
  using detail::Leaves;
  std::vector<OpCheck> checks;
  auto add = [&](std::string name, std::function<GradCheckResult(std::mt19937_64&)> f) {
    checks.push_back({name, [f, seed, k = checks.size()] {
                        std::mt19937_64 rng(seed * 1000 + k);
                        return f(rng);
                      }});
  };

  add("conv2d", [](std::mt19937_64& rng) {
    auto one = [&](Padding pad) {
      return gradient_check({random_tensor({2, 5, 4, 2}, rng), random_tensor({3, 3, 2, 3}, rng), random_tensor({3}, rng)},
                            [pad](Tape<double>&, const Leaves& v) { return conv2d(v[0], v[1], v[2], pad); });
    };
    return detail::worst_of({one(Padding::same), one(Padding::valid)});
  });
  add("avg_pool2d", [](std::mt19937_64& rng) {
    return gradient_check({random_tensor({2, 5, 6, 2}, rng)},
                          [](Tape<double>&, const Leaves& v) { return avg_pool2d(v[0]); });
  });
  add("global_pool", [](std::mt19937_64& rng) {
    auto axis = [&](Axis a) {
      return gradient_check({random_tensor({2, 4, 5, 1}, rng)},
                            [a](Tape<double>&, const Leaves& v) { return global_avg_pool_axis(v[0], a); });
    };
    auto mean = gradient_check({random_tensor({2, 3, 4, 3}, rng)},
                               [](Tape<double>&, const Leaves& v) { return global_mean_pool(v[0]); });
    return detail::worst_of({axis(Axis::time), axis(Axis::frequency), mean});
  });
  add("batch_norm", [](std::mt19937_64& rng) {
    auto one = [&](Mode mode) {
      BatchNormStats<double> stats(3);
      stats.mean[1] = 0.3;
      stats.var[2] = 2.0;
      return gradient_check(
          {random_tensor({2, 3, 4, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
          [&stats, mode](Tape<double>&, const Leaves& v) { return batch_norm(v[0], v[1], v[2], stats, mode); });
    };
    return detail::worst_of({one(Mode::train), one(Mode::eval)});
  });
  add("dense", [](std::mt19937_64& rng) {
    return gradient_check({random_tensor({3, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4}, rng)},
                          [](Tape<double>&, const Leaves& v) { return dense(v[0], v[1], v[2]); });
  });
  add("relu", [](std::mt19937_64& rng) {
    // inputs kept away from the kink at zero
    return gradient_check({random_tensor_away_from_zero({3, 4, 2}, rng)},
                          [](Tape<double>&, const Leaves& v) { return relu(v[0]); });
  });
  add("sigmoid", [](std::mt19937_64& rng) {
    return gradient_check({random_tensor({3, 4, 2}, rng, -4, 4)},
                          [](Tape<double>&, const Leaves& v) { return sigmoid(v[0]); });
  });
  add("softmax", [](std::mt19937_64& rng) {
    return gradient_check({random_tensor({5}, rng, -2, 2)},
                          [](Tape<double>&, const Leaves& v) { return softmax(v[0]); });
  });
  add("channel_squeeze", [](std::mt19937_64& rng) {
    return gradient_check({random_tensor({2, 4, 3, 3}, rng), random_tensor({1, 1, 3, 1}, rng), random_tensor({1}, rng)},
                          [](Tape<double>&, const Leaves& v) { return channel_squeeze(v[0], v[1], v[2]); });
  });
  add("axis_attention_weights", [](std::mt19937_64& rng) {
    auto one = [&](Axis a) {
      return gradient_check({random_tensor({2, 4, 5, 1}, rng)},
                            [a](Tape<double>&, const Leaves& v) { return axis_attention_weights(v[0], a).values; });
    };
    return detail::worst_of({one(Axis::time), one(Axis::frequency)});
  });
  add("rescale", [](std::mt19937_64& rng) {
    auto one = [&](Axis a) {
      const std::size_t len = a == Axis::time ? 4 : 5;
      return gradient_check({random_tensor({2, 4, 5, 3}, rng), random_tensor({2, len}, rng, 0.1, 0.9)},
                            [a](Tape<double>&, const Leaves& v) {
                              return rescale(v[0], AxisActivations<double>{a, v[1]});
                            });
    };
    return detail::worst_of({one(Axis::time), one(Axis::frequency)});
  });
  add("temporal_attention", [](std::mt19937_64& rng) {
    return gradient_check(detail::attention_inputs(rng),
                          [](Tape<double>&, const Leaves& v) { return temporal_attention(v[0], v[1], v[2]); });
  });
  add("spectral_attention", [](std::mt19937_64& rng) {
    return gradient_check(detail::attention_inputs(rng),
                          [](Tape<double>&, const Leaves& v) { return spectral_attention(v[0], v[3], v[4]); });
  });
  add("parallel_fuse", [](std::mt19937_64& rng) {
    return gradient_check(detail::attention_inputs(rng), [](Tape<double>&, const Leaves& v) {
      return parallel_fuse(temporal_attention(v[0], v[1], v[2]), spectral_attention(v[0], v[3], v[4]), v[0], v[5]);
    });
  });
  add("serial_concat", [](std::mt19937_64& rng) {
    auto one = [&](SerialOrder order) {
      return gradient_check(detail::attention_inputs(rng), [order](Tape<double>&, const Leaves& v) {
        return serial_concat(v[0], v[1], v[2], v[3], v[4], order);
      });
    };
    return detail::worst_of({one(SerialOrder::temporal_first), one(SerialOrder::spectral_first)});
  });
  add("cross_entropy", [](std::mt19937_64& rng) {
    Tensor<double> soft({3, 4}, {0.5, 0.5, 0, 0, 0.1, 0.2, 0.3, 0.4, 0, 0, 1, 0});
    return gradient_check({random_tensor({3, 4}, rng, -3, 3)},
                          [soft](Tape<double>&, const Leaves& v) { return cross_entropy(v[0], soft); });
  });
  return checks;
}

inline std::vector<std::string> op_check_names() {
  std::vector<std::string> names;
  for (const auto& c : op_checks()) names.push_back(c.name);
  return names;
}

}  // namespace tsattn
