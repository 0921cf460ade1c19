#pragma once

#include <array>
#include <memory>
#include <string>

#include "autodiff.hpp"
#include "ops.hpp"

namespace tsattn {

/// 1x1 squeeze convolution C -> 1 (weights C x 1 with bias) for each of the
/// temporal and spectral gates.
template <typename Scalar>
struct AttentionParams {
  Parameter<Scalar> temporal_weight;  // 1 x 1 x C x 1
  Parameter<Scalar> temporal_bias;    // 1
  Parameter<Scalar> spectral_weight;
  Parameter<Scalar> spectral_bias;

  static AttentionParams zeros(std::size_t channels, const std::string& prefix = "att") {
    return {{prefix + ".theta_t.weight", Tensor<Scalar>::zeros({1, 1, channels, 1})},
            {prefix + ".theta_t.bias", Tensor<Scalar>::zeros({1})},
            {prefix + ".theta_f.weight", Tensor<Scalar>::zeros({1, 1, channels, 1})},
            {prefix + ".theta_f.bias", Tensor<Scalar>::zeros({1})}};
  }

  std::size_t channels() const { return temporal_weight.value.dim(2); }
};

/// Per-axis sigmoid gates: v_T (one per frame) or v_F (one per band).
template <typename Scalar>
struct AxisActivations {
  Axis kind;
  Var<Scalar> values;
};

/// Coefficients of the parallel three-branch fusion. `learned` keeps raw
/// logits that are softmax-normalized on every forward pass; the fixed
/// variant carries a constant triple and no logits.
template <typename Scalar>
struct BranchCoefficients {
  bool learned = true;
  Parameter<Scalar> logits{"fuse.logits", Tensor<Scalar>::zeros({3})};
  std::array<Scalar, 3> fixed{};

  static BranchCoefficients learnable(const std::string& name = "fuse.logits") {
    BranchCoefficients c;
    c.logits = Parameter<Scalar>(name, Tensor<Scalar>::zeros({3}));
    return c;
  }

  /// Constant 0.33 per branch (the triple sums to 0.99, not 1).
  static BranchCoefficients fixed_equal() {
    BranchCoefficients c;
    c.learned = false;
    c.logits = Parameter<Scalar>{};
    c.fixed = {Scalar(0.33), Scalar(0.33), Scalar(0.33)};
    return c;
  }

  /// Current normalized (alpha, beta, gamma).
  std::array<Scalar, 3> normalized() const {
    if (!learned) return fixed;
    auto p = softmax_values<Scalar>(logits.value.values());
    return {p[0], p[1], p[2]};
  }
};

/// Softmax over exactly three logits.
template <typename Scalar>
std::array<Scalar, 3> normalize_coefficients(const std::array<Scalar, 3>& logits) {
  auto p = softmax_values<Scalar>(std::span<const Scalar>(logits));
  return {p[0], p[1], p[2]};
}

/// 1x1 convolution squeezing U (T x F x C) to a single-channel global map.
template <typename Scalar>
Var<Scalar> channel_squeeze(const Var<Scalar>& U, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const auto d = MapDims::of(U.shape(), "channel_squeeze");
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[0] != 1 || ws[1] != 1 || ws[3] != 1)
    throw ShapeError("channel_squeeze: expected 1x1xCx1 weights, got " + shape_str(ws));
  if (ws[2] != d.channels)
    throw ShapeError("channel_squeeze: weights expect " + std::to_string(ws[2]) + " channels, map has " +
                     std::to_string(d.channels));
  return conv2d(U, weight, bias, Padding::same);
}

/// Sigmoid of the single-channel map averaged along the other axis.
/// `kind == time` gives per-frame gates (pooled over frequency); `frequency`
/// gives per-band gates (pooled over time).
template <typename Scalar>
AxisActivations<Scalar> axis_attention_weights(const Var<Scalar>& V, Axis kind) {
  const Axis reduced = kind == Axis::time ? Axis::frequency : Axis::time;
  return {kind, sigmoid(global_avg_pool_axis(V, reduced))};
}

/// Broadcast multiply of U by per-frame or per-band gates across the other
/// axis and all channels.
template <typename Scalar>
Var<Scalar> rescale(const Var<Scalar>& U, const AxisActivations<Scalar>& gates) {
  const auto d = MapDims::of(U.shape(), "rescale");
  const std::size_t len = gates.kind == Axis::time ? d.time : d.freq;
  const Shape want = d.batched ? Shape{d.batch, len} : Shape{len};
  const auto& a = gates.values;
  if (a.shape() != want)
    throw ShapeError(std::string("rescale: ") + axis_name(gates.kind) + " gates " + shape_str(a.shape()) +
                     " do not match map " + shape_str(U.shape()));
  const Axis kind = gates.kind;
  const std::size_t T = d.time, F = d.freq, C = d.channels;
  auto gate_index = [=](std::size_t b, std::size_t t, std::size_t f) {
    return kind == Axis::time ? b * T + t : b * F + f;
  };
  Tensor<Scalar> out(U.shape());
  const Scalar* u = U.value().data();
  const Scalar* gv = a.value().data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const Scalar s = gv[gate_index(b, t, f)];
        const std::size_t base = ((b * T + t) * F + f) * C;
        for (std::size_t c = 0; c < C; ++c) out[base + c] = u[base + c] * s;
      }
  return U.tape().record(std::move(out), {U, a}, [U, a, d, gate_index](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    const std::size_t T = d.time, F = d.freq, C = d.channels;
    const Scalar* u = U.value().data();
    const Scalar* gv = a.value().data();
    const bool want_u = tp.wants(U), want_a = tp.wants(a);
    Scalar* gu = want_u ? tp.grad_buffer(U.id()).data() : nullptr;
    Scalar* ga = want_a ? tp.grad_buffer(a.id()).data() : nullptr;
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t gi = gate_index(b, t, f);
          const std::size_t base = ((b * T + t) * F + f) * C;
          Scalar acc{0};
          for (std::size_t c = 0; c < C; ++c) {
            if (gu) gu[base + c] += g[base + c] * gv[gi];
            acc += g[base + c] * u[base + c];
          }
          if (ga) ga[gi] += acc;
        }
  });
}

/// U_T: U gated per time frame.
template <typename Scalar>
Var<Scalar> temporal_attention(const Var<Scalar>& U, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return rescale(U, axis_attention_weights(channel_squeeze(U, weight, bias), Axis::time));
}

/// U_F: U gated per frequency band.
template <typename Scalar>
Var<Scalar> spectral_attention(const Var<Scalar>& U, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return rescale(U, axis_attention_weights(channel_squeeze(U, weight, bias), Axis::frequency));
}

/// alpha * U_T + beta * U_F + gamma * U for a length-3 coefficient vector.
/// Terms with an exactly-zero coefficient are skipped, so a one-hot triple
/// reproduces its branch bitwise.
template <typename Scalar>
Var<Scalar> weighted_branch_sum(const Var<Scalar>& UT, const Var<Scalar>& UF, const Var<Scalar>& U,
                                const Var<Scalar>& coeffs) {
  if (UT.shape() != U.shape() || UF.shape() != U.shape())
    throw ShapeError("parallel_fuse: branch shapes differ: " + shape_str(UT.shape()) + ", " +
                     shape_str(UF.shape()) + ", " + shape_str(U.shape()));
  if (coeffs.value().size() != 3) throw ShapeError("parallel_fuse: expected 3 coefficients");
  const std::array<const Tensor<Scalar>*, 3> maps{&UT.value(), &UF.value(), &U.value()};
  const auto& c = coeffs.value();
  Tensor<Scalar> out(U.shape());
  bool first = true;
  for (std::size_t k = 0; k < 3; ++k) {
    if (c[k] == Scalar{0}) continue;
    const Scalar* m = maps[k]->data();
    if (first) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = c[k] * m[i];
      first = false;
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[k] * m[i];
    }
  }
  return U.tape().record(std::move(out), {UT, UF, U, coeffs},
                         [UT, UF, U, coeffs](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           const std::array<Var<Scalar>, 3> branches{UT, UF, U};
                           const auto& c = coeffs.value();
                           for (std::size_t k = 0; k < 3; ++k) {
                             const auto& bv = branches[k];
                             if (t.wants(bv)) {
                               auto& gb = t.grad_buffer(bv.id());
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += c[k] * g[i];
                             }
                           }
                           if (t.wants(coeffs)) {
                             auto& gc = t.grad_buffer(coeffs.id());
                             for (std::size_t k = 0; k < 3; ++k) {
                               const auto& m = branches[k].value();
                               Scalar acc{0};
                               for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * m[i];
                               gc[k] += acc;
                             }
                           }
                         });
}

/// Parallel fusion with softmax-normalized learnable logits.
template <typename Scalar>
Var<Scalar> parallel_fuse(const Var<Scalar>& UT, const Var<Scalar>& UF, const Var<Scalar>& U,
                          const Var<Scalar>& logits) {
  if (logits.value().size() != 3) throw ShapeError("parallel_fuse: expected 3 logits");
  return weighted_branch_sum(UT, UF, U, softmax(logits));
}

/// Parallel temporal-spectral attention: both gates see the same U, and the
/// shortcut branch is U itself.
template <typename Scalar>
Var<Scalar> parallel_attention(const Var<Scalar>& U, AttentionParams<Scalar>& params,
                               BranchCoefficients<Scalar>& coeffs) {
  auto& tape = U.tape();
  auto UT = temporal_attention(U, tape.parameter(params.temporal_weight), tape.parameter(params.temporal_bias));
  auto UF = spectral_attention(U, tape.parameter(params.spectral_weight), tape.parameter(params.spectral_bias));
  if (coeffs.learned) return parallel_fuse(UT, UF, U, tape.parameter(coeffs.logits));
  Tensor<Scalar> c({3}, std::vector<Scalar>(coeffs.fixed.begin(), coeffs.fixed.end()));
  return weighted_branch_sum(UT, UF, U, tape.constant(std::move(c)));
}

enum class SerialOrder { temporal_first, spectral_first };

/// Serial concatenation: one attention feeds the other.
template <typename Scalar>
Var<Scalar> serial_concat(const Var<Scalar>& U, const Var<Scalar>& temporal_weight, const Var<Scalar>& temporal_bias,
                          const Var<Scalar>& spectral_weight, const Var<Scalar>& spectral_bias, SerialOrder order) {
  if (order == SerialOrder::temporal_first)
    return spectral_attention(temporal_attention(U, temporal_weight, temporal_bias), spectral_weight, spectral_bias);
  return temporal_attention(spectral_attention(U, spectral_weight, spectral_bias), temporal_weight, temporal_bias);
}

template <typename Scalar>
Var<Scalar> serial_concat(const Var<Scalar>& U, AttentionParams<Scalar>& params, SerialOrder order) {
  auto& tape = U.tape();
  return serial_concat(U, tape.parameter(params.temporal_weight), tape.parameter(params.temporal_bias),
                       tape.parameter(params.spectral_weight), tape.parameter(params.spectral_bias), order);
}

}  // namespace tsattn
