#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace tsattn {

enum class Padding { same, valid };
enum class Axis { time, frequency };
enum class Mode { train, eval };

inline const char* axis_name(Axis a) { return a == Axis::time ? "time" : "frequency"; }

namespace detail {

template <typename Scalar>
void add_into(Tensor<Scalar>& dst, const Tensor<Scalar>& src) {
  auto* d = dst.data();
  const auto* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  Scalar y;
  if (x >= Scalar{0}) {
    y = Scalar{1} / (Scalar{1} + std::exp(-x));
  } else {
    const Scalar z = std::exp(x);
    y = z / (Scalar{1} + z);
  }
  // Keep the gate strictly inside (0,1) even where exp saturates.
  constexpr Scalar lo = std::numeric_limits<Scalar>::min();
  constexpr Scalar hi = Scalar{1} - std::numeric_limits<Scalar>::epsilon() / 2;
  return std::clamp(y, lo, hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Scalar> out = a.value();
  detail::add_into(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.wants(a)) detail::add_into(t.grad_buffer(a.id()), g);
    if (t.wants(b)) detail::add_into(t.grad_buffer(b.id()), g);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Scalar> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.wants(a)) {
      auto& ga = t.grad_buffer(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants(b)) {
      auto& gb = t.grad_buffer(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar k) {
  Tensor<Scalar> out = a.value();
  for (auto& v : out.storage()) v *= k;
  return a.tape().record(std::move(out), {a}, [a, k](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& ga = t.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Scalar s{0};
  for (auto v : a.value().values()) s += v;
  return a.tape().record(Tensor<Scalar>::scalar(s), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& ga = t.grad_buffer(a.id());
    for (auto& v : ga.storage()) v += g[0];
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.storage()) v = v > Scalar{0} ? v : Scalar{0};
  return x.tape().record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = x.value();
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > Scalar{0}) gx[i] += g[i];
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.storage()) v = detail::sigmoid(v);
  // The backward pass reads the output back from its recorded slot.
  auto holder = std::make_shared<std::size_t>(0);
  auto y = x.tape().record(std::move(out), {x}, [x, holder](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& yv = t.value(*holder);
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (Scalar{1} - yv[i]);
  });
  *holder = y.id();
  return y;
}

/// Numerically stable softmax of a plain vector.
template <typename Scalar>
std::vector<Scalar> softmax_values(std::span<const Scalar> logits) {
  if (logits.empty()) throw ValidationError("softmax: empty input");
  const Scalar m = *std::max_element(logits.begin(), logits.end());
  std::vector<Scalar> out(logits.size());
  Scalar z{0};
  for (std::size_t i = 0; i < logits.size(); ++i) z += (out[i] = std::exp(logits[i] - m));
  for (auto& v : out) v /= z;
  return out;
}

/// Softmax over a rank-1 tensor.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  if (x.value().rank() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(x.shape()));
  auto probs = softmax_values<Scalar>(x.value().values());
  auto holder = std::make_shared<std::size_t>(0);
  auto y = x.tape().record(Tensor<Scalar>(x.shape(), std::move(probs)), {x},
                           [x, holder](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                             const auto& yv = t.value(*holder);
                             Scalar dot{0};
                             for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * yv[i];
                             auto& gx = t.grad_buffer(x.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += yv[i] * (g[i] - dot);
                           });
  *holder = y.id();
  return y;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 2-D convolution, stride 1, channels-last. `kernel` is kh x kw x C_in x C_out.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   Padding padding = Padding::same) {
  const auto d = MapDims::of(input.shape(), "conv2d");
  const auto& ks = kernel.shape();
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be rank 4, got " + shape_str(ks));
  const std::size_t kh = ks[0], kw = ks[1], cin = ks[2], cout = ks[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel spatial dims must be odd");
  if (cin != d.channels)
    throw ShapeError("conv2d: input has " + std::to_string(d.channels) + " channels, kernel expects " +
                     std::to_string(cin));
  if (bias.value().size() != cout) throw ShapeError("conv2d: bias length must equal C_out");
  const std::size_t ph = padding == Padding::same ? kh / 2 : 0;
  const std::size_t pw = padding == Padding::same ? kw / 2 : 0;
  if (padding == Padding::valid && (d.time < kh || d.freq < kw))
    throw ShapeError("conv2d: input smaller than kernel under valid padding");
  const std::size_t T = d.time, F = d.freq;
  const std::size_t To = T + 2 * ph - kh + 1, Fo = F + 2 * pw - kw + 1;

  Tensor<Scalar> out(d.with(To, Fo, cout));
  const Scalar* x = input.value().data();
  const Scalar* w = kernel.value().data();
  const Scalar* bv = bias.value().data();
  Scalar* y = out.data();

  parallel_for(d.batch * To, [&](std::size_t row) {
    const std::size_t b = row / To, t = row % To;
    for (std::size_t f = 0; f < Fo; ++f) {
      Scalar* o = y + ((b * To + t) * Fo + f) * cout;
      std::copy(bv, bv + cout, o);
      for (std::size_t dt = 0; dt < kh; ++dt) {
        const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + dt) - static_cast<std::ptrdiff_t>(ph);
        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
        for (std::size_t df = 0; df < kw; ++df) {
          const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(f + df) - static_cast<std::ptrdiff_t>(pw);
          if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(F)) continue;
          const Scalar* xr = x + ((b * T + ti) * F + fi) * cin;
          const Scalar* wr = w + (dt * kw + df) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const Scalar xv = xr[ci];
            const Scalar* wc = wr + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += xv * wc[co];
          }
        }
      }
    }
  });

  return input.tape().record(
      std::move(out), {input, kernel, bias},
      [input, kernel, bias, d, kh, kw, cin, cout, ph, pw, To, Fo](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const std::size_t T = d.time, F = d.freq;
        const Scalar* x = input.value().data();
        const Scalar* w = kernel.value().data();
        const Scalar* gy = g.data();
        if (t.wants(bias)) {
          Scalar* gb = t.grad_buffer(bias.id()).data();
          for (std::size_t p = 0; p < d.batch * To * Fo; ++p)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += gy[p * cout + co];
        }
        if (t.wants(kernel)) {
          Scalar* gw = t.grad_buffer(kernel.id()).data();
          parallel_for(kh * kw, [&](std::size_t tap) {
            const std::size_t dt = tap / kw, df = tap % kw;
            Scalar* gwt = gw + tap * cin * cout;
            for (std::size_t b = 0; b < d.batch; ++b)
              for (std::size_t to = 0; to < To; ++to) {
                const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to + dt) - static_cast<std::ptrdiff_t>(ph);
                if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                for (std::size_t fo = 0; fo < Fo; ++fo) {
                  const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo + df) - static_cast<std::ptrdiff_t>(pw);
                  if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(F)) continue;
                  const Scalar* xr = x + ((b * T + ti) * F + fi) * cin;
                  const Scalar* gr = gy + ((b * To + to) * Fo + fo) * cout;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const Scalar xv = xr[ci];
                    Scalar* gwc = gwt + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) gwc[co] += xv * gr[co];
                  }
                }
              }
          });
        }
        if (t.wants(input)) {
          // Transposed taps (C_out x C_in) keep the inner loop contiguous over C_in.
          std::vector<Scalar> wt(kh * kw * cout * cin);
          for (std::size_t tap = 0; tap < kh * kw; ++tap)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co)
                wt[(tap * cout + co) * cin + ci] = w[(tap * cin + ci) * cout + co];
          Scalar* gx = t.grad_buffer(input.id()).data();
          parallel_for(d.batch * T, [&](std::size_t row) {
            const std::size_t b = row / T, ti = row % T;
            for (std::size_t fi = 0; fi < F; ++fi) {
              Scalar* gxr = gx + ((b * T + ti) * F + fi) * cin;
              for (std::size_t dt = 0; dt < kh; ++dt) {
                const std::ptrdiff_t to = static_cast<std::ptrdiff_t>(ti + ph) - static_cast<std::ptrdiff_t>(dt);
                if (to < 0 || to >= static_cast<std::ptrdiff_t>(To)) continue;
                for (std::size_t df = 0; df < kw; ++df) {
                  const std::ptrdiff_t fo = static_cast<std::ptrdiff_t>(fi + pw) - static_cast<std::ptrdiff_t>(df);
                  if (fo < 0 || fo >= static_cast<std::ptrdiff_t>(Fo)) continue;
                  const Scalar* gr = gy + ((b * To + to) * Fo + fo) * cout;
                  const Scalar* wtap = wt.data() + (dt * kw + df) * cout * cin;
                  for (std::size_t co = 0; co < cout; ++co) {
                    const Scalar gv = gr[co];
                    const Scalar* wr = wtap + co * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) gxr[ci] += gv * wr[ci];
                  }
                }
              }
            }
          });
        }
      });
}

/// 2x2 average pooling, stride 2; a trailing odd row/column is dropped.
template <typename Scalar>
Var<Scalar> avg_pool2d(const Var<Scalar>& input) {
  const auto d = MapDims::of(input.shape(), "avg_pool2d");
  if (d.time < 2 || d.freq < 2) throw ShapeError("avg_pool2d: T and F must be >= 2, got " + shape_str(input.shape()));
  const std::size_t To = d.time / 2, Fo = d.freq / 2, C = d.channels, T = d.time, F = d.freq;
  Tensor<Scalar> out(d.with(To, Fo, C));
  const Scalar* x = input.value().data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t f = 0; f < Fo; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          auto at = [&](std::size_t tt, std::size_t ff) { return x[((b * T + tt) * F + ff) * C + c]; };
          out[((b * To + t) * Fo + f) * C + c] =
              (at(2 * t, 2 * f) + at(2 * t, 2 * f + 1) + at(2 * t + 1, 2 * f) + at(2 * t + 1, 2 * f + 1)) /
              Scalar{4};
        }
  return input.tape().record(std::move(out), {input}, [input, d, To, Fo](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const std::size_t C = d.channels, T = d.time, F = d.freq;
    auto& gx = t.grad_buffer(input.id());
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t to = 0; to < To; ++to)
        for (std::size_t fo = 0; fo < Fo; ++fo)
          for (std::size_t c = 0; c < C; ++c) {
            const Scalar q = g[((b * To + to) * Fo + fo) * C + c] / Scalar{4};
            for (std::size_t i = 0; i < 2; ++i)
              for (std::size_t j = 0; j < 2; ++j) gx[((b * T + 2 * to + i) * F + 2 * fo + j) * C + c] += q;
          }
  });
}

/// Mean of a single-channel map over one axis. Reducing `frequency` leaves a
/// per-frame vector of length T; reducing `time` leaves a per-band vector of
/// length F. Output is (B,len) for batched input, (len) otherwise.
template <typename Scalar>
Var<Scalar> global_avg_pool_axis(const Var<Scalar>& input, Axis reduced) {
  const auto d = MapDims::of(input.shape(), "global_avg_pool_axis");
  if (d.channels != 1)
    throw ShapeError("global_avg_pool_axis: expected a single-channel map, got " + shape_str(input.shape()));
  const std::size_t T = d.time, F = d.freq;
  const std::size_t len = reduced == Axis::frequency ? T : F;
  Tensor<Scalar> out(d.batched ? Shape{d.batch, len} : Shape{len});
  const Scalar* x = input.value().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    if (reduced == Axis::frequency) {
      for (std::size_t t = 0; t < T; ++t) {
        Scalar s{0};
        for (std::size_t f = 0; f < F; ++f) s += x[(b * T + t) * F + f];
        out[b * T + t] = s / static_cast<Scalar>(F);
      }
    } else {
      for (std::size_t f = 0; f < F; ++f) {
        Scalar s{0};
        for (std::size_t t = 0; t < T; ++t) s += x[(b * T + t) * F + f];
        out[b * F + f] = s / static_cast<Scalar>(T);
      }
    }
  }
  return input.tape().record(std::move(out), {input}, [input, d, reduced](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const std::size_t T = d.time, F = d.freq;
    auto& gx = t.grad_buffer(input.id());
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t tt = 0; tt < T; ++tt)
        for (std::size_t f = 0; f < F; ++f)
          gx[(b * T + tt) * F + f] += reduced == Axis::frequency ? g[b * T + tt] / static_cast<Scalar>(F)
                                                                 : g[b * F + f] / static_cast<Scalar>(T);
  });
}

/// Mean over every spatial position per channel: (B,T,F,C) -> (B,C), (T,F,C) -> (C).
template <typename Scalar>
Var<Scalar> global_mean_pool(const Var<Scalar>& input) {
  const auto d = MapDims::of(input.shape(), "global_mean_pool");
  const std::size_t P = d.time * d.freq, C = d.channels;
  Tensor<Scalar> out(d.batched ? Shape{d.batch, C} : Shape{C});
  const Scalar* x = input.value().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    Scalar* o = out.data() + b * C;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < C; ++c) o[c] += x[(b * P + p) * C + c];
    for (std::size_t c = 0; c < C; ++c) o[c] /= static_cast<Scalar>(P);
  }
  return input.tape().record(std::move(out), {input}, [input, d, P, C](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& gx = t.grad_buffer(input.id());
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = 0; c < C; ++c) gx[(b * P + p) * C + c] += g[b * C + c] / static_cast<Scalar>(P);
  });
}

// ---------------------------------------------------------------------------
// Normalization and dense layers

template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;

  explicit BatchNormStats(std::size_t channels = 1)
      : mean(Tensor<Scalar>::zeros({channels})), var(Tensor<Scalar>::full({channels}, Scalar{1})) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel batch normalization over batch x T x F. Train mode normalizes
/// with batch statistics and folds them into `running`; eval mode uses `running`.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormStats<Scalar>& running, Mode mode) {
  const auto d = MapDims::of(input.shape(), "batch_norm");
  const std::size_t C = d.channels, N = d.batch * d.time * d.freq;
  if (gamma.value().size() != C || beta.value().size() != C)
    throw ShapeError("batch_norm: gamma/beta length must equal channel count " + std::to_string(C));
  if (running.mean.size() != C) throw ShapeError("batch_norm: running stats channel mismatch");
  if (N == 0) throw ShapeError("batch_norm: empty batch");
  const Scalar eps = static_cast<Scalar>(kBatchNormEpsilon);
  const Scalar* x = input.value().data();
  const Scalar* gm = gamma.value().data();
  const Scalar* bt = beta.value().data();

  std::vector<Scalar> mean(C, Scalar{0}), var(C, Scalar{0});
  if (mode == Mode::train) {
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t c = 0; c < C; ++c) mean[c] += x[p * C + c];
    for (auto& m : mean) m /= static_cast<Scalar>(N);
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t c = 0; c < C; ++c) {
        const Scalar dv = x[p * C + c] - mean[c];
        var[c] += dv * dv;
      }
    for (auto& v : var) v /= static_cast<Scalar>(N);
    const Scalar mom = static_cast<Scalar>(kBatchNormMomentum);
    for (std::size_t c = 0; c < C; ++c) {
      running.mean[c] = mom * running.mean[c] + (Scalar{1} - mom) * mean[c];
      running.var[c] = mom * running.var[c] + (Scalar{1} - mom) * var[c];
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running.mean[c];
      var[c] = running.var[c];
    }
  }
  std::vector<Scalar> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = Scalar{1} / std::sqrt(var[c] + eps);

  Tensor<Scalar> out(input.shape());
  auto xhat = std::make_shared<std::vector<Scalar>>(input.value().size());
  for (std::size_t p = 0; p < N; ++p)
    for (std::size_t c = 0; c < C; ++c) {
      const Scalar h = (x[p * C + c] - mean[c]) * inv_std[c];
      (*xhat)[p * C + c] = h;
      out[p * C + c] = h * gm[c] + bt[c];
    }

  return input.tape().record(
      std::move(out), {input, gamma, beta},
      [input, gamma, beta, xhat, inv_std, mode, N, C](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& h = *xhat;
        std::vector<Scalar> gsum(C, Scalar{0}), ghsum(C, Scalar{0});
        for (std::size_t p = 0; p < N; ++p)
          for (std::size_t c = 0; c < C; ++c) {
            gsum[c] += g[p * C + c];
            ghsum[c] += g[p * C + c] * h[p * C + c];
          }
        if (t.wants(gamma)) {
          auto& gg = t.grad_buffer(gamma.id());
          for (std::size_t c = 0; c < C; ++c) gg[c] += ghsum[c];
        }
        if (t.wants(beta)) {
          auto& gb = t.grad_buffer(beta.id());
          for (std::size_t c = 0; c < C; ++c) gb[c] += gsum[c];
        }
        if (t.wants(input)) {
          const Scalar* gm = gamma.value().data();
          auto& gx = t.grad_buffer(input.id());
          const Scalar n = static_cast<Scalar>(N);
          for (std::size_t p = 0; p < N; ++p)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = p * C + c;
              if (mode == Mode::train)
                gx[i] += gm[c] * inv_std[c] * (g[i] - gsum[c] / n - h[i] * ghsum[c] / n);
              else
                gx[i] += gm[c] * inv_std[c] * g[i];
            }
        }
      });
}

/// y = W x + b with W of shape (out, in). Input is (in) or (B, in).
template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& input, const Var<Scalar>& weights, const Var<Scalar>& bias) {
  const auto& xs = input.shape();
  const auto& ws = weights.shape();
  if (ws.size() != 2) throw ShapeError("dense: weights must be a matrix, got " + shape_str(ws));
  const std::size_t out_dim = ws[0], in_dim = ws[1];
  std::size_t B;
  if (xs.size() == 1 && xs[0] == in_dim)
    B = 1;
  else if (xs.size() == 2 && xs[1] == in_dim)
    B = xs[0];
  else
    throw ShapeError("dense: input " + shape_str(xs) + " does not match weights " + shape_str(ws));
  if (bias.value().size() != out_dim) throw ShapeError("dense: bias length must equal output dim");
  Tensor<Scalar> out(xs.size() == 1 ? Shape{out_dim} : Shape{B, out_dim});
  const Scalar* x = input.value().data();
  const Scalar* w = weights.value().data();
  const Scalar* bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out_dim; ++o) {
      Scalar s = bv[o];
      for (std::size_t i = 0; i < in_dim; ++i) s += w[o * in_dim + i] * x[b * in_dim + i];
      out[b * out_dim + o] = s;
    }
  return input.tape().record(
      std::move(out), {input, weights, bias},
      [input, weights, bias, B, in_dim, out_dim](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const Scalar* x = input.value().data();
        const Scalar* w = weights.value().data();
        if (t.wants(bias)) {
          auto& gb = t.grad_buffer(bias.id());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[b * out_dim + o];
        }
        if (t.wants(weights)) {
          auto& gw = t.grad_buffer(weights.id());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const Scalar gv = g[b * out_dim + o];
              for (std::size_t i = 0; i < in_dim; ++i) gw[o * in_dim + i] += gv * x[b * in_dim + i];
            }
        }
        if (t.wants(input)) {
          auto& gx = t.grad_buffer(input.id());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const Scalar gv = g[b * out_dim + o];
              for (std::size_t i = 0; i < in_dim; ++i) gx[b * in_dim + i] += gv * w[o * in_dim + i];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over the batch of -sum_k t_k log softmax(logits)_k. Targets may be soft.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const Tensor<Scalar>& targets) {
  const auto& ls = logits.shape();
  if (ls.size() != 2) throw ShapeError("cross_entropy: logits must be (batch, classes), got " + shape_str(ls));
  if (targets.shape() != ls)
    throw ShapeError("cross_entropy: targets " + shape_str(targets.shape()) + " vs logits " + shape_str(ls));
  const std::size_t B = ls[0], K = ls[1];
  for (std::size_t b = 0; b < B; ++b) {
    double row = 0;
    for (std::size_t k = 0; k < K; ++k) row += targets[b * K + k];
    if (std::abs(row - 1.0) > 1e-4) throw ValidationError("cross_entropy: target rows must sum to 1");
  }
  auto probs = std::make_shared<std::vector<Scalar>>(B * K);
  Scalar loss{0};
  const Scalar* l = logits.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    const Scalar* row = l + b * K;
    const Scalar m = *std::max_element(row, row + K);
    Scalar z{0};
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
    const Scalar lz = std::log(z);
    for (std::size_t k = 0; k < K; ++k) {
      const Scalar logp = row[k] - m - lz;
      (*probs)[b * K + k] = std::exp(logp);
      loss -= targets[b * K + k] * logp;
    }
  }
  loss /= static_cast<Scalar>(B);
  return logits.tape().record(Tensor<Scalar>::scalar(loss), {logits},
                              [logits, targets, probs, B, K](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                auto& gl = t.grad_buffer(logits.id());
                                const Scalar s = g[0] / static_cast<Scalar>(B);
                                for (std::size_t b = 0; b < B; ++b) {
                                  Scalar tsum{0};
                                  for (std::size_t k = 0; k < K; ++k) tsum += targets[b * K + k];
                                  for (std::size_t k = 0; k < K; ++k)
                                    gl[b * K + k] += s * ((*probs)[b * K + k] * tsum - targets[b * K + k]);
                                }
                              });
}

}  // namespace tsattn
