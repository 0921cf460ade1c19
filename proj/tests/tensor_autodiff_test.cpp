#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tsattn/gradcheck.hpp"
#include "tsattn/ops.hpp"

using namespace tsattn;

namespace {

constexpr double kGradTol = 1e-4;

Tensor<double> tensor(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

// Quadruple-loop direct convolution, zero padding, stride 1.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b, bool same) {
  const int T = x.dim(0), F = x.dim(1), C = x.dim(2);
  const int kh = k.dim(0), kw = k.dim(1), Co = k.dim(3);
  const int ph = same ? kh / 2 : 0, pw = same ? kw / 2 : 0;
  const int To = T + 2 * ph - kh + 1, Fo = F + 2 * pw - kw + 1;
  Tensor<double> y({std::size_t(To), std::size_t(Fo), std::size_t(Co)});
  for (int t = 0; t < To; ++t)
    for (int f = 0; f < Fo; ++f)
      for (int o = 0; o < Co; ++o) {
        double s = b[o];
        for (int i = 0; i < kh; ++i)
          for (int j = 0; j < kw; ++j)
            for (int c = 0; c < C; ++c) {
              const int ti = t + i - ph, fi = f + j - pw;
              if (ti < 0 || ti >= T || fi < 0 || fi >= F) continue;
              s += x.at({std::size_t(ti), std::size_t(fi), std::size_t(c)}) *
                   k.at({std::size_t(i), std::size_t(j), std::size_t(c), std::size_t(o)});
            }
        y.at({std::size_t(t), std::size_t(f), std::size_t(o)}) = s;
      }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Conv2d, OneByOneScales) {
  Tape<double> tape;
  auto x = tape.constant(tensor({2, 2, 1}, {1, 2, 3, 4}));
  auto k = tape.constant(tensor({1, 1, 1, 1}, {2}));
  auto b = tape.constant(tensor({1}, {0}));
  auto y = conv2d(x, k, b);
  EXPECT_EQ(y.value(), tensor({2, 2, 1}, {2, 4, 6, 8}));
}

TEST(Conv2d, SamePaddingCountsOverlap) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::full({3, 3, 1}, 1.0));
  auto k = tape.constant(Tensor<double>::full({3, 3, 1, 1}, 1.0));
  auto b = tape.constant(tensor({1}, {0}));
  auto y = conv2d(x, k, b, Padding::same).value();
  EXPECT_EQ(y.at({1, 1, 0}), 9.0);
  EXPECT_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({2, 2, 0}), 4.0);
  EXPECT_EQ(y.at({0, 1, 0}), 6.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({5, 4, 2}, rng);
  auto k = random_tensor({3, 3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  for (bool same : {true, false}) {
    Tape<double> tape;
    auto y = conv2d(tape.constant(x), tape.constant(k), tape.constant(b), same ? Padding::same : Padding::valid);
    EXPECT_LT(max_abs_diff(y.value(), conv_oracle(x, k, b, same)), 1e-6);
  }
}

TEST(Conv2d, SamePaddingPreservesSpatialDimsForOddKernels) {
  std::mt19937_64 rng(3);
  for (std::size_t kh : {1u, 3u, 5u})
    for (std::size_t kw : {1u, 3u}) {
      Tape<float> tape;
      auto x = tape.constant(Tensor<float>({2, 7, 6, 2}));
      auto k = tape.constant(Tensor<float>({kh, kw, 2, 4}));
      auto b = tape.constant(Tensor<float>({4}));
      EXPECT_EQ(conv2d(x, k, b).shape(), (Shape{2, 7, 6, 4}));
    }
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3, 3, 2}));
  auto k = tape.constant(Tensor<double>({3, 3, 3, 1}));
  auto b = tape.constant(Tensor<double>({1}));
  EXPECT_THROW(conv2d(x, k, b), ShapeError);
  auto even = tape.constant(Tensor<double>({2, 2, 2, 1}));
  EXPECT_THROW(conv2d(x, even, b), ShapeError);
}

TEST(AvgPool, MeanOfWindow) {
  Tape<double> tape;
  auto y = avg_pool2d(tape.constant(tensor({2, 2, 1}, {1, 2, 3, 4})));
  EXPECT_EQ(y.value(), tensor({1, 1, 1}, {2.5}));
}

TEST(AvgPool, ConstantStaysConstant) {
  Tape<double> tape;
  auto y = avg_pool2d(tape.constant(Tensor<double>::full({6, 4, 3}, 1.75))).value();
  EXPECT_EQ(y.shape(), (Shape{3, 2, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 1.75);
}

TEST(AvgPool, OddInputMatchesWindowedMean) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({5, 5, 1}, rng);
  Tape<double> tape;
  auto y = avg_pool2d(tape.constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{2, 2, 1}));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t f = 0; f < 2; ++f) {
      double s = 0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) s += x.at({2 * t + i, 2 * f + j, 0});
      EXPECT_NEAR(y.at({t, f, 0}), s / 4, 1e-15);
    }
}

TEST(AvgPool, RejectsTinyOrWrongRank) {
  Tape<double> tape;
  EXPECT_THROW(avg_pool2d(tape.constant(Tensor<double>({1, 4, 1}))), ShapeError);
  EXPECT_THROW(avg_pool2d(tape.constant(Tensor<double>({4, 4}))), ShapeError);
}

TEST(GlobalAvgPoolAxis, RowAndColumnMeans) {
  Tape<double> tape;
  auto x = tape.constant(tensor({2, 3, 1}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(global_avg_pool_axis(x, Axis::frequency).value(), tensor({2}, {2, 5}));
  EXPECT_EQ(global_avg_pool_axis(x, Axis::time).value(), tensor({3}, {2.5, 3.5, 4.5}));
  auto c = tape.constant(Tensor<double>::full({4, 3, 1}, -0.5));
  for (double v : global_avg_pool_axis(c, Axis::time).value().values()) EXPECT_EQ(v, -0.5);
  for (double v : global_avg_pool_axis(c, Axis::frequency).value().values()) EXPECT_EQ(v, -0.5);
  EXPECT_THROW(global_avg_pool_axis(tape.constant(Tensor<double>({2, 3, 2})), Axis::time), ShapeError);
}

TEST(Activations, Definitions) {
  Tape<double> tape;
  EXPECT_EQ(sigmoid(tape.constant(tensor({1}, {0.0}))).value()[0], 0.5);
  auto r = relu(tape.constant(tensor({2}, {-3, 3}))).value();
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 3.0);
}

TEST(Activations, SigmoidSymmetryAndStrictBounds) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> dist(-50, 50);
  for (int i = 0; i < 1000; ++i) {
    const double x = dist(rng);
    EXPECT_NEAR(detail::sigmoid(x) + detail::sigmoid(-x), 1.0, 1e-12);
  }
  for (double x : {-1e6, -745.0, -100.0, 40.0, 100.0, 1e6}) {
    EXPECT_GT(detail::sigmoid(x), 0.0);
    EXPECT_LT(detail::sigmoid(x), 1.0);
    EXPECT_GT(detail::sigmoid(static_cast<float>(x)), 0.0f);
    EXPECT_LT(detail::sigmoid(static_cast<float>(x)), 1.0f);
  }
}

TEST(Softmax, ClosedForms) {
  auto eq = softmax_values<double>(std::vector<double>{0, 0, 0});
  for (double v : eq) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const double e = std::exp(1.0);
  auto p = softmax_values<double>(std::vector<double>{1, 0, 0});
  EXPECT_NEAR(p[0], e / (e + 2), 1e-15);
  EXPECT_NEAR(p[1], 1 / (e + 2), 1e-15);
  EXPECT_NEAR(p[0], 0.5761, 1e-4);
  EXPECT_NEAR(p[1], 0.2119, 1e-4);
  auto big = softmax_values<double>(std::vector<double>{1000, 1000, 1000});
  for (double v : big) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_THROW(softmax_values<double>(std::vector<double>{}), ValidationError);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> dist(-20, 20);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> l(1 + trial % 7);
    for (auto& v : l) v = dist(rng);
    auto p = softmax_values<double>(l);
    double s = 0;
    for (double v : p) {
      s += v;
      EXPECT_GT(v, 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    const double c = dist(rng);
    for (auto& v : l) v += c;
    auto q = softmax_values<double>(l);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(BatchNorm, ConstantInputNormalizesToZero) {
  Tape<double> tape;
  BatchNormStats<double> stats(2);
  auto x = tape.constant(Tensor<double>::full({3, 4, 5, 2}, 7.0));
  auto y = batch_norm(x, tape.constant(Tensor<double>::full({2}, 1.0)), tape.constant(Tensor<double>({2})), stats,
                      Mode::train);
  for (double v : y.value().values()) EXPECT_LT(std::abs(v), 1e-3);
}

TEST(BatchNorm, TrainModeStandardizesPerChannel) {
  std::mt19937_64 rng(2);
  auto xt = random_tensor({4, 3, 5, 3}, rng, -3, 5);
  Tape<double> tape;
  BatchNormStats<double> stats(3);
  auto y = batch_norm(tape.constant(xt), tape.constant(Tensor<double>::full({3}, 1.0)),
                      tape.constant(Tensor<double>({3})), stats, Mode::train)
               .value();
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const std::size_t n = y.size() / 3;
    for (std::size_t p = 0; p < n; ++p) m += y[p * 3 + c];
    m /= n;
    for (std::size_t p = 0; p < n; ++p) v += (y[p * 3 + c] - m) * (y[p * 3 + c] - m);
    v /= n;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-3);  // epsilon 1e-5 shrinks the variance slightly
    // running stats moved 10% of the way toward the batch statistics
    EXPECT_NE(stats.mean[c], 0.0);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  Tape<double> tape;
  BatchNormStats<double> stats(1);
  stats.mean[0] = 2.0;
  stats.var[0] = 4.0;
  auto y = batch_norm(tape.constant(tensor({1, 1, 1}, {5.0})), tape.constant(tensor({1}, {3.0})),
                      tape.constant(tensor({1}, {0.5})), stats, Mode::eval);
  EXPECT_NEAR(y.value()[0], (5.0 - 2.0) / std::sqrt(4.0 + 1e-5) * 3.0 + 0.5, 1e-12);
  EXPECT_EQ(stats.mean[0], 2.0);
  EXPECT_THROW(batch_norm(tape.constant(Tensor<double>({2, 2, 2})), tape.constant(Tensor<double>({1})),
                          tape.constant(Tensor<double>({1})), stats, Mode::eval),
               ShapeError);
}

TEST(Dense, Arithmetic) {
  Tape<double> tape;
  auto y = dense(tape.constant(tensor({2}, {2, 3})), tape.constant(tensor({1, 2}, {1, 1})),
                 tape.constant(tensor({1}, {1})));
  EXPECT_EQ(y.value()[0], 6.0);
  auto x = tensor({3}, {0.5, -1, 4});
  auto id = dense(tape.constant(x), tape.constant(tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})),
                  tape.constant(Tensor<double>({3})));
  EXPECT_EQ(id.value(), x);
  EXPECT_THROW(dense(tape.constant(x), tape.constant(Tensor<double>({2, 2})), tape.constant(Tensor<double>({2}))),
               ShapeError);
}

TEST(Dense, MatchesDotProductLoop) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({16}, rng);
  auto w = random_tensor({8, 16}, rng);
  auto b = random_tensor({8}, rng);
  Tape<double> tape;
  auto y = dense(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  for (std::size_t o = 0; o < 8; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < 16; ++i) s += w.at({o, i}) * x[i];
    EXPECT_NEAR(y[o], s, 1e-6);
  }
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = tape.leaf(random_tensor({2, 3, 4}, rng));
  tape.backward(sum(x));
  const auto g = x.grad();
  for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto xt = random_tensor({3, 5}, rng);
  auto x = tape.leaf(xt);
  tape.backward(scale(sum(mul(x, x)), 0.5));
  auto g = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], xt[i], 1e-15);
}

TEST(Backward, NonScalarLossAndUnreachableParameters) {
  Tape<double> tape;
  Parameter<double> unused("unused", Tensor<double>::full({3}, 2.0));
  Parameter<double> used("used", Tensor<double>::full({2}, 1.0));
  tape.parameter(unused);
  auto u = tape.parameter(used);
  EXPECT_THROW(tape.backward(u), ShapeError);
  Tape<double> tape2;
  tape2.parameter(unused);
  auto u2 = tape2.parameter(used);
  tape2.backward(sum(u2));
  for (double g : unused.grad.values()) EXPECT_EQ(g, 0.0);
  for (double g : used.grad.values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonFiniteForwardIsAnError) {
  Tape<double> tape;
  auto x = tape.leaf(tensor({1}, {1e300}));
  EXPECT_THROW(mul(x, x), NumericError);
}

// Finite-difference gradient checks at 64-bit precision.

TEST(GradCheck, Conv2d) {
  std::mt19937_64 rng(100);
  for (auto pad : {Padding::same, Padding::valid}) {
    auto r = gradient_check({random_tensor({2, 5, 4, 2}, rng), random_tensor({3, 3, 2, 3}, rng),
                             random_tensor({3}, rng)},
                            [pad](Tape<double>&, const std::vector<Var<double>>& v) {
                              return conv2d(v[0], v[1], v[2], pad);
                            });
    EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  }
}

TEST(GradCheck, AvgPool) {
  std::mt19937_64 rng(101);
  auto r = gradient_check({random_tensor({2, 5, 6, 2}, rng)},
                          [](Tape<double>&, const std::vector<Var<double>>& v) { return avg_pool2d(v[0]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(GradCheck, GlobalPools) {
  std::mt19937_64 rng(102);
  for (auto axis : {Axis::time, Axis::frequency}) {
    auto r = gradient_check({random_tensor({2, 4, 5, 1}, rng)},
                            [axis](Tape<double>&, const std::vector<Var<double>>& v) {
                              return global_avg_pool_axis(v[0], axis);
                            });
    EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  }
  auto r = gradient_check({random_tensor({2, 3, 4, 3}, rng)},
                          [](Tape<double>&, const std::vector<Var<double>>& v) { return global_mean_pool(v[0]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(GradCheck, Activations) {
  std::mt19937_64 rng(103);
  auto r = gradient_check({random_tensor_away_from_zero({3, 4, 2}, rng)},
                          [](Tape<double>&, const std::vector<Var<double>>& v) { return relu(v[0]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  r = gradient_check({random_tensor({3, 4, 2}, rng, -4, 4)},
                     [](Tape<double>&, const std::vector<Var<double>>& v) { return sigmoid(v[0]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  r = gradient_check({random_tensor({5}, rng, -2, 2)},
                     [](Tape<double>&, const std::vector<Var<double>>& v) { return softmax(v[0]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(GradCheck, BatchNorm) {
  std::mt19937_64 rng(104);
  for (auto mode : {Mode::train, Mode::eval}) {
    BatchNormStats<double> stats(3);
    stats.mean[1] = 0.3;
    stats.var[2] = 2.0;
    auto r = gradient_check(
        {random_tensor({2, 3, 4, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
        [&stats, mode](Tape<double>&, const std::vector<Var<double>>& v) {
          return batch_norm(v[0], v[1], v[2], stats, mode);
        });
    EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  }
}

TEST(GradCheck, Dense) {
  std::mt19937_64 rng(105);
  auto r = gradient_check({random_tensor({3, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4}, rng)},
                          [](Tape<double>&, const std::vector<Var<double>>& v) { return dense(v[0], v[1], v[2]); });
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Determinism, RepeatedOpsAreBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tape<float> tape;
    Tensor<float> x = random_tensor({2, 6, 5, 3}, rng).cast<float>();
    Tensor<float> k = random_tensor({3, 3, 3, 4}, rng).cast<float>();
    BatchNormStats<float> stats(4);
    auto kv = tape.leaf(k);
    auto y = conv2d(tape.leaf(x), kv, tape.leaf(Tensor<float>({4})));
    y = batch_norm(y, tape.leaf(Tensor<float>::full({4}, 1.f)), tape.leaf(Tensor<float>({4})), stats, Mode::train);
    auto loss = sum(relu(y));
    tape.backward(loss);
    return std::make_pair(y.value(), kv.grad());
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Determinism, ThreadedConvMatchesSequential) {
  std::mt19937_64 rng(78);
  auto x = random_tensor({3, 7, 6, 4}, rng);
  auto k = random_tensor({3, 3, 4, 5}, rng);
  auto run = [&](unsigned threads) {
    set_thread_count(threads);
    Tape<double> tape;
    auto xv = tape.leaf(x);
    auto kv = tape.leaf(k);
    auto y = conv2d(xv, kv, tape.leaf(Tensor<double>({5})));
    tape.backward(sum(mul(y, y)));
    set_thread_count(1);
    return std::make_tuple(y.value(), xv.grad(), kv.grad());
  };
  EXPECT_EQ(run(1), run(3));
}
