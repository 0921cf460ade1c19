#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "tsattn/gradcheck.hpp"
#include "tsattn/model.hpp"

using namespace tsattn;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  return fs::temp_directory_path() / (std::string("tsattn_model_") + info->name() + "_" + name);
}

Tensor<float> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

std::set<int> attention_sites(const Model<float>& m, AttentionVariant want) {
  std::set<int> out;
  for (std::size_t i = 0; i < m.blocks().size(); ++i) {
    const auto v = m.blocks()[i].attention;
    if (v != AttentionVariant::none) {
      EXPECT_EQ(v, want) << "block " << i + 1;
      out.insert(static_cast<int>(i + 1));
    }
  }
  return out;
}

}  // namespace

TEST(Presets, ElevenNamesAndPlacement) {
  using V = AttentionVariant;
  const std::set<int> all{1, 2, 3, 4};
  const std::vector<std::tuple<std::string, V, std::set<int>>> table{
      {"CNN10", V::none, {}},
      {"T-CNN10", V::temporal, all},
      {"S-CNN10", V::spectral, all},
      {"TS-CNN10-1", V::parallel_learned, {1}},
      {"TS-CNN10-2", V::parallel_learned, {2}},
      {"TS-CNN10-3", V::parallel_learned, {3}},
      {"TS-CNN10-4", V::parallel_learned, {4}},
      {"TS-CNN10-fixed", V::parallel_fixed, all},
      {"TS-CNN10", V::parallel_learned, all},
      {"TS-CNN10-concat", V::concat_ts, all},
      {"ST-CNN10-concat", V::concat_st, all},
  };
  ASSERT_EQ(preset_names().size(), 11u);
  for (const auto& [name, variant, sites] : table) {
    EXPECT_NE(std::find(preset_names().begin(), preset_names().end(), name), preset_names().end()) << name;
    auto cfg = make_preset(name, 10);
    EXPECT_EQ(cfg.block_channels, (std::vector<std::size_t>{64, 128, 256, 512})) << name;
    EXPECT_EQ(cfg.fc_hidden, 512u);
    EXPECT_EQ(cfg.attention_variant, variant) << name;
    EXPECT_EQ(cfg.attention_blocks, sites) << name;
    Model<float> small(make_preset(name + "-small", 10));
    EXPECT_EQ(attention_sites(small, variant), sites) << name;
  }
}

TEST(Presets, UnknownNameListsValidOnes) {
  try {
    make_preset("ResNet50", 10);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    for (const auto& n : preset_names()) EXPECT_NE(msg.find(n), std::string::npos) << n;
  }
  EXPECT_THROW(make_preset("CNN10", 1), ValidationError);
}

TEST(ModelConfig, TextRoundTripAndValidation) {
  for (const auto& n : preset_names()) {
    auto c = make_preset(n, 7, 32);
    EXPECT_EQ(ModelConfig::from_text(c.to_text()), c) << n;
  }
  auto c = make_preset("CNN10", 10);
  EXPECT_THROW(ModelConfig::from_text(c.to_text() + "bogus_key=1\n"), ValidationError);
  c.attention_blocks = {2};
  EXPECT_THROW(c.validate(), ValidationError);  // blocks without a variant
  auto t = make_preset("TS-CNN10", 10);
  t.attention_blocks.clear();
  EXPECT_THROW(t.validate(), ValidationError);
  t.attention_blocks = {5};
  EXPECT_THROW(t.validate(), ValidationError);
}

TEST(Model, ParameterCountDifference) {
  const std::vector<std::size_t> C{64, 128, 256, 512};
  std::size_t extra = 0;
  for (auto c : C) extra += 2 * (c + 1) + 3;
  EXPECT_EQ(extra, 4 * 2 + 2 * (64 + 128 + 256 + 512) + 12u);
  Model<float> base(make_preset("CNN10", 10)), ts(make_preset("TS-CNN10", 10));
  EXPECT_EQ(base.parameter_count() + extra, ts.parameter_count());
  EXPECT_EQ(Model<float>(make_preset("CNN10", 10), 99).parameter_count(), base.parameter_count());

  // fixed and serial variants carry the squeezes but no logits
  Model<float> fixed(make_preset("TS-CNN10-fixed", 10)), concat(make_preset("TS-CNN10-concat", 10));
  EXPECT_EQ(fixed.parameter_count(), base.parameter_count() + extra - 12);
  EXPECT_EQ(concat.parameter_count(), fixed.parameter_count());
  Model<float> one(make_preset("TS-CNN10-3", 10));
  EXPECT_EQ(one.parameter_count(), base.parameter_count() + 2 * (256 + 1) + 3);
}

TEST(Model, FullWidthBlockShapes) {
  Model<float> m(make_preset("TS-CNN10", 10), 1);
  Tape<float> tape(false);
  std::vector<Var<float>> outs;
  auto logits = m.forward(tape, tape.constant(random_input({1, 249, 40, 1}, 2)), Mode::eval, &outs);
  ASSERT_EQ(outs.size(), 4u);
  EXPECT_EQ(outs[0].shape(), (Shape{1, 124, 20, 64}));
  EXPECT_EQ(outs[1].shape(), (Shape{1, 62, 10, 128}));
  EXPECT_EQ(outs[2].shape(), (Shape{1, 31, 5, 256}));
  EXPECT_EQ(outs[3].shape(), (Shape{1, 15, 2, 512}));
  EXPECT_EQ(global_mean_pool(outs[3]).shape(), (Shape{1, 512}));
  EXPECT_EQ(logits.shape(), (Shape{1, 10}));
  EXPECT_TRUE(logits.value().all_finite());
}

TEST(Model, EvalDeterminismAndFiniteLogits) {
  for (const auto& n : preset_names()) {
    Model<float> m(make_preset(n + "-small", 5), 3);
    auto x = random_input({2, 49, 40, 1}, 4);
    auto a = m.logits(x), b = m.logits(x);
    EXPECT_EQ(a, b) << n;
    EXPECT_EQ(a.shape(), (Shape{2, 5}));
    EXPECT_TRUE(a.all_finite()) << n;
    // unbatched input gives the first row
    auto single = m.logits(Tensor<float>({49, 40, 1}, std::vector<float>(x.data(), x.data() + 49 * 40)));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_FLOAT_EQ(single[k], a[k]) << n;
  }
}

TEST(Model, SeedsControlInitialization) {
  auto x = random_input({1, 32, 40, 1}, 5);
  Model<float> a(make_preset("TS-CNN10-small", 4), 11), b(make_preset("TS-CNN10-small", 4), 11),
      c(make_preset("TS-CNN10-small", 4), 12);
  EXPECT_EQ(a.logits(x), b.logits(x));
  EXPECT_NE(a.logits(x), c.logits(x));
}

TEST(Model, InputValidation) {
  Model<float> m(make_preset("CNN10-small", 4));
  EXPECT_THROW(m.logits(Tensor<float>({1, 49, 32, 1})), ShapeError);
  EXPECT_THROW(m.logits(Tensor<float>({1, 49, 40, 2})), ShapeError);
  EXPECT_THROW(m.logits(Tensor<float>({1, 8, 40, 1})), ShapeError);
}

TEST(Model, GlobalPoolingIsPermutationInvariant) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 6, 4, 3}, rng);
  std::vector<std::size_t> perm(24);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> y(x.shape());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 24; ++p)
      for (std::size_t c = 0; c < 3; ++c) y[(b * 24 + p) * 3 + c] = x[(b * 24 + perm[p]) * 3 + c];
  Tape<double> tape;
  auto a = global_mean_pool(tape.constant(x)).value(), b = global_mean_pool(tape.constant(y)).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Model, GradientsReachEveryParameter) {
  Model<double> m(make_preset("TS-CNN10-small", 3), 7);
  std::mt19937_64 rng(8);
  Tape<double> tape;
  auto logits = m.forward(tape, tape.constant(random_tensor({2, 32, 40, 1}, rng)), Mode::train);
  Tensor<double> targets({2, 3});
  targets.at({0, 1}) = 1;
  targets.at({1, 2}) = 1;
  tape.backward(cross_entropy(logits, targets));
  for (const auto* p : m.parameters()) {
    ASSERT_EQ(p->grad.shape(), p->value.shape()) << p->name;
    EXPECT_TRUE(std::any_of(p->grad.values().begin(), p->grad.values().end(), [](double g) { return g != 0; }))
        << p->name;
  }
}

TEST(Predict, TiesArgmaxAndNormalization) {
  auto tie = predict_from_logits(std::vector<double>{0, 0});
  EXPECT_EQ(tie.label, 0u);
  EXPECT_DOUBLE_EQ(tie.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(tie.probs[1], 0.5);
  EXPECT_EQ(predict_from_logits(std::vector<double>{-1, 3}).label, 1u);
  EXPECT_EQ(predict_from_logits(std::vector<double>{2, 5, 5, 1}).label, 1u);

  Model<float> m(make_preset("TS-CNN10-small", 6), 9);
  auto p = predict(m, random_input({40, 40, 1}, 10));
  ASSERT_EQ(p.probs.size(), 6u);
  EXPECT_NEAR(std::accumulate(p.probs.begin(), p.probs.end(), 0.0), 1.0, 1e-6);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto path = temp_file("rt.tsam");
  for (const auto& n : {"TS-CNN10-small", "ST-CNN10-concat-small", "TS-CNN10-fixed-small"}) {
    Model<float> m(make_preset(n, 4), 13);
    // move BN stats and logits off their defaults so they are exercised
    {
      Tape<float> tape;
      m.forward(tape, tape.constant(random_input({2, 32, 40, 1}, 14)), Mode::train);
    }
    for (auto& b : m.blocks())
      if (b.coeffs.learned) b.coeffs.logits.value = Tensor<float>({3}, {0.3f, -0.2f, 0.7f});
    save_model(path, m);
    auto loaded = load_model<float>(path, m.config());
    EXPECT_EQ(loaded.config(), m.config());
    auto pa = m.parameters();
    auto pb = loaded.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    auto ba = m.buffers(), bb = loaded.buffers();
    for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(*ba[i], *bb[i]);
    auto x = random_input({2, 32, 40, 1}, 15);
    EXPECT_EQ(m.logits(x), loaded.logits(x)) << n;
  }
  fs::remove(path);
}

TEST(Checkpoint, FixedCoefficientsAndLearnedSumAfterLoad) {
  const auto path = temp_file("coef.tsam");
  Model<float> fixed(make_preset("TS-CNN10-fixed-small", 4));
  save_model(path, fixed);
  auto lf = load_model<float>(path);
  ASSERT_EQ(lf.fusion_coefficients().size(), 4u);
  for (const auto& [block, c] : lf.fusion_coefficients()) EXPECT_EQ(c, (std::array<float, 3>{0.33f, 0.33f, 0.33f}));

  Model<double> learned(make_preset("TS-CNN10-small", 4));
  for (auto& b : learned.blocks()) b.coeffs.logits.value = Tensor<double>({3}, {1.5, -0.25, 0.1});
  save_model(path, learned);
  auto ll = load_model<double>(path);
  for (const auto& [block, c] : ll.fusion_coefficients()) EXPECT_NEAR(c[0] + c[1] + c[2], 1.0, 1e-12) << block;
  fs::remove(path);
}

TEST(Checkpoint, FormatGuards) {
  const auto path = temp_file("bad.tsam");
  Model<float> m(make_preset("CNN10-small", 4));
  save_model(path, m);
  auto bytes = detail::slurp(path);
  auto write = [&](const std::vector<unsigned char>& b) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  };
  auto bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_model<float>(path), IoError);
  bad = bytes;
  bad[4] = 9;
  write(bad);
  EXPECT_THROW(load_model<float>(path), IoError);
  bad = bytes;
  bad.resize(bad.size() - 3);
  write(bad);
  EXPECT_THROW(load_model<float>(path), IoError);
  write(bytes);
  EXPECT_THROW(load_model<float>(path, make_preset("TS-CNN10-small", 4)), ValidationError);
  EXPECT_NO_THROW(load_model<float>(path, m.config()));
  fs::remove(path);
}
