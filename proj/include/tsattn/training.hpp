#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "model.hpp"

namespace tsattn {

struct SpecAugmentConfig {
  std::size_t n_time_masks = 2;
  std::size_t max_time_width = 16;
  std::size_t n_freq_masks = 2;
  std::size_t max_freq_width = 8;

  bool enabled() const {
    return (n_time_masks > 0 && max_time_width > 0) || (n_freq_masks > 0 && max_freq_width > 0);
  }
};

struct TrainConfig {
  double lr0 = 0.01;
  double decay = 0.98;
  std::size_t decay_every = 5;
  std::size_t batch_size = 64;
  std::size_t max_iters = 2000;
  double mixup_alpha = 0.2;  // 0 disables mixup
  SpecAugmentConfig spec_augment;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;  // 0 evaluates only after the last step

  void validate() const {
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw ValidationError("train config: lr0 must be positive");
    if (!(decay > 0 && decay <= 1)) throw ValidationError("train config: decay must be in (0, 1]");
    if (decay_every == 0) throw ValidationError("train config: decay_every must be positive");
    if (batch_size == 0) throw ValidationError("train config: batch_size must be positive");
    if (max_iters == 0) throw ValidationError("train config: max_iters must be positive");
    if (!(mixup_alpha >= 0) || !std::isfinite(mixup_alpha))
      throw ValidationError("train config: mixup_alpha must be >= 0");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "lr0=" << lr0 << "\ndecay=" << decay << "\ndecay_every=" << decay_every << "\nbatch_size=" << batch_size
       << "\nmax_iters=" << max_iters << "\nmixup_alpha=" << mixup_alpha
       << "\ntime_masks=" << spec_augment.n_time_masks << "\nmax_time_width=" << spec_augment.max_time_width
       << "\nfreq_masks=" << spec_augment.n_freq_masks << "\nmax_freq_width=" << spec_augment.max_freq_width
       << "\nseed=" << seed << "\neval_every=" << eval_every << "\n";
    return os.str();
  }

  /// Applies `key=value` lines over the defaults. Blank lines and `#` comments
  /// are skipped; unknown keys are errors.
  static TrainConfig from_text(const std::string& text) { return from_text(text, TrainConfig{}); }

  static TrainConfig from_text(const std::string& text, TrainConfig base) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      line = detail::trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      const std::string where = "train config line " + std::to_string(lineno);
      if (eq == std::string::npos) throw ValidationError(where + ": expected key=value");
      base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), where);
    }
    base.validate();
    return base;
  }

  static TrainConfig from_file(const std::filesystem::path& path) { return from_file(path, TrainConfig{}); }

  static TrainConfig from_file(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open train config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), std::move(base));
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "train config") {
    auto real = [&] {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size()) throw ValidationError(where + ": " + key + " expects a number");
      return v;
    };
    auto count = [&] { return detail::parse_int<std::size_t>(value, where + ": " + key); };
    if (key == "lr0") lr0 = real();
    else if (key == "decay") decay = real();
    else if (key == "decay_every") decay_every = count();
    else if (key == "batch_size") batch_size = count();
    else if (key == "max_iters") max_iters = count();
    else if (key == "mixup_alpha") mixup_alpha = real();
    else if (key == "time_masks") spec_augment.n_time_masks = count();
    else if (key == "max_time_width") spec_augment.max_time_width = count();
    else if (key == "freq_masks") spec_augment.n_freq_masks = count();
    else if (key == "max_freq_width") spec_augment.max_freq_width = count();
    else if (key == "seed") seed = detail::parse_int<std::uint64_t>(value, where + ": seed");
    else if (key == "eval_every") eval_every = count();
    else throw ValidationError(where + ": unknown key '" + key + "'");
  }
};

/// lr0 * decay^floor(iter / decay_every).
inline double lr_schedule(const TrainConfig& cfg, std::size_t iter) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(iter / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// Adam

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

template <typename Scalar>
struct OptimizerState {
  std::vector<Tensor<Scalar>> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
template <typename Scalar>
void adam_step(const std::vector<Parameter<Scalar>*>& params, OptimizerState<Scalar>& state, double lr) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Tensor<Scalar>::zeros(p->value.shape()));
      state.v.push_back(Tensor<Scalar>::zeros(p->value.shape()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (p.grad.shape() != p.value.shape() || m.shape() != p.value.shape())
      throw ShapeError("adam_step: shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = kAdamBeta1 * m[i] + (1 - kAdamBeta1) * g;
      const double vi = kAdamBeta2 * v[i] + (1 - kAdamBeta2) * g * g;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      p.value[i] = static_cast<Scalar>(p.value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEpsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

/// One-hot row vectors for integer labels.
inline Tensor<double> one_hot(const std::vector<std::size_t>& labels, std::size_t n_classes) {
  Tensor<double> t({labels.size(), n_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes)
      throw ValidationError("label " + std::to_string(labels[i]) + " out of range for " +
                            std::to_string(n_classes) + " classes");
    t[i * n_classes + labels[i]] = 1.0;
  }
  return t;
}

/// lambda * a + (1 - lambda) * b for a feature and its label row.
struct Mixed {
  Tensor<float> feature;
  std::vector<double> target;
};

inline Mixed mixup(const Tensor<float>& xa, std::span<const double> ya, const Tensor<float>& xb,
                   std::span<const double> yb, double lambda) {
  if (xa.shape() != xb.shape()) throw ShapeError("mixup: feature shapes differ");
  if (ya.size() != yb.size()) throw ShapeError("mixup: label widths differ");
  if (!(lambda >= 0 && lambda <= 1)) throw ValidationError("mixup: lambda must be in [0, 1]");
  Mixed out{xa, std::vector<double>(ya.begin(), ya.end())};
  if (lambda == 1.0) return out;
  for (std::size_t i = 0; i < xa.size(); ++i)
    out.feature[i] = static_cast<float>(lambda * xa[i] + (1 - lambda) * xb[i]);
  for (std::size_t k = 0; k < ya.size(); ++k) out.target[k] = lambda * ya[k] + (1 - lambda) * yb[k];
  return out;
}

/// Draws from Beta(alpha, alpha) as X / (X + Y) with X, Y ~ Gamma(alpha).
inline double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(alpha, 1.0);
  const double x = g(rng), y = g(rng);
  return x + y > 0 ? x / (x + y) : 0.5;
}

/// Time and frequency stripes set to the feature's mean. Widths are uniform
/// in [0, max_width], starts uniform over valid positions.
inline Tensor<float> spec_augment(const Tensor<float>& feature, const SpecAugmentConfig& cfg, std::mt19937_64& rng) {
  const auto d = MapDims::of(feature.shape(), "spec_augment");
  if (d.batched) throw ShapeError("spec_augment: expected a single T x F x C feature");
  if (cfg.n_time_masks > 0 && cfg.max_time_width >= d.time)
    throw ValidationError("spec_augment: time mask width must be below the frame count");
  if (cfg.n_freq_masks > 0 && cfg.max_freq_width >= d.freq)
    throw ValidationError("spec_augment: frequency mask width must be below the band count");
  Tensor<float> out = feature;
  if (!cfg.enabled()) return out;
  double mean = 0;
  for (float v : feature.values()) mean += v;
  const float fill = static_cast<float>(mean / static_cast<double>(feature.size()));
  auto stripe = [&](std::size_t extent, std::size_t max_width) {
    const std::size_t w = std::uniform_int_distribution<std::size_t>(0, max_width)(rng);
    const std::size_t s = std::uniform_int_distribution<std::size_t>(0, extent - w)(rng);
    return std::pair{s, w};
  };
  for (std::size_t k = 0; k < cfg.n_time_masks; ++k) {
    const auto [s, w] = stripe(d.time, cfg.max_time_width);
    for (std::size_t t = s; t < s + w; ++t)
      for (std::size_t f = 0; f < d.freq; ++f)
        for (std::size_t c = 0; c < d.channels; ++c) out.at({t, f, c}) = fill;
  }
  for (std::size_t k = 0; k < cfg.n_freq_masks; ++k) {
    const auto [s, w] = stripe(d.freq, cfg.max_freq_width);
    for (std::size_t t = 0; t < d.time; ++t)
      for (std::size_t f = s; f < s + w; ++f)
        for (std::size_t c = 0; c < d.channels; ++c) out.at({t, f, c}) = fill;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t iter = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> train_acc, eval_acc;
};

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics " + path.string());
  os << "iter,lr,loss,train_acc,eval_acc\n" << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.iter << ',' << r.lr << ',' << r.loss << ',';
    if (r.train_acc) os << *r.train_acc;
    os << ',';
    if (r.eval_acc) os << *r.eval_acc;
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

/// Stacks features into a (B, T, F, 1) batch.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<const Tensor<float>*>& items) {
  if (items.empty()) throw ValidationError("stack_batch: empty batch");
  const Shape s = items.front()->shape();
  if (s.size() != 3) throw ShapeError("stack_batch: expected T x F x C features, got " + shape_str(s));
  Tensor<Scalar> out({items.size(), s[0], s[1], s[2]});
  const std::size_t n = shape_size(s);
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b]->shape() != s)
      throw ShapeError("stack_batch: feature " + shape_str(items[b]->shape()) + " differs from " + shape_str(s));
    std::copy(items[b]->data(), items[b]->data() + n, out.data() + b * n);
  }
  return out;
}

/// Eval-mode accuracy over a feature set, processed in chunks.
template <typename Scalar>
double accuracy(Model<Scalar>& model, const FeatureSet& set, std::size_t chunk = 32) {
  if (set.empty()) throw ValidationError("accuracy: empty feature set");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    std::vector<const Tensor<float>*> items;
    for (std::size_t i = start; i < std::min(set.size(), start + chunk); ++i) items.push_back(&set.features[i]);
    const auto logits = model.logits(stack_batch<Scalar>(items));
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < items.size(); ++b) {
      const std::vector<double> row(logits.data() + b * K, logits.data() + (b + 1) * K);
      if (predict_from_logits(row).label == set.labels[start + b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

/// Endless stream of indices sampled without replacement per epoch,
/// reshuffled at every epoch boundary.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_ = 0;
};

/// Optimizes `model` on `train_set`. Every step: draw a batch, mix it with a
/// shuffled copy of itself (per-pair lambda), SpecAugment each example,
/// forward in train mode, cross-entropy on soft labels, backward, Adam.
/// `on_row`, when given, sees each metrics row as it is produced.
template <typename Scalar>
std::vector<MetricsRow> train(Model<Scalar>& model, const FeatureSet& train_set, const FeatureSet* eval_set,
                              const TrainConfig& cfg,
                              const std::function<void(const MetricsRow&)>& on_row = {}) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("train: no training examples");
  const auto& mc = model.config();
  const std::size_t K = mc.n_classes;
  const Shape fshape = train_set.features.front().shape();
  for (const auto* set : {&train_set, eval_set}) {
    if (!set) continue;
    for (std::size_t i = 0; i < set->size(); ++i) {
      const auto& s = set->features[i].shape();
      if (s != fshape || s.size() != 3 || s[1] != mc.n_mels || s[2] != 1)
        throw ShapeError("train: feature " + shape_str(s) + " does not fit a model expecting " +
                         std::to_string(mc.n_mels) + " mel bands (first feature " + shape_str(fshape) + ")");
      if (set->labels[i] >= K)
        throw ValidationError("train: label " + std::to_string(set->labels[i]) + " exceeds model classes " +
                              std::to_string(K));
    }
  }
  // shape errors surface before any parameter changes
  {
    Tape<Scalar> probe(false);
    auto x = stack_batch<Scalar>({&train_set.features.front()});
    model.forward(probe, probe.constant(x), Mode::eval);
  }

  std::mt19937_64 sample_rng(cfg.seed);
  std::mt19937_64 aug_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  EpochSampler sampler(train_set.size(), sample_rng);
  const std::size_t B = std::min(cfg.batch_size, train_set.size());
  const Tensor<double> all_targets = one_hot(train_set.labels, K);
  OptimizerState<Scalar> opt;
  std::vector<MetricsRow> rows;
  rows.reserve(cfg.max_iters);

  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    const double lr = lr_schedule(cfg, iter);
    const auto idx = sampler.next(B);

    std::vector<Tensor<float>> feats;
    Tensor<Scalar> targets({B, K});
    std::vector<std::size_t> partner(B);
    std::iota(partner.begin(), partner.end(), std::size_t{0});
    if (cfg.mixup_alpha > 0) std::shuffle(partner.begin(), partner.end(), aug_rng);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = idx[b], j = idx[partner[b]];
      const std::span<const double> yi(all_targets.data() + i * K, K), yj(all_targets.data() + j * K, K);
      const double lambda = cfg.mixup_alpha > 0 ? sample_beta(cfg.mixup_alpha, aug_rng) : 1.0;
      auto mixed = mixup(train_set.features[i], yi, train_set.features[j], yj, lambda);
      feats.push_back(spec_augment(mixed.feature, cfg.spec_augment, aug_rng));
      for (std::size_t k = 0; k < K; ++k) targets[b * K + k] = static_cast<Scalar>(mixed.target[k]);
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& f : feats) ptrs.push_back(&f);

    Tape<Scalar> tape;
    auto logits = model.forward(tape, tape.constant(stack_batch<Scalar>(ptrs)), Mode::train);
    auto loss = cross_entropy(logits, targets);
    model.zero_grad();
    tape.backward(loss);
    adam_step(model.parameters(), opt, lr);

    MetricsRow row{iter, lr, static_cast<double>(loss.value()[0]), {}, {}};
    const bool last = iter + 1 == cfg.max_iters;
    if (last || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0)) {
      row.train_acc = accuracy(model, train_set);
      if (eval_set && !eval_set->empty()) row.eval_acc = accuracy(model, *eval_set);
    }
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tsattn
