#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "audio.hpp"
#include "dataset.hpp"
#include "model.hpp"
#include "training.hpp"

namespace tsattn {

// ---------------------------------------------------------------------------
// Waveform-domain noise at a target SNR

enum class NoiseKind { gaussian, external_clip };

inline const char* noise_kind_name(NoiseKind k) { return k == NoiseKind::gaussian ? "gaussian" : "external"; }

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "gaussian") return NoiseKind::gaussian;
  if (s == "external" || s == "external-clip") return NoiseKind::external_clip;
  throw ValidationError("unknown noise kind '" + s + "'; expected gaussian or external");
}

/// SNR of +infinity means "no noise".
inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

struct NoiseSpec {
  NoiseKind kind = NoiseKind::gaussian;
  double snr_db = 0.0;
  std::optional<std::filesystem::path> source_path;

  void validate() const {
    if (std::isnan(snr_db) || snr_db == -kNoNoise) throw ValidationError("noise: SNR must be a number or +inf");
    if (kind == NoiseKind::external_clip && !source_path)
      throw ValidationError("noise: external noise needs a source clip");
  }
};

inline double mean_power(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

/// signal + g * noise with g chosen so 10 log10(P_signal / P_scaled_noise) = snr_db.
/// Only the first signal-length samples of `noise` are used.
inline Waveform add_noise_snr(const Waveform& signal, const Waveform& noise, double snr_db) {
  if (std::isnan(snr_db)) throw ValidationError("add_noise_snr: SNR is NaN");
  if (snr_db == kNoNoise) return signal;
  const std::size_t n = signal.samples.size();
  if (noise.samples.size() < n) throw ValidationError("add_noise_snr: noise is shorter than the signal");
  const std::span<const double> nz(noise.samples.data(), n);
  const double ps = mean_power(signal.samples), pn = mean_power(nz);
  if (!(ps > 0)) throw ValidationError("add_noise_snr: signal is silent, SNR is undefined");
  if (!(pn > 0)) throw ValidationError("add_noise_snr: noise is silent");
  const double gain = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
  Waveform out = signal;
  for (std::size_t i = 0; i < n; ++i) out.samples[i] += gain * nz[i];
  return out;
}

/// 10 log10(P_signal / P_(mixed - signal)).
inline double realized_snr_db(const Waveform& signal, const Waveform& mixed) {
  if (signal.samples.size() != mixed.samples.size()) throw ShapeError("realized_snr_db: length mismatch");
  std::vector<double> diff(signal.samples.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = mixed.samples[i] - signal.samples[i];
  const double pn = mean_power(diff);
  return pn == 0 ? kNoNoise : 10.0 * std::log10(mean_power(signal.samples) / pn);
}

inline Waveform gaussian_noise(std::size_t n, int rate, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(n);
  for (auto& s : w.samples) s = g(rng);
  return w;
}

/// Tiles a short clip, or takes a random window from a long one, to exactly n samples.
inline Waveform fit_noise(const Waveform& noise, std::size_t n, std::mt19937_64& rng) {
  if (noise.samples.empty()) throw ValidationError("fit_noise: empty noise clip");
  Waveform out;
  out.sample_rate = noise.sample_rate;
  out.samples.resize(n);
  const std::size_t m = noise.samples.size();
  const std::size_t offset = m > n ? std::uniform_int_distribution<std::size_t>(0, m - n)(rng) : 0;
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = noise.samples[(offset + i) % m];
  return out;
}

// ---------------------------------------------------------------------------
// Feature-domain stripe noise

/// Inclusive stripe of time frames or frequency bands.
struct RegionMask {
  Axis axis = Axis::time;
  std::size_t start = 0, end = 0;

  void validate(std::size_t axis_length) const {
    if (start > end || end >= axis_length)
      throw ValidationError(std::string("region mask ") + axis_name(axis) + " " + std::to_string(start) + ".." +
                            std::to_string(end) + " is outside 0.." + std::to_string(axis_length - 1));
  }

  bool contains(std::size_t t, std::size_t f) const {
    const std::size_t i = axis == Axis::time ? t : f;
    return i >= start && i <= end;
  }
};

inline double feature_std(const Tensor<float>& f) {
  double mean = 0, sq = 0;
  for (float v : f.values()) mean += v;
  mean /= static_cast<double>(f.size());
  for (float v : f.values()) sq += (v - mean) * (v - mean);
  return std::sqrt(sq / static_cast<double>(f.size()));
}

/// Adds N(0, std(feature)) inside the stripe; cells outside are copied unchanged.
inline Tensor<float> mask_region_noise(const Tensor<float>& feature, const RegionMask& mask, std::mt19937_64& rng) {
  const auto d = MapDims::of(feature.shape(), "mask_region_noise");
  if (d.batched) throw ShapeError("mask_region_noise: expected a single T x F x C feature");
  mask.validate(mask.axis == Axis::time ? d.time : d.freq);
  std::normal_distribution<double> g(0.0, feature_std(feature));
  Tensor<float> out = feature;
  for (std::size_t t = 0; t < d.time; ++t)
    for (std::size_t f = 0; f < d.freq; ++f)
      if (mask.contains(t, f))
        for (std::size_t c = 0; c < d.channels; ++c) out.at({t, f, c}) += static_cast<float>(g(rng));
  return out;
}

/// The stripe on the grid of block `block` (1-based), each pooling stage halving indices.
inline RegionMask map_mask_to_grid(const RegionMask& mask, int block) {
  if (block < 0) throw ValidationError("map_mask_to_grid: negative block");
  return {mask.axis, mask.start >> block, mask.end >> block};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double accuracy = 0;
  std::size_t correct = 0, total = 0;
  std::vector<std::size_t> class_correct, class_total;
  std::vector<std::size_t> predictions;
};

inline EvalReport score_predictions(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                                    std::size_t n_classes) {
  if (predictions.size() != labels.size()) throw ShapeError("score_predictions: length mismatch");
  if (labels.empty()) throw ValidationError("evaluation set is empty");
  EvalReport r;
  r.class_correct.assign(n_classes, 0);
  r.class_total.assign(n_classes, 0);
  r.predictions = predictions;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) throw ValidationError("label " + std::to_string(labels[i]) + " out of range");
    ++r.class_total[labels[i]];
    if (predictions[i] == labels[i]) {
      ++r.class_correct[labels[i]];
      ++r.correct;
    }
  }
  r.total = labels.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

/// Accuracy of `model` over `clips`. With `noise`, each clip gets its own
/// noise draw (seeded by `seed` and its manifest index) mixed in before
/// featurization.
template <typename Scalar>
EvalReport evaluate(Model<Scalar>& model, const Manifest& clips, const FrontendConfig& frontend,
                    const std::optional<NoiseSpec>& noise = std::nullopt, std::uint64_t seed = 0) {
  if (clips.entries.empty()) throw ValidationError("evaluate: evaluation set is empty");
  if (noise) noise->validate();
  std::optional<Waveform> source;
  if (noise && noise->kind == NoiseKind::external_clip)
    source = resample_linear(load_wav(*noise->source_path), frontend.sample_rate);

  std::vector<std::size_t> preds, labels;
  for (std::size_t i = 0; i < clips.entries.size(); ++i) {
    const auto& e = clips.entries[i];
    Waveform w = fix_length(resample_linear(load_wav(e.path), frontend.sample_rate), frontend.clip_seconds);
    if (noise && noise->snr_db != kNoNoise) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      const Waveform nz = source ? fit_noise(*source, w.samples.size(), rng)
                                 : gaussian_noise(w.samples.size(), w.sample_rate, rng);
      w = add_noise_snr(w, nz, noise->snr_db);
    }
    const auto feat = featurize(w, frontend).values;
    preds.push_back(predict(model, feat.template cast<Scalar>()).label);
    labels.push_back(e.label);
  }
  return score_predictions(preds, labels, model.config().n_classes);
}

struct ReportRow {
  std::string noise_kind;
  double snr_db = kNoNoise;
  std::string model;
  double accuracy = 0;
};

/// Writes `noise_kind,snr_db,model,accuracy`; appends rows when the file
/// already carries the header.
inline void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows, bool append = false) {
  const bool header = !(append && std::filesystem::exists(path) && std::filesystem::file_size(path) > 0);
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw IoError("cannot write report " + path.string());
  if (header) os << "noise_kind,snr_db,model,accuracy\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.noise_kind << ',';
    if (r.snr_db == kNoNoise)
      os << "inf";
    else
      os << r.snr_db;
    os << ',' << r.model << ',' << r.accuracy << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Feature maps

/// Channel-averaged post-attention, post-pooling activation of `block` (1-based)
/// as a T' x F' grid.
template <typename Scalar>
Tensor<float> feature_map(Model<Scalar>& model, const Tensor<float>& feature, int block) {
  const int n_blocks = static_cast<int>(model.blocks().size());
  if (block < 1 || block > n_blocks)
    throw ValidationError("feature map: block must be in 1.." + std::to_string(n_blocks) + ", got " +
                          std::to_string(block));
  if (feature.rank() != 3) throw ShapeError("feature map: expected a T x F x 1 feature");
  Tape<Scalar> tape(false);
  std::vector<Var<Scalar>> outs;
  model.forward(tape, tape.constant(feature.template cast<Scalar>()), Mode::eval, &outs);
  const auto& act = outs[static_cast<std::size_t>(block - 1)].value();
  const std::size_t T = act.dim(0), F = act.dim(1), C = act.dim(2);
  Tensor<float> grid({T, F});
  for (std::size_t p = 0; p < T * F; ++p) {
    double acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc += act[p * C + c];
    grid[p] = static_cast<float>(acc / static_cast<double>(C));
  }
  return grid;
}

/// One row per frame, comma-separated band values.
inline void write_grid_csv(const std::filesystem::path& path, const Tensor<float>& grid) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(9);
  const std::size_t T = grid.dim(0), F = grid.dim(1);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t f = 0; f < F; ++f) os << (f ? "," : "") << grid[t * F + f];
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

/// Writes the map to `out_path` (TSFA) and a CSV twin beside it; returns the grid.
template <typename Scalar>
Tensor<float> dump_feature_maps(Model<Scalar>& model, const Tensor<float>& feature, int block,
                                const std::filesystem::path& out_path) {
  auto grid = feature_map(model, feature, block);
  write_tsfa(out_path, grid);
  auto csv = out_path;
  write_grid_csv(csv.replace_extension(".csv"), grid);
  return grid;
}

/// mean |noisy| / mean |clean| over the stripe (given in grid coordinates).
inline double suppression_ratio(const Tensor<float>& clean_map, const Tensor<float>& noisy_map, const RegionMask& mask) {
  if (clean_map.shape() != noisy_map.shape() || clean_map.rank() < 2)
    throw ShapeError("suppression_ratio: map shapes differ");
  const std::size_t T = clean_map.dim(0), F = clean_map.dim(1);
  mask.validate(mask.axis == Axis::time ? T : F);
  double c = 0, n = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f)
      if (mask.contains(t, f)) {
        c += std::abs(clean_map[t * F + f]);
        n += std::abs(noisy_map[t * F + f]);
      }
  if (c == 0) throw ValidationError("suppression_ratio: clean map is zero inside the region");
  return n / c;
}

}  // namespace tsattn
