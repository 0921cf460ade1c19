#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "audio.hpp"
#include "dataset.hpp"

namespace tsattn {

/// Labelled synthetic clips: each class has its own recipe (steady tone,
/// rising chirp or narrow noise band) around a class-specific centre
/// frequency, with random phase, amplitude, jitter and event placement.
/// Every clip sits on a faint white noise floor and, with
/// `burst_probability`, carries one class-independent broadband burst.
struct SynthConfig {
  std::size_t classes = 2;
  std::size_t n_per_class = 10;
  std::uint64_t seed = 0;
  int sample_rate = 44100;
  double seconds = 1.0;
  double eval_fraction = 0.5;  // share of each class placed in fold 2
  double burst_probability = 0.5;

  void validate() const {
    if (classes < 2) throw ValidationError("synth: need at least 2 classes");
    if (n_per_class < 1) throw ValidationError("synth: n_per_class must be positive");
    if (sample_rate < 8000) throw ValidationError("synth: sample rate must be at least 8000 Hz");
    if (!(seconds > 0)) throw ValidationError("synth: seconds must be positive");
    if (!(eval_fraction >= 0 && eval_fraction < 1)) throw ValidationError("synth: eval_fraction must be in [0, 1)");
    if (!(burst_probability >= 0 && burst_probability <= 1))
      throw ValidationError("synth: burst_probability must be in [0, 1]");
  }
};

enum class SynthRecipe { tone, chirp, noise_band };

inline SynthRecipe synth_recipe(std::size_t cls) { return static_cast<SynthRecipe>(cls % 3); }

/// Class centre frequencies, log-spaced between 300 Hz and min(8 kHz, 0.3 * rate).
inline double synth_centre_hz(std::size_t cls, std::size_t classes, int rate) {
  const double lo = 300.0, hi = std::min(8000.0, 0.3 * rate);
  const double u = classes > 1 ? static_cast<double>(cls) / static_cast<double>(classes - 1) : 0.0;
  return lo * std::pow(hi / lo, u);
}

inline Waveform synth_clip(std::size_t cls, const SynthConfig& cfg, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(std::llround(cfg.seconds * cfg.sample_rate));
  const double rate = cfg.sample_rate;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double f0 = synth_centre_hz(cls, cfg.classes, cfg.sample_rate) * (0.97 + 0.06 * unit(rng));
  const double amp = 0.3 + 0.4 * unit(rng);
  const double phase = 2 * std::numbers::pi * unit(rng);
  const double dur = (0.5 + 0.4 * unit(rng)) * static_cast<double>(n);
  const double start = unit(rng) * (static_cast<double>(n) - dur);
  const double fade = 0.01 * rate;

  // the burst covers 5-20% of the clip
  const bool burst = unit(rng) < cfg.burst_probability;
  const double burst_len = (0.05 + 0.15 * unit(rng)) * static_cast<double>(n);
  const double burst_start = unit(rng) * (static_cast<double>(n) - burst_len);
  const double burst_amp = 0.1 + 0.3 * unit(rng);

  std::vector<std::pair<double, double>> partials;  // noise band: (freq, phase)
  if (synth_recipe(cls) == SynthRecipe::noise_band)
    for (int k = 0; k < 24; ++k) partials.emplace_back(f0 * (0.85 + 0.3 * unit(rng)), 2 * std::numbers::pi * unit(rng));

  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    const double pos = static_cast<double>(i) - start;
    double env = 0;
    if (pos >= 0 && pos <= dur) env = std::min({1.0, pos / fade, (dur - pos) / fade});
    double s = 0;
    if (env > 0) {
      switch (synth_recipe(cls)) {
        case SynthRecipe::tone: s = std::sin(2 * std::numbers::pi * f0 * t + phase); break;
        case SynthRecipe::chirp: {
          // frequency rises from f0 to 1.6 f0 across the event
          const double tau = pos / rate, span = dur / rate;
          s = std::sin(2 * std::numbers::pi * f0 * (tau + 0.3 * tau * tau / span) + phase);
          break;
        }
        case SynthRecipe::noise_band:
          for (const auto& [f, ph] : partials) s += std::sin(2 * std::numbers::pi * f * t + ph);
          s /= std::sqrt(static_cast<double>(partials.size()) / 2.0);
          break;
      }
    }
    double x = amp * env * s + 0.005 * gauss(rng);
    const double bpos = static_cast<double>(i) - burst_start;
    if (burst && bpos >= 0 && bpos <= burst_len) x += burst_amp * gauss(rng);
    w.samples[i] = x;
  }
  return w;
}

/// Writes `classes * n_per_class` WAV files plus `manifest.csv` under `out_dir`.
inline Manifest synth_dataset(const std::filesystem::path& out_dir, const SynthConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const auto n_eval = static_cast<std::size_t>(std::llround(cfg.eval_fraction * static_cast<double>(cfg.n_per_class)));
  Manifest m;
  for (std::size_t c = 0; c < cfg.classes; ++c)
    for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
      std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                        static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      char name[64];
      std::snprintf(name, sizeof name, "class%02zu_%04zu.wav", c, i);
      const auto path = out_dir / name;
      write_wav(path, synth_clip(c, cfg, rng));
      m.entries.push_back({path, c, i < cfg.n_per_class - n_eval ? 1 : 2});
    }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace tsattn
