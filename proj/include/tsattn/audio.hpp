#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace tsattn {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  double seconds() const { return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0; }
};

/// Log-mel energies stored as a T x F x 1 tensor.
struct LogMelFeature {
  Tensor<float> values;
  double window_seconds = 0.040;
  double hop_seconds = 0.020;

  std::size_t frames() const { return values.dim(0); }
  std::size_t bands() const { return values.dim(1); }
};

/// Triangular mel filters sampled at FFT bin centers; weights are (n_fft/2+1) x n_mels.
struct MelFilterbank {
  std::vector<double> weights;
  std::size_t n_bins = 0;
  std::size_t n_mels = 0;
  double fmin = 0, fmax = 0;
  std::vector<double> breakpoints_hz;  // n_mels + 2 entries

  double weight(std::size_t bin, std::size_t band) const { return weights[bin * n_mels + band]; }
};

struct FrontendConfig {
  int sample_rate = 44100;
  double clip_seconds = 5.0;
  double window_seconds = 0.040;
  double hop_seconds = 0.020;
  std::size_t n_mels = 40;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means sample_rate / 2
  double log_floor = 1e-10;
};

// ---------------------------------------------------------------------------
// WAV I/O

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline float read_f32(const unsigned char* p) { return std::bit_cast<float>(read_u32(p)); }

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Decodes a RIFF/WAVE file (PCM16 or IEEE float32), averaging channels to mono.
inline Waveform load_wav(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw IoError(name + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  bool have_fmt = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = detail::read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) throw IoError(name + ": truncated fmt chunk");
      const unsigned char* f = bytes.data() + body;
      format = detail::read_u16(f);
      channels = detail::read_u16(f + 2);
      rate = detail::read_u32(f + 4);
      bits = detail::read_u16(f + 14);
      // WAVE_FORMAT_EXTENSIBLE carries the real codec in the subformat GUID.
      if (format == 0xFFFE && len >= 26) format = detail::read_u16(f + 24);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (body + len > bytes.size()) throw IoError(name + ": truncated data chunk");
      data = bytes.data() + body;
      data_len = len;
      break;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) throw IoError(name + ": missing fmt chunk");
  if (!data) throw IoError(name + ": missing data chunk");
  if (channels == 0 || rate == 0) throw IoError(name + ": invalid channel count or sample rate");

  std::size_t sample_bytes;
  if (format == 1 && bits == 16)
    sample_bytes = 2;
  else if (format == 3 && bits == 32)
    sample_bytes = 4;
  else
    throw IoError(name + ": unsupported codec (format " + std::to_string(format) + ", " + std::to_string(bits) +
                  " bits); expected PCM16 or float32");

  const std::size_t frame_bytes = sample_bytes * channels;
  const std::size_t frames = data_len / frame_bytes;
  if (frames == 0) throw IoError(name + ": no audio frames");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + c * sample_bytes;
      acc += sample_bytes == 2 ? static_cast<std::int16_t>(detail::read_u16(p)) / 32768.0
                               : static_cast<double>(detail::read_f32(p));
    }
    w.samples[i] = acc / channels;
  }
  for (double s : w.samples)
    if (!std::isfinite(s)) throw IoError(name + ": non-finite sample");
  return w;
}

enum class WavCodec { pcm16, float32 };

/// Writes interleaved frames (`channels` samples per frame).
inline void write_wav(const std::filesystem::path& path, const std::vector<double>& interleaved, int sample_rate,
                      std::uint16_t channels = 1, WavCodec codec = WavCodec::pcm16) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const std::uint16_t bits = codec == WavCodec::pcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(interleaved.size() * (bits / 8));
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  detail::put_u32(os, 16);
  detail::put_u16(os, codec == WavCodec::pcm16 ? 1 : 3);
  detail::put_u16(os, channels);
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate) * channels * (bits / 8));
  detail::put_u16(os, static_cast<std::uint16_t>(channels * (bits / 8)));
  detail::put_u16(os, bits);
  os.write("data", 4);
  detail::put_u32(os, data_len);
  for (double s : interleaved) {
    if (codec == WavCodec::pcm16) {
      const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
      detail::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    } else {
      detail::put_f32(os, static_cast<float>(s));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w, WavCodec codec = WavCodec::pcm16) {
  write_wav(path, w.samples, w.sample_rate, 1, codec);
}

// ---------------------------------------------------------------------------
// Time-domain conditioning

/// Linear-interpolation resampler; output length round(n * target / source).
inline Waveform resample_linear(const Waveform& w, int target_rate) {
  if (w.sample_rate <= 0 || target_rate <= 0) throw ValidationError("resample_linear: rates must be positive");
  if (w.sample_rate == target_rate) return w;
  const std::size_t n = w.samples.size();
  const double ratio = static_cast<double>(w.sample_rate) / target_rate;
  const auto m = static_cast<std::size_t>(std::llround(static_cast<double>(n) * target_rate / w.sample_rate));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double pos = static_cast<double>(i) * ratio;
    const std::size_t i0 = std::min(static_cast<std::size_t>(pos), n - 1);
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double frac = pos - static_cast<double>(i0);
    const double a = w.samples[i0], b = w.samples[i1];
    out.samples[i] = a == b ? a : a + (b - a) * frac;
  }
  return out;
}

/// Zero-pads or truncates at the tail to exactly round(seconds * rate) samples.
inline Waveform fix_length(const Waveform& w, double seconds) {
  if (!(seconds > 0)) throw ValidationError("fix_length: seconds must be positive");
  Waveform out = w;
  out.samples.resize(static_cast<std::size_t>(std::llround(seconds * w.sample_rate)), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Spectral analysis

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ValidationError("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> wk(std::cos(ang * k), std::sin(ang * k));
        const auto u = a[i + k], v = a[i + k + len / 2] * wk;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
  }
}

/// Periodic Hann window of length n.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

struct StftFraming {
  std::size_t window = 0;  // W samples
  std::size_t hop = 0;     // H samples
  std::size_t n_fft = 0;

  static StftFraming of(int rate, double window_seconds, double hop_seconds) {
    StftFraming f;
    f.window = static_cast<std::size_t>(std::llround(window_seconds * rate));
    f.hop = static_cast<std::size_t>(std::llround(hop_seconds * rate));
    if (f.window == 0 || f.hop == 0) throw ValidationError("stft: window and hop must be at least one sample");
    f.n_fft = next_pow2(f.window);
    return f;
  }

  std::size_t bins() const { return n_fft / 2 + 1; }

  /// floor((N - W) / H) + 1 for N >= W.
  std::size_t frames(std::size_t n) const {
    if (n < window) throw ValidationError("stft: clip shorter than one window");
    return (n - window) / hop + 1;
  }
};

/// Power spectrogram, T x (n_fft/2 + 1), row-major, no center padding.
struct PowerSpectrogram {
  std::vector<double> power;
  std::size_t frames = 0;
  std::size_t bins = 0;
  StftFraming framing;

  double at(std::size_t t, std::size_t k) const { return power[t * bins + k]; }
};

inline PowerSpectrogram stft(const Waveform& w, double window_seconds = 0.040, double hop_seconds = 0.020) {
  const auto framing = StftFraming::of(w.sample_rate, window_seconds, hop_seconds);
  PowerSpectrogram out;
  out.framing = framing;
  out.frames = framing.frames(w.samples.size());
  out.bins = framing.bins();
  out.power.resize(out.frames * out.bins);
  const auto window = hann_window(framing.window);
  std::vector<std::complex<double>> buf(framing.n_fft);
  for (std::size_t t = 0; t < out.frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    const double* x = w.samples.data() + t * framing.hop;
    for (std::size_t i = 0; i < framing.window; ++i) buf[i] = x[i] * window[i];
    fft(buf);
    for (std::size_t k = 0; k < out.bins; ++k) out.power[t * out.bins + k] = std::norm(buf[k]);
  }
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters with breakpoints equally spaced on the mel scale; each
/// filter is scaled so its largest sampled weight is exactly 1.
inline MelFilterbank build_mel_filterbank(std::size_t n_fft, int rate, std::size_t n_mels = 40, double fmin = 0.0,
                                          double fmax = 0.0) {
  if (fmax <= 0) fmax = rate / 2.0;
  if (n_mels < 1) throw ValidationError("mel filterbank: n_mels must be >= 1");
  if (!(fmin >= 0 && fmin < fmax && fmax <= rate / 2.0))
    throw ValidationError("mel filterbank: require 0 <= fmin < fmax <= rate/2");
  MelFilterbank fb;
  fb.n_bins = n_fft / 2 + 1;
  fb.n_mels = n_mels;
  fb.fmin = fmin;
  fb.fmax = fmax;
  const double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
  fb.breakpoints_hz.resize(n_mels + 2);
  for (std::size_t i = 0; i < n_mels + 2; ++i)
    fb.breakpoints_hz[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  fb.weights.assign(fb.n_bins * n_mels, 0.0);
  const double bin_hz = static_cast<double>(rate) / static_cast<double>(n_fft);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = fb.breakpoints_hz[m], mid = fb.breakpoints_hz[m + 1], hi = fb.breakpoints_hz[m + 2];
    double peak = 0;
    for (std::size_t k = 0; k < fb.n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double v = 0;
      if (f > lo && f <= mid)
        v = (f - lo) / (mid - lo);
      else if (f > mid && f < hi)
        v = (hi - f) / (hi - mid);
      fb.weights[k * n_mels + m] = v;
      peak = std::max(peak, v);
    }
    if (peak <= 0)
      throw ValidationError("mel filterbank: band " + std::to_string(m) + " (" + std::to_string(lo) + "-" +
                            std::to_string(hi) + " Hz) covers no FFT bin; lower n_mels or raise n_fft");
    for (std::size_t k = 0; k < fb.n_bins; ++k) fb.weights[k * n_mels + m] /= peak;
  }
  return fb;
}

/// log10(max(power x filterbank, floor)) as a T x n_mels x 1 feature.
inline LogMelFeature log_mel(const PowerSpectrogram& spec, const MelFilterbank& fb, double floor = 1e-10) {
  if (spec.bins != fb.n_bins)
    throw ShapeError("log_mel: spectrogram has " + std::to_string(spec.bins) + " bins, filterbank expects " +
                     std::to_string(fb.n_bins));
  LogMelFeature out;
  out.values = Tensor<float>({spec.frames, fb.n_mels, 1});
  std::vector<double> acc(fb.n_mels);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < spec.bins; ++k) {
      const double p = spec.power[t * spec.bins + k];
      if (p == 0) continue;
      const double* wr = fb.weights.data() + k * fb.n_mels;
      for (std::size_t m = 0; m < fb.n_mels; ++m) acc[m] += p * wr[m];
    }
    for (std::size_t m = 0; m < fb.n_mels; ++m)
      out.values[t * fb.n_mels + m] = static_cast<float>(std::log10(std::max(acc[m], floor)));
  }
  return out;
}

/// Full preprocessing: resample, fix length, STFT, log-mel.
inline LogMelFeature featurize(const Waveform& w, const FrontendConfig& cfg = {}) {
  const Waveform fixed = fix_length(resample_linear(w, cfg.sample_rate), cfg.clip_seconds);
  const auto spec = stft(fixed, cfg.window_seconds, cfg.hop_seconds);
  const auto fb = build_mel_filterbank(spec.framing.n_fft, cfg.sample_rate, cfg.n_mels, cfg.fmin, cfg.fmax);
  auto feat = log_mel(spec, fb, cfg.log_floor);
  feat.window_seconds = cfg.window_seconds;
  feat.hop_seconds = cfg.hop_seconds;
  return feat;
}

/// Expected frame count for a clip under `cfg`.
inline std::size_t expected_frames(const FrontendConfig& cfg) {
  const auto framing = StftFraming::of(cfg.sample_rate, cfg.window_seconds, cfg.hop_seconds);
  return framing.frames(static_cast<std::size_t>(std::llround(cfg.clip_seconds * cfg.sample_rate)));
}

// ---------------------------------------------------------------------------
// TSFA feature grid files: "TSFA", u32 version, u32 T, u32 F, T*F float32 LE.

inline constexpr std::uint32_t kTsfaVersion = 1;

inline void write_tsfa(const std::filesystem::path& path, const Tensor<float>& grid) {
  if (grid.rank() < 2 || grid.rank() > 3 || (grid.rank() == 3 && grid.dim(2) != 1))
    throw ShapeError("write_tsfa: expected a T x F (x 1) grid, got " + shape_str(grid.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("TSFA", 4);
  detail::put_u32(os, kTsfaVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(grid.dim(0)));
  detail::put_u32(os, static_cast<std::uint32_t>(grid.dim(1)));
  for (float v : grid.values()) detail::put_f32(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

/// Reads a TSFA grid as a T x F x 1 tensor.
inline Tensor<float> read_tsfa(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "TSFA", 4) != 0)
    throw IoError(path.string() + ": not a TSFA file");
  const auto version = detail::read_u32(bytes.data() + 4);
  if (version != kTsfaVersion) throw IoError(path.string() + ": unsupported TSFA version " + std::to_string(version));
  const std::size_t T = detail::read_u32(bytes.data() + 8), F = detail::read_u32(bytes.data() + 12);
  if (T == 0 || F == 0 || bytes.size() != 16 + 4 * T * F) throw IoError(path.string() + ": truncated TSFA payload");
  std::vector<float> v(T * F);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::read_f32(bytes.data() + 16 + 4 * i);
  return Tensor<float>({T, F, 1}, std::move(v));
}

}  // namespace tsattn
