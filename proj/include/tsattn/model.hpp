#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <memory>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attention.hpp"
#include "audio.hpp"
#include "autodiff.hpp"
#include "ops.hpp"

namespace tsattn {

enum class AttentionVariant { none, temporal, spectral, parallel_learned, parallel_fixed, concat_ts, concat_st };
enum class GlobalPool { mean, max };

inline const char* variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::none: return "none";
    case AttentionVariant::temporal: return "temporal";
    case AttentionVariant::spectral: return "spectral";
    case AttentionVariant::parallel_learned: return "parallel_learned";
    case AttentionVariant::parallel_fixed: return "parallel_fixed";
    case AttentionVariant::concat_ts: return "concat_TS";
    case AttentionVariant::concat_st: return "concat_ST";
  }
  return "?";
}

inline AttentionVariant parse_variant(const std::string& s) {
  for (auto v : {AttentionVariant::none, AttentionVariant::temporal, AttentionVariant::spectral,
                 AttentionVariant::parallel_learned, AttentionVariant::parallel_fixed, AttentionVariant::concat_ts,
                 AttentionVariant::concat_st})
    if (s == variant_name(v)) return v;
  throw ValidationError("unknown attention variant '" + s + "'");
}

struct ModelConfig {
  std::string preset = "CNN10";
  std::vector<std::size_t> block_channels{64, 128, 256, 512};
  std::size_t convs_per_block = 2;
  std::size_t kernel = 3;
  std::size_t fc_hidden = 512;
  std::size_t n_classes = 10;
  std::size_t n_mels = 40;
  AttentionVariant attention_variant = AttentionVariant::none;
  std::set<int> attention_blocks;
  GlobalPool global_pool = GlobalPool::mean;

  void validate() const {
    if (n_classes < 2) throw ValidationError("model: n_classes must be >= 2");
    if (block_channels.empty()) throw ValidationError("model: at least one block required");
    if (convs_per_block < 1 || kernel % 2 == 0) throw ValidationError("model: invalid conv configuration");
    if (attention_blocks.empty() != (attention_variant == AttentionVariant::none))
      throw ValidationError("model: attention_blocks must be empty exactly when the variant is none");
    for (int b : attention_blocks)
      if (b < 1 || b > static_cast<int>(block_channels.size()))
        throw ValidationError("model: attention block index " + std::to_string(b) + " out of range");
  }

  std::string to_text() const {
    std::ostringstream os;
    auto join = [](const auto& xs) {
      std::string s;
      for (auto x : xs) s += (s.empty() ? "" : ",") + std::to_string(x);
      return s;
    };
    os << "preset=" << preset << '\n'
       << "block_channels=" << join(block_channels) << '\n'
       << "convs_per_block=" << convs_per_block << '\n'
       << "kernel=" << kernel << '\n'
       << "fc_hidden=" << fc_hidden << '\n'
       << "n_classes=" << n_classes << '\n'
       << "n_mels=" << n_mels << '\n'
       << "attention_variant=" << variant_name(attention_variant) << '\n'
       << "attention_blocks=" << join(attention_blocks) << '\n'
       << "global_pool=" << (global_pool == GlobalPool::mean ? "mean" : "max") << '\n';
    return os.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    auto split = [](const std::string& v) {
      std::vector<std::size_t> out;
      std::stringstream ss(v);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoul(tok));
      return out;
    };
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("model config: malformed line '" + line + "'");
      const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
      if (k == "preset") c.preset = v;
      else if (k == "block_channels") c.block_channels = split(v);
      else if (k == "convs_per_block") c.convs_per_block = std::stoul(v);
      else if (k == "kernel") c.kernel = std::stoul(v);
      else if (k == "fc_hidden") c.fc_hidden = std::stoul(v);
      else if (k == "n_classes") c.n_classes = std::stoul(v);
      else if (k == "n_mels") c.n_mels = std::stoul(v);
      else if (k == "attention_variant") c.attention_variant = parse_variant(v);
      else if (k == "attention_blocks") {
        c.attention_blocks.clear();
        for (auto b : split(v)) c.attention_blocks.insert(static_cast<int>(b));
      } else if (k == "global_pool") {
        if (v == "mean") c.global_pool = GlobalPool::mean;
        else if (v == "max") c.global_pool = GlobalPool::max;
        else throw ValidationError("model config: unknown global_pool '" + v + "'");
      } else {
        throw ValidationError("model config: unknown key '" + k + "'");
      }
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The eleven named architectures. Appending "-small" to any of them keeps
/// the attention layout but shrinks widths for desk-scale runs.
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"CNN10",       "T-CNN10",        "S-CNN10",         "TS-CNN10-1",
                                              "TS-CNN10-2",  "TS-CNN10-3",     "TS-CNN10-4",      "TS-CNN10-fixed",
                                              "TS-CNN10",    "TS-CNN10-concat", "ST-CNN10-concat"};
  return names;
}

inline const std::vector<std::size_t> kSmallBlockChannels{8, 16, 16, 32};
inline constexpr std::size_t kSmallFcHidden = 32;

inline ModelConfig make_preset(const std::string& name, std::size_t n_classes, std::size_t n_mels = 40) {
  std::string base = name;
  bool small = false;
  if (base.size() > 6 && base.ends_with("-small")) {
    base.resize(base.size() - 6);
    small = true;
  }
  ModelConfig c;
  c.preset = name;
  c.n_classes = n_classes;
  c.n_mels = n_mels;
  const std::set<int> all{1, 2, 3, 4};
  if (base == "CNN10") {
  } else if (base == "T-CNN10") {
    c.attention_variant = AttentionVariant::temporal;
    c.attention_blocks = all;
  } else if (base == "S-CNN10") {
    c.attention_variant = AttentionVariant::spectral;
    c.attention_blocks = all;
  } else if (base == "TS-CNN10") {
    c.attention_variant = AttentionVariant::parallel_learned;
    c.attention_blocks = all;
  } else if (base == "TS-CNN10-1" || base == "TS-CNN10-2" || base == "TS-CNN10-3" || base == "TS-CNN10-4") {
    c.attention_variant = AttentionVariant::parallel_learned;
    c.attention_blocks = {base.back() - '0'};
  } else if (base == "TS-CNN10-fixed") {
    c.attention_variant = AttentionVariant::parallel_fixed;
    c.attention_blocks = all;
  } else if (base == "TS-CNN10-concat") {
    c.attention_variant = AttentionVariant::concat_ts;
    c.attention_blocks = all;
  } else if (base == "ST-CNN10-concat") {
    c.attention_variant = AttentionVariant::concat_st;
    c.attention_blocks = all;
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ValidationError("unknown preset '" + name + "'; valid presets: " + valid +
                          " (each also available with a -small suffix)");
  }
  if (small) {
    c.block_channels = kSmallBlockChannels;
    c.fc_hidden = kSmallFcHidden;
  }
  c.validate();
  return c;
}

template <typename Scalar>
struct ConvUnit {
  Parameter<Scalar> weight, bias, gamma, beta;
  BatchNormStats<Scalar> stats;
};

template <typename Scalar>
struct ConvBlock {
  std::vector<ConvUnit<Scalar>> convs;
  AttentionVariant attention = AttentionVariant::none;
  AttentionParams<Scalar> att;
  BranchCoefficients<Scalar> coeffs;
};

/// CNN10 backbone with optional per-block attention. Each block is
/// conv-BN-ReLU repeated, then attention (if configured), then 2x2 average pooling.
template <typename Scalar>
class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    build(seed);
  }

  const ModelConfig& config() const { return config_; }
  std::vector<ConvBlock<Scalar>>& blocks() { return blocks_; }
  const std::vector<ConvBlock<Scalar>>& blocks() const { return blocks_; }

  /// Learnable tensors in build order.
  std::vector<Parameter<Scalar>*> parameters() {
    std::vector<Parameter<Scalar>*> out;
    for (auto& blk : blocks_) {
      for (auto& u : blk.convs)
        for (auto* p : {&u.weight, &u.bias, &u.gamma, &u.beta}) out.push_back(p);
      if (blk.attention != AttentionVariant::none) {
        for (auto* p : {&blk.att.temporal_weight, &blk.att.temporal_bias, &blk.att.spectral_weight,
                        &blk.att.spectral_bias})
          out.push_back(p);
        if (blk.attention == AttentionVariant::parallel_learned) out.push_back(&blk.coeffs.logits);
      }
    }
    for (auto* p : {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_}) out.push_back(p);
    return out;
  }
  std::vector<const Parameter<Scalar>*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  /// Non-learnable state (BN running statistics) in build order.
  std::vector<Tensor<Scalar>*> buffers() {
    std::vector<Tensor<Scalar>*> out;
    for (auto& blk : blocks_)
      for (auto& u : blk.convs) {
        out.push_back(&u.stats.mean);
        out.push_back(&u.stats.var);
      }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Normalized fusion coefficients of every parallel-fusion block (block index is 1-based).
  std::vector<std::pair<int, std::array<Scalar, 3>>> fusion_coefficients() const {
    std::vector<std::pair<int, std::array<Scalar, 3>>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto v = blocks_[i].attention;
      if (v == AttentionVariant::parallel_learned || v == AttentionVariant::parallel_fixed)
        out.emplace_back(static_cast<int>(i + 1), blocks_[i].coeffs.normalized());
    }
    return out;
  }

  /// Runs the network on a (B, T, F, 1) or (T, F, 1) input and returns
  /// (B, n_classes) or (n_classes) logits. `block_outputs`, when given, receives each
  /// block's post-pooling activation.
  Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& input, Mode mode,
                      std::vector<Var<Scalar>>* block_outputs = nullptr) {
    auto d = MapDims::of(input.shape(), "model forward");
    if (d.channels != 1) throw ShapeError("model forward: expected single-channel input");
    if (d.freq != config_.n_mels)
      throw ShapeError("model forward: input has " + std::to_string(d.freq) + " mel bands, model expects " +
                       std::to_string(config_.n_mels));
    const std::size_t min_extent = std::size_t{1} << blocks_.size();
    if (d.time < min_extent || d.freq < min_extent)
      throw ShapeError("model forward: input " + shape_str(input.shape()) + " too small for " +
                       std::to_string(blocks_.size()) + " pooling stages");
    Var<Scalar> x = input;
    for (auto& blk : blocks_) {
      for (auto& u : blk.convs) {
        x = conv2d(x, tape.parameter(u.weight), tape.parameter(u.bias), Padding::same);
        x = batch_norm(x, tape.parameter(u.gamma), tape.parameter(u.beta), u.stats, mode);
        x = relu(x);
      }
      x = apply_attention(tape, x, blk);
      x = avg_pool2d(x);
      if (block_outputs) block_outputs->push_back(x);
    }
    x = config_.global_pool == GlobalPool::mean ? global_mean_pool(x) : global_max_pool(x);
    x = relu(dense(x, tape.parameter(fc1_w_), tape.parameter(fc1_b_)));
    return dense(x, tape.parameter(fc2_w_), tape.parameter(fc2_b_));
  }

  /// Convenience eval-mode forward on plain tensors.
  Tensor<Scalar> logits(const Tensor<Scalar>& batch) {
    Tape<Scalar> tape(false);
    return forward(tape, tape.constant(batch), Mode::eval).value();
  }

 private:
  static Var<Scalar> global_max_pool(const Var<Scalar>& input) {
    const auto d = MapDims::of(input.shape(), "global_max_pool");
    const std::size_t P = d.time * d.freq, C = d.channels;
    Tensor<Scalar> out(d.batched ? Shape{d.batch, C} : Shape{C});
    auto arg = std::make_shared<std::vector<std::size_t>>(d.batch * C, 0);
    const Scalar* x = input.value().data();
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t best = b * P * C + c;
        for (std::size_t p = 1; p < P; ++p)
          if (x[(b * P + p) * C + c] > x[best]) best = (b * P + p) * C + c;
        out[b * C + c] = x[best];
        (*arg)[b * C + c] = best;
      }
    return input.tape().record(std::move(out), {input}, [input, arg](Tape<Scalar>& t, const Tensor<Scalar>& g) {
      auto& gx = t.grad_buffer(input.id());
      for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += g[i];
    });
  }

  Var<Scalar> apply_attention(Tape<Scalar>& tape, const Var<Scalar>& U, ConvBlock<Scalar>& blk) {
    switch (blk.attention) {
      case AttentionVariant::none: return U;
      case AttentionVariant::temporal:
        return temporal_attention(U, tape.parameter(blk.att.temporal_weight), tape.parameter(blk.att.temporal_bias));
      case AttentionVariant::spectral:
        return spectral_attention(U, tape.parameter(blk.att.spectral_weight), tape.parameter(blk.att.spectral_bias));
      case AttentionVariant::parallel_learned:
      case AttentionVariant::parallel_fixed: return parallel_attention(U, blk.att, blk.coeffs);
      case AttentionVariant::concat_ts: return serial_concat(U, blk.att, SerialOrder::temporal_first);
      case AttentionVariant::concat_st: return serial_concat(U, blk.att, SerialOrder::spectral_first);
    }
    return U;
  }

  static Tensor<Scalar> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor<Scalar> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.storage()) v = static_cast<Scalar>(dist(rng));
    return t;
  }

  void build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t k = config_.kernel;
    std::size_t cin = 1;
    for (std::size_t b = 0; b < config_.block_channels.size(); ++b) {
      const std::size_t cout = config_.block_channels[b];
      const std::string prefix = "block" + std::to_string(b + 1);
      ConvBlock<Scalar> blk;
      for (std::size_t j = 0; j < config_.convs_per_block; ++j) {
        const std::string p = prefix + ".conv" + std::to_string(j + 1);
        ConvUnit<Scalar> u{{p + ".weight", he_uniform({k, k, cin, cout}, k * k * cin, rng)},
                           {p + ".bias", Tensor<Scalar>::zeros({cout})},
                           {p + ".bn.gamma", Tensor<Scalar>::full({cout}, Scalar{1})},
                           {p + ".bn.beta", Tensor<Scalar>::zeros({cout})},
                           BatchNormStats<Scalar>(cout)};
        blk.convs.push_back(std::move(u));
        cin = cout;
      }
      if (config_.attention_blocks.count(static_cast<int>(b + 1))) {
        blk.attention = config_.attention_variant;
        blk.att = {{prefix + ".att.theta_t.weight", he_uniform({1, 1, cout, 1}, cout, rng)},
                   {prefix + ".att.theta_t.bias", Tensor<Scalar>::zeros({1})},
                   {prefix + ".att.theta_f.weight", he_uniform({1, 1, cout, 1}, cout, rng)},
                   {prefix + ".att.theta_f.bias", Tensor<Scalar>::zeros({1})}};
        blk.coeffs = blk.attention == AttentionVariant::parallel_fixed
                         ? BranchCoefficients<Scalar>::fixed_equal()
                         : BranchCoefficients<Scalar>::learnable(prefix + ".att.logits");
      }
      blocks_.push_back(std::move(blk));
    }
    fc1_w_ = {"fc1.weight", he_uniform({config_.fc_hidden, cin}, cin, rng)};
    fc1_b_ = {"fc1.bias", Tensor<Scalar>::zeros({config_.fc_hidden})};
    fc2_w_ = {"fc2.weight", he_uniform({config_.n_classes, config_.fc_hidden}, config_.fc_hidden, rng)};
    fc2_b_ = {"fc2.bias", Tensor<Scalar>::zeros({config_.n_classes})};
  }

  ModelConfig config_;
  std::vector<ConvBlock<Scalar>> blocks_;
  Parameter<Scalar> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

/// Class id (lowest on ties) and softmax probabilities for one feature.
struct Prediction {
  std::size_t label = 0;
  std::vector<double> probs;
};

inline Prediction predict_from_logits(std::span<const double> logits) {
  Prediction p;
  p.probs = softmax_values<double>(logits);
  p.label = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  return p;
}

template <typename Scalar>
Prediction predict(Model<Scalar>& model, const Tensor<Scalar>& feature) {
  const auto logits = model.logits(feature);
  std::vector<double> l(logits.values().begin(), logits.values().end());
  return predict_from_logits(l);
}

// ---------------------------------------------------------------------------
// TSAM checkpoints: "TSAM", u32 version, u32 config length, config text,
// u32 tensor count, then per tensor u32 rank, u32 dims, float32 LE data.
// Tensors are the parameters in build order followed by BN running stats.

inline constexpr std::uint32_t kTsamVersion = 1;

template <typename Scalar>
void save_model(const std::filesystem::path& path, Model<Scalar>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("TSAM", 4);
  detail::put_u32(os, kTsamVersion);
  const std::string text = model.config().to_text();
  detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<const Tensor<Scalar>*> tensors;
  for (auto* p : model.parameters()) tensors.push_back(&p->value);
  for (auto* b : model.buffers()) tensors.push_back(b);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto* t : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(t->rank()));
    for (auto dim : t->shape()) detail::put_u32(os, static_cast<std::uint32_t>(dim));
    for (auto v : t->values()) detail::put_f32(os, static_cast<float>(v));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

template <typename Scalar>
Model<Scalar> load_model(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  const std::string name = path.string();
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw IoError(name + ": truncated checkpoint");
  };
  auto u32 = [&] {
    need(4);
    auto v = detail::read_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), "TSAM", 4) != 0) throw IoError(name + ": not a TSAM checkpoint (bad magic)");
  pos = 4;
  const auto version = u32();
  if (version != kTsamVersion) throw IoError(name + ": unsupported checkpoint version " + std::to_string(version));
  const auto text_len = u32();
  need(text_len);
  const std::string text(reinterpret_cast<const char*>(bytes.data() + pos), text_len);
  pos += text_len;
  Model<Scalar> model(ModelConfig::from_text(text));
  std::vector<Tensor<Scalar>*> tensors;
  for (auto* p : model.parameters()) tensors.push_back(&p->value);
  for (auto* b : model.buffers()) tensors.push_back(b);
  const auto count = u32();
  if (count != tensors.size())
    throw IoError(name + ": checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                  std::to_string(tensors.size()));
  for (auto* t : tensors) {
    const auto rank = u32();
    Shape shape(rank);
    for (auto& dim : shape) dim = u32();
    if (shape != t->shape())
      throw IoError(name + ": tensor shape " + shape_str(shape) + " does not match config " + shape_str(t->shape()));
    need(4 * t->size());
    for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<Scalar>(detail::read_f32(bytes.data() + pos + 4 * i));
    pos += 4 * t->size();
  }
  if (pos != bytes.size()) throw IoError(name + ": trailing bytes after checkpoint payload");
  return model;
}

/// Loads a checkpoint and checks it was built from `expected`.
template <typename Scalar>
Model<Scalar> load_model(const std::filesystem::path& path, const ModelConfig& expected) {
  auto m = load_model<Scalar>(path);
  if (!(m.config() == expected))
    throw ValidationError(path.string() + ": checkpoint config does not match the requested model");
  return m;
}

}  // namespace tsattn
