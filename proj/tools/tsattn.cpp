// tsattn command-line tool: featurize, train, evaluate, noise-eval,
// dump-maps, gradcheck, synth-dataset.
//
// Exit codes: 0 success, 1 invalid flags or data, 2 file I/O, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsattn/gradcheck_suite.hpp"
#include "tsattn/robustness.hpp"
#include "tsattn/synth.hpp"
#include "tsattn/training.hpp"

namespace fs = std::filesystem;
using namespace tsattn;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;
constexpr double kGradTolerance = 1e-4;

struct FrontendFlags {
  double clip_seconds = 5.0;
  int sample_rate = 44100;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--clip-seconds", clip_seconds, "Clip length after padding/cropping")->capture_default_str();
    cmd->add_option("--sample-rate", sample_rate, "Analysis sample rate in Hz")->capture_default_str();
  }

  FrontendConfig config() const {
    if (!(clip_seconds > 0) || !std::isfinite(clip_seconds))
      throw ValidationError("--clip-seconds must be positive");
    if (sample_rate < 8000) throw ValidationError("--sample-rate must be at least 8000");
    FrontendConfig c;
    c.clip_seconds = clip_seconds;
    c.sample_rate = sample_rate;
    if (expected_frames(c) < 16) throw ValidationError("--clip-seconds too short for the 4-block network");
    return c;
  }
};

void require_file(const fs::path& p, const std::string& flag) {
  if (p.empty()) throw ValidationError(flag + " is required");
  if (!fs::is_regular_file(p)) throw IoError(flag + ": no such file " + p.string());
}

Manifest select_fold(const Manifest& m, int fold) { return fold > 0 ? m.fold(fold) : m; }

void print_fusion(const Model<float>& model) {
  for (const auto& [block, c] : model.fusion_coefficients())
    std::cout << "block " << block << " fusion alpha=" << c[0] << " beta=" << c[1] << " gamma=" << c[2] << '\n';
}

Tensor<float> load_input_feature(const fs::path& input, const FrontendConfig& fc) {
  require_file(input, "--input");
  if (input.extension() == ".tsfa") {
    auto g = read_tsfa(input);
    return g.rank() == 2 ? g.reshaped({g.dim(0), g.dim(1), 1}) : g;
  }
  return featurize(load_wav(input), fc).values;
}

// ---------------------------------------------------------------------------

struct FeaturizeCmd {
  fs::path manifest, out_dir;
  FrontendFlags fe;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("featurize", "Cache one log-mel feature (.tsfa) per manifest clip");
    c->add_option("--manifest", manifest, "Manifest CSV (path,label,fold)")->required();
    c->add_option("--out-dir", out_dir, "Feature cache directory")->required();
    fe.add_to(c);
    cmd = c;
  }

  int run() {
    const auto cfg = fe.config();
    require_file(manifest, "--manifest");
    const auto m = read_manifest(manifest);
    fs::create_directories(out_dir);
    std::size_t written = 0, skipped = 0, failed = 0;
    for (const auto& e : m.entries) {
      const auto out = feature_cache_path(out_dir, e.path);
      try {
        if (!fs::exists(e.path)) throw IoError("missing audio file " + e.path.string());
        if (fs::exists(out) && fs::last_write_time(out) >= fs::last_write_time(e.path)) {
          const auto g = read_tsfa(out);
          if (g.dim(0) == expected_frames(cfg) && g.dim(1) == cfg.n_mels) {
            ++skipped;
            continue;
          }
        }
        write_tsfa(out, featurize(load_wav(e.path), cfg).values);
        ++written;
      } catch (const std::exception& ex) {
        std::cerr << "featurize: " << e.path.string() << ": " << ex.what() << '\n';
        ++failed;
      }
    }
    std::cout << "featurized " << written << ", up to date " << skipped << ", failed " << failed << '\n';
    return failed ? kExitIo : 0;
  }

  CLI::App* cmd = nullptr;
};

struct SynthCmd {
  fs::path out_dir;
  SynthConfig cfg;
  std::uint64_t* seed = nullptr;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("synth-dataset", "Generate a labelled synthetic WAV dataset with a manifest");
    c->add_option("--out-dir", out_dir, "Output directory")->required();
    c->add_option("--n-per-class", cfg.n_per_class, "Clips per class")->capture_default_str();
    c->add_option("--classes", cfg.classes, "Number of classes")->capture_default_str();
    c->add_option("--seconds", cfg.seconds, "Clip length in seconds")->capture_default_str();
    c->add_option("--sample-rate", cfg.sample_rate, "Sample rate in Hz")->capture_default_str();
    c->add_option("--eval-fraction", cfg.eval_fraction, "Share of each class in fold 2")->capture_default_str();
    c->add_option("--burst-probability", cfg.burst_probability, "Chance of a broadband burst per clip")
        ->capture_default_str();
    cmd = c;
  }

  int run() {
    cfg.seed = *seed;
    cfg.validate();
    const auto m = synth_dataset(out_dir, cfg);
    std::cout << "wrote " << m.entries.size() << " clips and " << (out_dir / "manifest.csv").string() << '\n';
    return 0;
  }

  CLI::App* cmd = nullptr;
};

struct TrainCmd {
  fs::path manifest, out, config_file, features;
  std::string preset = "TS-CNN10";
  int eval_fold = 0;
  FrontendFlags fe;
  std::vector<std::pair<std::string, std::optional<std::string>>> overrides;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train a model on the manifest (all folds except --eval-fold)");
    c->add_option("--manifest", manifest, "Manifest CSV")->required();
    c->add_option("--out", out, "Output directory for model.tsam, metrics.csv and train.cfg")->required();
    c->add_option("--preset", preset, "Model preset")->capture_default_str();
    c->add_option("--eval-fold", eval_fold, "Fold held out for evaluation (0: none)")->capture_default_str();
    c->add_option("--config", config_file, "key=value training config applied before flag overrides");
    c->add_option("--features", features, "Feature cache directory from `featurize`");
    fe.add_to(c);
    for (const char* key : {"lr0", "decay", "decay_every", "batch_size", "max_iters", "mixup_alpha", "time_masks",
                            "max_time_width", "freq_masks", "max_freq_width", "eval_every"}) {
      overrides.emplace_back(key, std::nullopt);
    }
    for (auto& [key, value] : overrides) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      c->add_option(flag, value, "Training config '" + key + "'");
    }
    cmd = c;
  }

  int run() {
    const auto fc = fe.config();
    TrainConfig cfg;
    if (!config_file.empty()) {
      require_file(config_file, "--config");
      cfg = TrainConfig::from_file(config_file);
    }
    for (const auto& [key, value] : overrides)
      if (value) cfg.set(key, *value, "--" + key);
    cfg.seed = *seed;
    cfg.validate();
    if (eval_fold < 0) throw ValidationError("--eval-fold must be >= 0");
    make_preset(preset, 2, fc.n_mels);
    require_file(manifest, "--manifest");
    const auto m = read_manifest(manifest);
    const auto mc = make_preset(preset, m.n_classes(), fc.n_mels);
    const auto train_clips = eval_fold > 0 ? m.excluding_fold(eval_fold) : m;
    if (train_clips.entries.empty()) throw ValidationError("no training clips outside fold " + std::to_string(eval_fold));
    std::optional<fs::path> cache;
    if (!features.empty()) cache = features;

    const auto train_set = load_features(train_clips, fc, cache);
    std::optional<FeatureSet> eval_set;
    if (eval_fold > 0) {
      eval_set = load_features(m.fold(eval_fold), fc, cache);
      if (eval_set->empty()) throw ValidationError("fold " + std::to_string(eval_fold) + " is empty");
    }

    Model<float> model(mc, *seed);
    std::cout << "training " << preset << " on " << train_set.size() << " clips for " << cfg.max_iters
              << " iterations\n";
    const auto rows = train(model, train_set, eval_set ? &*eval_set : nullptr, cfg, [](const MetricsRow& r) {
      if (r.train_acc) {
        std::cout << "iter " << r.iter << " loss " << r.loss << " train_acc " << *r.train_acc;
        if (r.eval_acc) std::cout << " eval_acc " << *r.eval_acc;
        std::cout << '\n';
      }
    });
    fs::create_directories(out);
    save_model(out / "model.tsam", model);
    write_metrics_csv(out / "metrics.csv", rows);
    std::ofstream(out / "train.cfg") << cfg.to_text();
    print_fusion(model);
    std::cout << "saved " << (out / "model.tsam").string() << '\n';
    return 0;
  }

  std::uint64_t* seed = nullptr;
  CLI::App* cmd = nullptr;
};

struct EvaluateCmd {
  fs::path model_path, manifest, report;
  int fold = 0;
  FrontendFlags fe;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("evaluate", "Clean accuracy of a checkpoint over a manifest");
    c->add_option("--model", model_path, "Checkpoint (.tsam)")->required();
    c->add_option("--manifest", manifest, "Manifest CSV")->required();
    c->add_option("--fold", fold, "Only evaluate this fold (0: all)")->capture_default_str();
    c->add_option("--out", report, "Append a noise_kind,snr_db,model,accuracy row to this CSV");
    fe.add_to(c);
    cmd = c;
  }

  int run() {
    const auto fc = fe.config();
    if (fold < 0) throw ValidationError("--fold must be >= 0");
    require_file(model_path, "--model");
    require_file(manifest, "--manifest");
    auto model = load_model<float>(model_path);
    const auto clips = select_fold(read_manifest(manifest), fold);
    const auto r = evaluate(model, clips, fc);
    std::cout << "accuracy " << r.accuracy << " (" << r.correct << "/" << r.total << ")\n";
    for (std::size_t k = 0; k < r.class_total.size(); ++k)
      std::cout << "class " << k << " " << r.class_correct[k] << "/" << r.class_total[k] << '\n';
    print_fusion(model);
    if (!report.empty()) write_report_csv(report, {{"none", kNoNoise, model.config().preset, r.accuracy}}, true);
    return 0;
  }

  CLI::App* cmd = nullptr;
};

struct NoiseEvalCmd {
  fs::path model_path, manifest, report, noise_clip;
  std::string kind = "gaussian", snr = "0", name;
  int fold = 0;
  FrontendFlags fe;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("noise-eval", "Accuracy with noise mixed in at a given SNR; prints one CSV row");
    c->add_option("--model", model_path, "Checkpoint (.tsam)")->required();
    c->add_option("--manifest", manifest, "Manifest CSV")->required();
    c->add_option("--fold", fold, "Only evaluate this fold (0: all)")->capture_default_str();
    c->add_option("--kind", kind, "gaussian or external")->capture_default_str();
    c->add_option("--snr", snr, "SNR in dB, or inf for clean")->capture_default_str();
    c->add_option("--noise-clip", noise_clip, "Noise WAV for --kind external");
    c->add_option("--name", name, "Model column in the report (default: checkpoint preset)");
    c->add_option("--out", report, "Also append the row to this CSV report");
    fe.add_to(c);
    cmd = c;
  }

  int run() {
    const auto fc = fe.config();
    if (fold < 0) throw ValidationError("--fold must be >= 0");
    NoiseSpec spec;
    spec.kind = parse_noise_kind(kind);
    if (snr == "inf" || snr == "+inf") {
      spec.snr_db = kNoNoise;
    } else {
      std::size_t used = 0;
      try {
        spec.snr_db = std::stod(snr, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != snr.size() || !std::isfinite(spec.snr_db))
        throw ValidationError("--snr expects a number of dB or inf, got '" + snr + "'");
    }
    if (!noise_clip.empty()) spec.source_path = noise_clip;
    spec.validate();
    if (spec.source_path) require_file(*spec.source_path, "--noise-clip");
    require_file(model_path, "--model");
    require_file(manifest, "--manifest");
    auto model = load_model<float>(model_path);
    const auto clips = select_fold(read_manifest(manifest), fold);
    const auto r = evaluate(model, clips, fc, spec, *seed);
    const ReportRow row{noise_kind_name(spec.kind), spec.snr_db, name.empty() ? model.config().preset : name,
                        r.accuracy};
    std::ostringstream line;
    line << std::setprecision(9) << row.noise_kind << ',';
    if (row.snr_db == kNoNoise)
      line << "inf";
    else
      line << row.snr_db;
    line << ',' << row.model << ',' << row.accuracy;
    std::cout << line.str() << '\n';
    if (!report.empty()) write_report_csv(report, {row}, true);
    return 0;
  }

  std::uint64_t* seed = nullptr;
  CLI::App* cmd = nullptr;
};

struct DumpMapsCmd {
  fs::path model_path, input, out;
  int block = 1;
  std::string mask_axis;
  std::size_t mask_start = 0, mask_end = 0;
  FrontendFlags fe;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("dump-maps", "Write the channel-averaged activation map of one block");
    c->add_option("--model", model_path, "Checkpoint (.tsam)")->required();
    c->add_option("--input", input, "WAV clip or .tsfa feature")->required();
    c->add_option("--block", block, "Block index 1..4")->capture_default_str();
    c->add_option("--out", out, "Output map (.tsfa); a .csv twin is written beside it")->required();
    c->add_option("--mask-axis", mask_axis, "time or frequency: also dump a map with Gaussian stripe noise");
    c->add_option("--mask-start", mask_start, "First masked frame/band (inclusive)");
    c->add_option("--mask-end", mask_end, "Last masked frame/band (inclusive)");
    fe.add_to(c);
    cmd = c;
  }

  int run() {
    const auto fc = fe.config();
    if (block < 1 || block > 4) throw ValidationError("--block must be in 1..4");
    std::optional<RegionMask> mask;
    if (!mask_axis.empty()) {
      if (mask_axis != "time" && mask_axis != "frequency")
        throw ValidationError("--mask-axis must be time or frequency");
      mask = RegionMask{mask_axis == "time" ? Axis::time : Axis::frequency, mask_start, mask_end};
    }
    require_file(model_path, "--model");
    auto model = load_model<float>(model_path);
    const auto feat = load_input_feature(input, fc);
    if (mask) mask->validate(mask->axis == Axis::time ? feat.dim(0) : feat.dim(1));
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    const auto clean = dump_feature_maps(model, feat, block, out);
    std::cout << "block " << block << " map " << clean.dim(0) << "x" << clean.dim(1) << " -> " << out.string() << '\n';
    if (mask) {
      std::mt19937_64 rng(*seed);
      auto noisy_path = out;
      noisy_path.replace_filename(out.stem().string() + "_noisy" + out.extension().string());
      const auto noisy = dump_feature_maps(model, mask_region_noise(feat, *mask, rng), block, noisy_path);
      std::cout << "noisy map -> " << noisy_path.string() << "\nsuppression_ratio "
                << suppression_ratio(clean, noisy, map_mask_to_grid(*mask, block)) << '\n';
    }
    return 0;
  }

  std::uint64_t* seed = nullptr;
  CLI::App* cmd = nullptr;
};

struct GradcheckCmd {
  std::string op = "all";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient check of one operation (or all)");
    c->add_option("--op", op, "Operation name or 'all'")->capture_default_str();
    cmd = c;
  }

  int run() {
    auto checks = op_checks(*seed);
    if (op != "all") {
      std::erase_if(checks, [&](const OpCheck& c) { return c.name != op; });
      if (checks.empty()) {
        std::string valid;
        for (const auto& n : op_check_names()) valid += " " + n;
        throw ValidationError("unknown op '" + op + "'; valid ops: all" + valid);
      }
    }
    bool ok = true;
    for (const auto& c : checks) {
      const auto r = c.run();
      const bool pass = r.max_rel_error < kGradTolerance;
      ok = ok && pass;
      std::cout << c.name << " max_rel_error " << std::setprecision(3) << std::scientific << r.max_rel_error
                << std::defaultfloat << (pass ? " ok" : " FAILED at " + r.worst) << '\n';
    }
    return ok ? 0 : kExitNumeric;
  }

  std::uint64_t* seed = nullptr;
  CLI::App* cmd = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal-spectral attention audio classifier toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name
  std::uint64_t seed = 0;
  std::optional<int> threads;
  app.add_option("--seed", seed, "Seed for every random draw")->capture_default_str();
  app.add_option("--threads", threads, "Worker thread cap (default: TSATTN_THREADS or 1)");

  FeaturizeCmd featurize_cmd;
  SynthCmd synth_cmd;
  TrainCmd train_cmd;
  EvaluateCmd evaluate_cmd;
  NoiseEvalCmd noise_cmd;
  DumpMapsCmd dump_cmd;
  GradcheckCmd grad_cmd;
  synth_cmd.seed = train_cmd.seed = noise_cmd.seed = dump_cmd.seed = grad_cmd.seed = &seed;
  featurize_cmd.add(app);
  synth_cmd.add(app);
  train_cmd.add(app);
  evaluate_cmd.add(app);
  noise_cmd.add(app);
  dump_cmd.add(app);
  grad_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (threads) {
      if (*threads < 1) throw ValidationError("--threads must be at least 1");
      set_thread_count(static_cast<unsigned>(*threads));
    }
    if (featurize_cmd.cmd->parsed()) return featurize_cmd.run();
    if (synth_cmd.cmd->parsed()) return synth_cmd.run();
    if (train_cmd.cmd->parsed()) return train_cmd.run();
    if (evaluate_cmd.cmd->parsed()) return evaluate_cmd.run();
    if (noise_cmd.cmd->parsed()) return noise_cmd.run();
    if (dump_cmd.cmd->parsed()) return dump_cmd.run();
    if (grad_cmd.cmd->parsed()) return grad_cmd.run();
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitValidation;
}
