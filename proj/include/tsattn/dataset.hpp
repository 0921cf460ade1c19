#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "audio.hpp"

namespace tsattn {

struct ManifestEntry {
  std::filesystem::path path;  // resolved against the manifest's directory
  std::size_t label = 0;
  int fold = 0;
};

/// Rows of a `path,label,fold` CSV.
struct Manifest {
  std::vector<ManifestEntry> entries;

  std::size_t n_classes() const {
    std::size_t k = 0;
    for (const auto& e : entries) k = std::max(k, e.label + 1);
    return k;
  }

  Manifest fold(int f) const {
    Manifest m;
    for (const auto& e : entries)
      if (e.fold == f) m.entries.push_back(e);
    return m;
  }

  Manifest excluding_fold(int f) const {
    Manifest m;
    for (const auto& e : entries)
      if (e.fold != f) m.entries.push_back(e);
    return m;
  }

  std::set<int> folds() const {
    std::set<int> out;
    for (const auto& e : entries) out.insert(e.fold);
    return out;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ValidationError(what + ": expected an integer, got '" + s + "'");
  if constexpr (std::is_unsigned_v<Int>)
    if (v < 0) throw ValidationError(what + ": must be non-negative, got " + s);
  return static_cast<Int>(v);
}

}  // namespace detail

/// Parses a manifest. The last two comma-separated fields are label and fold,
/// so paths may themselves contain commas.
inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    if (!header) {
      if (line != "path,label,fold")
        throw ValidationError(path.string() + ": expected header 'path,label,fold', got '" + line + "'");
      header = true;
      continue;
    }
    const auto c2 = line.rfind(',');
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : line.rfind(',', c2 - 1);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (c1 == std::string::npos) throw ValidationError(where + ": expected 'path,label,fold'");
    ManifestEntry e;
    const std::filesystem::path p = detail::trim(line.substr(0, c1));
    if (p.empty()) throw ValidationError(where + ": empty path");
    e.path = p.is_absolute() ? p : base / p;
    e.label = detail::parse_int<std::size_t>(detail::trim(line.substr(c1 + 1, c2 - c1 - 1)), where + " label");
    e.fold = detail::parse_int<int>(detail::trim(line.substr(c2 + 1)), where + " fold");
    m.entries.push_back(std::move(e));
  }
  if (!header) throw ValidationError(path.string() + ": empty manifest");
  return m;
}

/// Writes a manifest with paths relative to its own directory where possible.
inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  os << "path,label,fold\n";
  for (const auto& e : m.entries) {
    auto rel = base.empty() ? e.path : e.path.lexically_relative(base);
    if (rel.empty() || *rel.begin() == "..") rel = e.path;
    os << rel.generic_string() << ',' << e.label << ',' << e.fold << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

/// Features with integer labels, in manifest order.
struct FeatureSet {
  std::vector<Tensor<float>> features;  // each T x F x 1
  std::vector<std::size_t> labels;
  std::vector<std::filesystem::path> sources;

  std::size_t size() const { return features.size(); }
  bool empty() const { return features.empty(); }
};

/// Cache file name for a clip: `<clip-stem>.tsfa`.
inline std::filesystem::path feature_cache_path(const std::filesystem::path& cache_dir,
                                                const std::filesystem::path& clip) {
  return cache_dir / (clip.stem().string() + ".tsfa");
}

/// Loads each clip's feature from the cache when present and well-formed,
/// otherwise featurizes the audio.
inline FeatureSet load_features(const Manifest& m, const FrontendConfig& cfg,
                                const std::optional<std::filesystem::path>& cache_dir = std::nullopt) {
  FeatureSet set;
  const std::size_t T = expected_frames(cfg);
  for (const auto& e : m.entries) {
    std::optional<Tensor<float>> feat;
    if (cache_dir) {
      const auto cached = feature_cache_path(*cache_dir, e.path);
      if (std::filesystem::exists(cached)) {
        auto g = read_tsfa(cached);
        if (g.dim(0) == T && g.dim(1) == cfg.n_mels) feat = std::move(g);
      }
    }
    if (!feat) feat = featurize(load_wav(e.path), cfg).values;
    set.features.push_back(std::move(*feat));
    set.labels.push_back(e.label);
    set.sources.push_back(e.path);
  }
  return set;
}

}  // namespace tsattn
