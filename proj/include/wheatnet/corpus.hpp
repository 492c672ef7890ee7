#pragma once

// Corpus manifests, synthetic wheat-field scenes and train/test splitting.
//
// Manifest JSON:
//   {"split": "train", "images": [{"image_id": "...", "image_path": "images/a.png",
//     "width": 1024, "height": 1024, "points": [[x, y], ...]}, ...]}
// image_path is resolved relative to the manifest's directory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wheatnet/augment.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/groundtruth.hpp"
#include "wheatnet/image.hpp"
#include "wheatnet/io.hpp"

namespace wheatnet {

struct ManifestEntry {
  std::string image_path;  // as written in the manifest
  PointAnnotationSet annotations;
};

struct CorpusManifest {
  std::string split = "all";
  std::vector<ManifestEntry> images;
  std::filesystem::path base_dir;  // directory the manifest was read from

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.image_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"split", split}, {"images", nlohmann::json::array()}};
    for (const auto& e : images) {
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& p : e.annotations.points) pts.push_back({p.x, p.y});
      j["images"].push_back({{"image_id", e.annotations.image_id},
                             {"image_path", e.image_path},
                             {"width", e.annotations.width},
                             {"height", e.annotations.height},
                             {"points", pts}});
    }
    return j;
  }

  /// Every referenced image must exist and every point must lie inside its image.
  void validate(bool check_files = true) const {
    for (const auto& e : images) {
      e.annotations.validate();
      if (check_files && !std::filesystem::exists(resolve(e))) {
        throw DataError("manifest: image '" + resolve(e).string() + "' does not exist");
      }
    }
  }

  AnnotationTable annotation_table() const {
    AnnotationTable t;
    for (const auto& e : images) t[e.annotations.image_id] = e.annotations.points;
    return t;
  }
};

inline CorpusManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir,
                                     const std::string& what = "manifest") {
  CorpusManifest m;
  m.base_dir = base_dir;
  try {
    const auto j = nlohmann::json::parse(text);
    m.split = j.value("split", std::string("all"));
    for (const auto& e : j.at("images")) {
      ManifestEntry entry;
      entry.image_path = e.value("image_path", std::string());
      entry.annotations.image_id = e.at("image_id").get<std::string>();
      entry.annotations.width = e.at("width").get<int>();
      entry.annotations.height = e.at("height").get<int>();
      for (const auto& p : e.value("points", nlohmann::json::array())) {
        entry.annotations.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
      m.images.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": " + e.what());
  }
  return m;
}

inline CorpusManifest read_manifest(const std::string& path, bool check_files = true) {
  CorpusManifest m = parse_manifest(read_file(path), std::filesystem::path(path).parent_path(), path);
  m.validate(check_files);
  return m;
}

inline void write_manifest(const std::string& path, const CorpusManifest& m) {
  write_file(path, m.to_json().dump(1) + "\n");
}

/// Builds a manifest from a folder of images plus an annotation CSV/JSON;
/// image sizes come from the image files themselves.
inline CorpusManifest manifest_from_annotations(const AnnotationTable& table, const std::filesystem::path& image_dir,
                                                const std::string& extension = ".png") {
  CorpusManifest m;
  m.base_dir = image_dir;
  for (const auto& [id, pts] : table) {
    const std::string rel = id + extension;
    const Image im = read_png((image_dir / rel).string());
    m.images.push_back({rel, {id, im.width(), im.height(), pts}});
  }
  m.validate();
  return m;
}

/// Loads pixels for every entry; image size must match the manifest.
inline std::vector<AnnotatedImage> load_corpus(const CorpusManifest& m) {
  std::vector<AnnotatedImage> out;
  out.reserve(m.images.size());
  for (const auto& e : m.images) {
    Image im = read_png(m.resolve(e).string());
    if (im.width() != e.annotations.width || im.height() != e.annotations.height) {
      throw DataError("manifest: '" + e.annotations.image_id + "' is " + std::to_string(im.width()) + "x" +
                      std::to_string(im.height()) + " on disk, manifest says " +
                      std::to_string(e.annotations.width) + "x" + std::to_string(e.annotations.height));
    }
    out.push_back({std::move(im), e.annotations});
  }
  return out;
}

// ---------------------------------------------------------------- synthetic scenes

struct SyntheticScene {
  Image image;  // empty when generated without pixels
  PointAnnotationSet annotations;
};

struct SyntheticParams {
  int heads_min = 1;
  int heads_max = 116;
  int size = 1024;
  bool render = true;
};

inline double head_radius(int size) { return std::clamp(size / 64.0, 3.0, 10.0); }

namespace detail {

template <class Rng>
void render_scene(SyntheticScene& scene, double radius, Rng& rng) {
  const int S = scene.annotations.width;
  Image& im = scene.image;
  im = Image(S, S);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Low-frequency soil/leaf texture from a few random plane waves.
  struct Wave { double fx, fy, phase, amp; };
  std::vector<Wave> waves;
  for (int k = 0; k < 6; ++k) {
    waves.push_back({(u01(rng) - 0.5) * 0.08, (u01(rng) - 0.5) * 0.08, u01(rng) * 6.283185307179586, 0.03 + 0.04 * u01(rng)});
  }
  const double base[3] = {0.22 + 0.1 * u01(rng), 0.32 + 0.12 * u01(rng), 0.12 + 0.06 * u01(rng)};
  std::normal_distribution<double> grain(0.0, 0.015);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double t = 0.0;
      for (const auto& w : waves) t += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = std::clamp(base[c] + t + grain(rng), 0.0, 1.0);
    }
  for (const Point& p : scene.annotations.points) {
    const double a = radius * (0.9 + 0.4 * u01(rng));
    const double b = a * (0.45 + 0.15 * u01(rng));
    const double theta = u01(rng) * std::numbers::pi;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double color[3] = {0.78 + 0.12 * u01(rng), 0.68 + 0.12 * u01(rng), 0.30 + 0.15 * u01(rng)};
    const int r = static_cast<int>(std::ceil(a)) + 1;
    const int cx = round_half_up(p.x), cy = round_half_up(p.y);
    for (int y = std::max(0, cy - r); y <= std::min(S - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(S - 1, cx + r); ++x) {
        const double dx = x - p.x, dy = y - p.y;
        const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
        const double q = u * u + v * v;
        const double alpha = std::clamp((1.0 - q) * 3.0, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        const double shade = 1.0 + 0.15 * (1.0 - q);
        for (int c = 0; c < 3; ++c) {
          const double target = std::min(1.0, color[c] * shade);
          im.at(y, x, c) = im.at(y, x, c) * (1.0 - alpha) + target * alpha;
        }
      }
  }
}

}  // namespace detail

/// Procedural scenes with known head centres. Each image holds a uniform
/// number of heads in [heads_min, heads_max]; centres keep a best-effort
/// minimum spacing. Throws DataError when the heads cannot fit.
template <class Rng>
std::vector<SyntheticScene> generate_synthetic(int n_images, const SyntheticParams& params, Rng& rng) {
  if (n_images < 0) throw std::invalid_argument("generate_synthetic: n_images must be >= 0");
  if (params.heads_min < 0 || params.heads_max < params.heads_min) {
    throw std::invalid_argument("generate_synthetic: need 0 <= heads_min <= heads_max");
  }
  if (params.size < 1) throw std::invalid_argument("generate_synthetic: size must be >= 1");
  const double radius = head_radius(params.size);
  const double area = static_cast<double>(params.size) * params.size;
  if (params.heads_max * (2.0 * radius) * (2.0 * radius) > 0.5 * area) {
    throw DataError("generate_synthetic: " + std::to_string(params.heads_max) + " heads of radius " +
                    std::to_string(radius) + " px cannot be packed into " + std::to_string(params.size) + "x" +
                    std::to_string(params.size));
  }
  const double min_dist = 1.5 * radius;
  std::vector<SyntheticScene> scenes;
  scenes.reserve(static_cast<std::size_t>(n_images));
  std::uniform_int_distribution<int> count_dist(params.heads_min, params.heads_max);
  std::uniform_real_distribution<double> coord(0.0, static_cast<double>(params.size));
  for (int i = 0; i < n_images; ++i) {
    SyntheticScene scene;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d", i);
    scene.annotations = {id, params.size, params.size, {}};
    const int heads = count_dist(rng);
    auto& pts = scene.annotations.points;
    for (int h = 0; h < heads; ++h) {
      Point best{};
      for (int attempt = 0; attempt < 64; ++attempt) {
        best = {coord(rng), coord(rng)};
        const bool clear = std::none_of(pts.begin(), pts.end(), [&](const Point& q) {
          return std::hypot(q.x - best.x, q.y - best.y) < min_dist;
        });
        if (clear) break;
      }
      pts.push_back(best);
    }
    if (params.render) detail::render_scene(scene, radius, rng);
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

/// Seeded shuffle into (train, test) with ceil(n * test_fraction) test items.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_corpus(const std::vector<T>& items, double test_fraction,
                                                       std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_corpus: test fraction must be in (0, 1)");
  }
  const auto n = items.size();
  const auto n_test = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * test_fraction - 1e-9));
  if (n_test == 0 || n_test >= n) {
    throw DataError("split_corpus: " + std::to_string(n) + " items cannot be split into non-empty train and test sets");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(derive_seed(seed, 0x7E57));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t k = 0; k < n; ++k) (k < n_test ? out.second : out.first).push_back(items[idx[k]]);
  return out;
}

/// FNV-1a over ids, points and pixels; stable for a fixed seed.
inline std::uint64_t corpus_hash(const std::vector<SyntheticScene>& scenes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : scenes) {
    feed(s.annotations.image_id.data(), s.annotations.image_id.size());
    feed(s.annotations.points.data(), s.annotations.points.size() * sizeof(Point));
    feed(s.image.data().data(), s.image.data().size() * sizeof(double));
  }
  return h;
}

}  // namespace wheatnet
