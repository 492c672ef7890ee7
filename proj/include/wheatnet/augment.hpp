#pragma once

// Training-patch generation: scale pyramid, random crops, flips and additive
// Gaussian noise. Ground truth is always regenerated from the transformed
// points so every patch keeps exact count conservation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "wheatnet/errors.hpp"
#include "wheatnet/groundtruth.hpp"
#include "wheatnet/image.hpp"

namespace wheatnet {

struct AugmentParams {
  std::vector<double> scales{0.4, 0.6, 0.8, 1.0};
  int patch_size = 300;
  int crops_per_scale = 9;
  double flip_prob = 0.5;
  double noise_prob = 0.5;
  double noise_std = 0.01;
  SigmaParams sigma;
};

/// splitmix64 finalizer, used to derive independent per-patch seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return mix_seed(mix_seed(master) ^ (stream * 0xD1B54A32D192ED03ULL + 1));
}

inline int scaled_extent(int extent, double scale) {
  return static_cast<int>(std::lround(extent * scale));
}

inline bool scale_applicable(int width, int height, double scale, int patch_size) {
  return scaled_extent(width, scale) >= patch_size && scaled_extent(height, scale) >= patch_size;
}

/// Multiplies coordinates by `scale`; results are kept inside [0, extent).
inline PointAnnotationSet scale_annotations(const PointAnnotationSet& ann, double scale) {
  PointAnnotationSet out;
  out.image_id = ann.image_id;
  out.width = scaled_extent(ann.width, scale);
  out.height = scaled_extent(ann.height, scale);
  out.points.reserve(ann.points.size());
  const double xmax = std::nextafter(static_cast<double>(out.width), 0.0);
  const double ymax = std::nextafter(static_cast<double>(out.height), 0.0);
  for (const Point& p : ann.points) {
    out.points.push_back({std::clamp(p.x * scale, 0.0, xmax), std::clamp(p.y * scale, 0.0, ymax)});
  }
  return out;
}

struct PyramidLevel {
  double scale = 1.0;
  Image image;
  PointAnnotationSet annotations;
};

/// Resized copies at each configured scale. Scales that would leave a side
/// shorter than the patch size are skipped with a warning.
inline std::vector<PyramidLevel> build_pyramid(const Image& image, const PointAnnotationSet& ann,
                                               const AugmentParams& params = {},
                                               std::ostream* warnings = &std::cerr) {
  std::vector<PyramidLevel> levels;
  for (double s : params.scales) {
    if (!scale_applicable(image.width(), image.height(), s, params.patch_size)) {
      if (warnings) {
        *warnings << "warning: skipping scale " << s << " for '" << ann.image_id << "' ("
                  << scaled_extent(image.width(), s) << "x" << scaled_extent(image.height(), s)
                  << " is smaller than the " << params.patch_size << " px patch)\n";
      }
      continue;
    }
    PyramidLevel level;
    level.scale = s;
    if (s == 1.0) {
      level.image = image;
      level.annotations = ann;
    } else {
      level.image = resize_bilinear(image, scaled_extent(image.height(), s), scaled_extent(image.width(), s));
      level.annotations = scale_annotations(ann, s);
    }
    levels.push_back(std::move(level));
  }
  return levels;
}

struct PatchProvenance {
  std::string image_id;
  double scale = 1.0;
  int crop_x = 0;
  int crop_y = 0;
  bool flipped = false;
  bool noised = false;
  std::uint64_t noise_seed = 0;
};

struct TrainingPatch {
  Image image;
  DensityMap density_gt;
  LocalizationMap loc_gt;
  std::vector<Point> points;  // in patch coordinates
  PatchProvenance provenance;
};

/// Points inside the half-open window [x0, x0+size) x [y0, y0+size), shifted
/// into window coordinates.
inline std::vector<Point> points_in_window(const std::vector<Point>& points, int x0, int y0, int size) {
  std::vector<Point> kept;
  for (const Point& p : points) {
    if (p.x >= x0 && p.x < x0 + size && p.y >= y0 && p.y < y0 + size) kept.push_back({p.x - x0, p.y - y0});
  }
  return kept;
}

inline TrainingPatch crop_patch(const Image& image, const PointAnnotationSet& ann, int x0, int y0,
                                int size, const SigmaParams& sigma = {}) {
  if (image.width() < size || image.height() < size) {
    throw ShapeError("random_crop: image " + std::to_string(image.width()) + "x" +
                     std::to_string(image.height()) + " is smaller than the " + std::to_string(size) +
                     " px patch");
  }
  TrainingPatch patch;
  patch.image = crop(image, y0, x0, size, size);
  PointAnnotationSet local{ann.image_id, size, size, points_in_window(ann.points, x0, y0, size)};
  patch.density_gt = density_map(local, sigma);
  patch.loc_gt = localization_map(local);
  patch.points = std::move(local.points);
  patch.provenance.image_id = ann.image_id;
  patch.provenance.crop_x = x0;
  patch.provenance.crop_y = y0;
  return patch;
}

/// Uniformly placed size x size crop with ground truth regenerated from the
/// retained points.
template <class Rng>
TrainingPatch random_crop(const Image& image, const PointAnnotationSet& ann, Rng& rng, int size = 300,
                          const SigmaParams& sigma = {}) {
  if (image.width() < size || image.height() < size) {
    throw ShapeError("random_crop: image " + std::to_string(image.width()) + "x" +
                     std::to_string(image.height()) + " is smaller than the " + std::to_string(size) +
                     " px patch");
  }
  std::uniform_int_distribution<int> dx(0, image.width() - size);
  std::uniform_int_distribution<int> dy(0, image.height() - size);
  const int x0 = dx(rng);
  const int y0 = dy(rng);
  return crop_patch(image, ann, x0, y0, size, sigma);
}

inline TrainingPatch flip_horizontal(const TrainingPatch& patch) {
  TrainingPatch out;
  out.image = mirrored_horizontally(patch.image);
  out.density_gt = DensityMap(patch.density_gt.mirrored_horizontally());
  out.loc_gt = LocalizationMap(patch.loc_gt.mirrored_horizontally());
  const double w = patch.image.width();
  out.points.reserve(patch.points.size());
  for (const Point& p : patch.points) out.points.push_back({w - 1.0 - p.x, p.y});
  out.provenance = patch.provenance;
  out.provenance.flipped = !patch.provenance.flipped;
  return out;
}

/// Adds N(0, stddev) to every pixel channel and clips to [0, 1]; ground truth is untouched.
template <class Rng>
TrainingPatch add_gaussian_noise(const TrainingPatch& patch, double stddev, Rng& rng) {
  TrainingPatch out = patch;
  if (stddev <= 0.0) return out;
  std::normal_distribution<double> noise(0.0, stddev);
  for (double& v : out.image.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  out.provenance.noised = true;
  return out;
}

/// Everything needed to reproduce one patch without touching pixels.
struct PatchSpec {
  std::size_t image_index = 0;
  std::uint64_t patch_index = 0;
  double scale = 1.0;
  int crop_x = 0;
  int crop_y = 0;
  bool flip = false;
  bool noise = false;
  std::uint64_t noise_seed = 0;
};

struct ImageExtent {
  int width = 0;
  int height = 0;
};

/// Enumerates patches as images x applicable scales x crops_per_scale. Each
/// patch draws its offsets and flags from its own generator, seeded from
/// (seed, patch index), so any subset can be materialized independently.
inline std::vector<PatchSpec> plan_dataset(const std::vector<ImageExtent>& images,
                                           const AugmentParams& params, std::uint64_t seed) {
  if (images.empty()) throw DataError("make_dataset: empty corpus");
  std::vector<PatchSpec> plan;
  std::uint64_t index = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (double s : params.scales) {
      if (!scale_applicable(images[i].width, images[i].height, s, params.patch_size)) continue;
      const int w = scaled_extent(images[i].width, s), h = scaled_extent(images[i].height, s);
      for (int k = 0; k < params.crops_per_scale; ++k, ++index) {
        std::mt19937_64 rng(derive_seed(seed, index));
        std::uniform_int_distribution<int> dx(0, w - params.patch_size);
        std::uniform_int_distribution<int> dy(0, h - params.patch_size);
        std::bernoulli_distribution flip(params.flip_prob), noise(params.noise_prob);
        PatchSpec spec;
        spec.image_index = i;
        spec.patch_index = index;
        spec.scale = s;
        spec.crop_x = dx(rng);
        spec.crop_y = dy(rng);
        spec.flip = flip(rng);
        spec.noise = noise(rng);
        spec.noise_seed = rng();
        plan.push_back(spec);
      }
    }
  }
  return plan;
}

/// Builds the patch described by `spec` from its (already scaled) pyramid level.
inline TrainingPatch materialize_patch(const PatchSpec& spec, const PyramidLevel& level,
                                       const AugmentParams& params) {
  TrainingPatch patch = crop_patch(level.image, level.annotations, spec.crop_x, spec.crop_y,
                                   params.patch_size, params.sigma);
  patch.provenance.scale = spec.scale;
  patch.provenance.noise_seed = spec.noise_seed;
  if (spec.flip) patch = flip_horizontal(patch);
  if (spec.noise) {
    std::mt19937_64 rng(spec.noise_seed);
    patch = add_gaussian_noise(patch, params.noise_std, rng);
  }
  return patch;
}

struct AnnotatedImage {
  Image image;
  PointAnnotationSet annotations;
};

/// Visits every planned patch in plan order, one image at a time.
template <class Sink>
void generate_dataset(const std::vector<AnnotatedImage>& corpus, const AugmentParams& params,
                      std::uint64_t seed, Sink&& sink, std::ostream* warnings = &std::cerr) {
  std::vector<ImageExtent> extents;
  extents.reserve(corpus.size());
  for (const auto& item : corpus) extents.push_back({item.image.width(), item.image.height()});
  const auto plan = plan_dataset(extents, params, seed);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto levels = build_pyramid(corpus[i].image, corpus[i].annotations, params, warnings);
    for (const auto& level : levels) {
      for (; cursor < plan.size() && plan[cursor].image_index == i && plan[cursor].scale == level.scale; ++cursor) {
        sink(plan[cursor], materialize_patch(plan[cursor], level, params));
      }
    }
  }
}

inline std::vector<TrainingPatch> make_dataset(const std::vector<AnnotatedImage>& corpus,
                                               const AugmentParams& params, std::uint64_t seed,
                                               std::ostream* warnings = &std::cerr) {
  std::vector<TrainingPatch> out;
  generate_dataset(
      corpus, params, seed, [&](const PatchSpec&, TrainingPatch p) { out.push_back(std::move(p)); },
      warnings);
  return out;
}

/// FNV-1a over every patch's image, density and localization bytes.
inline std::uint64_t dataset_hash(const std::vector<TrainingPatch>& patches) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::vector<double>& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& patch : patches) {
    feed(patch.image.data());
    feed(patch.density_gt.values());
    feed(patch.loc_gt.values());
  }
  return h;
}

}  // namespace wheatnet
