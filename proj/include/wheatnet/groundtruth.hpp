#pragma once

// Point annotations to supervision targets: geometry-adaptive Gaussian density
// maps for the counting branch and cross-stamped binary maps for the
// localization branch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wheatnet/errors.hpp"

namespace wheatnet {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct PointAnnotationSet {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<Point> points;

  std::size_t count() const { return points.size(); }

  /// Throws DataError unless every point satisfies 0 <= x < width, 0 <= y < height.
  void validate() const {
    if (width <= 0 || height <= 0) {
      throw DataError("annotations for '" + image_id + "': image size " + std::to_string(width) +
                      "x" + std::to_string(height) + " is not positive");
    }
    for (const Point& p : points) {
      if (!(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height)) {
        throw DataError("annotations for '" + image_id + "': point (" + std::to_string(p.x) +
                        ", " + std::to_string(p.y) + ") outside " + std::to_string(width) + "x" +
                        std::to_string(height));
      }
    }
  }
};

/// Row-major single-channel H x W map.
class Map2D {
 public:
  Map2D() = default;
  Map2D(int height, int width, double fill = 0.0)
      : height_(height), width_(width),
        values_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill) {}
  Map2D(int height, int width, std::vector<double> values)
      : height_(height), width_(width), values_(std::move(values)) {
    if (values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
      throw ShapeError("map: " + std::to_string(values_.size()) + " values do not fill " +
                       std::to_string(height) + "x" + std::to_string(width));
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }

  double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  double sum() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }

  Map2D mirrored_horizontally() const {
    Map2D out(height_, width_);
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x) out.at(y, width_ - 1 - x) = at(y, x);
    return out;
  }

  bool operator==(const Map2D&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Non-negative map whose sum is the head count.
struct DensityMap : Map2D {
  using Map2D::Map2D;
  explicit DensityMap(Map2D m) : Map2D(std::move(m)) {}
};

/// Binary {0,1} map with cross-shaped positives at head centers.
struct LocalizationMap : Map2D {
  using Map2D::Map2D;
  explicit LocalizationMap(Map2D m) : Map2D(std::move(m)) {}

  std::size_t positives() const {
    std::size_t n = 0;
    for (double v : values()) n += v > 0.5 ? 1 : 0;
    return n;
  }
};

/// Geometry-adaptive kernel: sigma = beta * mean distance to the k nearest
/// neighbours, clamped to [min_sigma, max_sigma].
struct SigmaParams {
  int k = 3;
  double beta = 0.3;
  double min_sigma = 1.0;
  double max_sigma = 15.0;
  double default_sigma = 4.0;  // lone point, no neighbours
  double truncate = 4.0;       // stamp radius in sigmas
};

inline double adaptive_sigma(const std::vector<Point>& points, std::size_t index,
                             const SigmaParams& params = {}) {
  if (params.k < 1) throw std::invalid_argument("adaptive_sigma: k must be >= 1");
  if (index >= points.size()) {
    throw std::out_of_range("adaptive_sigma: index " + std::to_string(index) + " out of range for " +
                            std::to_string(points.size()) + " points");
  }
  if (points.size() == 1) return params.default_sigma;
  std::vector<double> dist;
  dist.reserve(points.size() - 1);
  const Point& p = points[index];
  for (std::size_t j = 0; j < points.size(); ++j) {
    if (j == index) continue;
    dist.push_back(std::hypot(points[j].x - p.x, points[j].y - p.y));
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(params.k), dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k), dist.end());
  double mean = 0.0;
  for (std::size_t j = 0; j < k; ++j) mean += dist[j];
  mean /= static_cast<double>(k);
  return std::clamp(params.beta * mean, params.min_sigma, params.max_sigma);
}

/// Pixel index nearest to a coordinate, rounding halves up.
inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

/// Sum of per-point Gaussian stamps. Each stamp is truncated at
/// +-truncate*sigma, clipped to the image and renormalized to unit mass.
inline DensityMap density_map(const PointAnnotationSet& ann, const SigmaParams& params = {}) {
  DensityMap map(ann.height, ann.width);
  std::vector<double> stamp;
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    const Point& p = ann.points[i];
    const double sigma = adaptive_sigma(ann.points, i, params);
    const int radius = static_cast<int>(std::ceil(params.truncate * sigma));
    const int cx = round_half_up(p.x), cy = round_half_up(p.y);
    const int x0 = std::max(0, cx - radius), x1 = std::min(ann.width - 1, cx + radius);
    const int y0 = std::max(0, cy - radius), y1 = std::min(ann.height - 1, cy + radius);
    if (x0 > x1 || y0 > y1) continue;
    const int sw = x1 - x0 + 1;
    stamp.assign(static_cast<std::size_t>(sw) * static_cast<std::size_t>(y1 - y0 + 1), 0.0);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double total = 0.0;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - p.x, dy = y - p.y;
        const double v = std::exp(-(dx * dx + dy * dy) * inv2s2);
        stamp[static_cast<std::size_t>(y - y0) * sw + (x - x0)] = v;
        total += v;
      }
    if (!(total > 0.0)) {
      // Sub-pixel sigma far from every pixel center: collapse to the nearest pixel.
      map.at(std::clamp(cy, 0, ann.height - 1), std::clamp(cx, 0, ann.width - 1)) += 1.0;
      continue;
    }
    const double inv = 1.0 / total;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        map.at(y, x) += stamp[static_cast<std::size_t>(y - y0) * sw + (x - x0)] * inv;
  }
  return map;
}

/// Binary union of 5-pixel crosses (center plus 4-neighbours) at the rounded
/// point positions, clipped at the borders.
inline LocalizationMap localization_map(const PointAnnotationSet& ann) {
  LocalizationMap map(ann.height, ann.width);
  static constexpr int kCross[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  for (const Point& p : ann.points) {
    const int cx = round_half_up(p.x), cy = round_half_up(p.y);
    for (const auto& d : kCross) {
      const int x = cx + d[0], y = cy + d[1];
      if (x >= 0 && x < ann.width && y >= 0 && y < ann.height) map.at(y, x) = 1.0;
    }
  }
  return map;
}

}  // namespace wheatnet
