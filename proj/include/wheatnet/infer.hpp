#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wheatnet/conv.hpp"
#include "wheatnet/groundtruth.hpp"
#include "wheatnet/image.hpp"
#include "wheatnet/model.hpp"
#include "wheatnet/ops.hpp"

namespace wheatnet {

struct PixelPoint {
  int x = 0;
  int y = 0;
  bool operator==(const PixelPoint&) const = default;
};

struct Prediction {
  std::string image_id;
  double density_count = 0.0;
  std::vector<PixelPoint> peak_points;
  std::size_t peak_count = 0;
  double avg_count = 0.0;
  Map2D density_map;
  Map2D loc_map;

  nlohmann::json to_json() const {
    nlohmann::json peaks = nlohmann::json::array();
    for (const auto& p : peak_points) peaks.push_back({p.x, p.y});
    return {{"image_id", image_id},
            {"density_count", density_count},
            {"peak_count", peak_count},
            {"avg_count", avg_count},
            {"peaks", peaks}};
  }
};

/// Sum of the map; negative pixels from the linear head count as-is.
inline double count_from_density(const Map2D& density) { return density.sum(); }

inline Map2D tensor_plane(const Tensor& t, std::size_t n = 0, std::size_t c = 0) {
  const Shape s = t.shape();
  std::vector<double> v(t.data().begin() + static_cast<long>((n * s.c + c) * s.plane()),
                        t.data().begin() + static_cast<long>((n * s.c + c + 1) * s.plane()));
  return Map2D(static_cast<int>(s.h), static_cast<int>(s.w), std::move(v));
}

inline Tensor map_to_tensor(const Map2D& m) {
  return Tensor::from({1, 1, static_cast<std::size_t>(m.height()), static_cast<std::size_t>(m.width())}, m.values());
}

/// 3x3 mean smoothing (in-bounds taps only), then every pixel whose smoothed
/// value is >= threshold and beats all in-bounds 8-neighbours. Neighbours are
/// compared on the smoothed value, with exact ties decided by the raw value,
/// so a lone spike (a flat 3x3 block after smoothing) still yields its centre
/// while plateaus of both produce no peak. Points come back in row-major order.
inline std::vector<PixelPoint> extract_peaks(const Map2D& loc_map, double threshold) {
  Tape tape = Tape::no_grad();
  const Map2D smooth = tensor_plane(avgpool2d_3x3_same(tape, map_to_tensor(loc_map)));
  std::vector<PixelPoint> peaks;
  const int H = smooth.height(), W = smooth.width();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = smooth.at(y, x), raw = loc_map.at(y, x);
      if (v < threshold) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const double n = smooth.at(yy, xx);
          if (v < n || (v == n && !(raw > loc_map.at(yy, xx)))) {
            is_max = false;
            break;
          }
        }
      if (is_max) peaks.push_back({x, y});
    }
  return peaks;
}

inline constexpr double kDefaultPeakThreshold = 0.5;

/// Runs the network on one image of any size: reflect-pads to a multiple of
/// 16, crops the outputs back and assembles counts and peaks.
inline Prediction predict(const WheatNet& net, const Image& image, double threshold = kDefaultPeakThreshold,
                          std::string image_id = {}) {
  if (image.empty()) throw DataError("predict: empty image");
  const Image padded = pad_to_multiple(image, 16);
  Tape tape = Tape::no_grad();
  const ForwardOutputs out = net.forward(tape, image_to_tensor(padded));
  const auto h = static_cast<std::size_t>(image.height()), w = static_cast<std::size_t>(image.width());
  Prediction p;
  p.image_id = std::move(image_id);
  p.density_map = tensor_plane(crop(tape, out.density, 0, 0, h, w));
  p.loc_map = tensor_plane(crop(tape, out.locmap, 0, 0, h, w));
  p.density_count = count_from_density(p.density_map);
  p.peak_points = extract_peaks(p.loc_map, threshold);
  p.peak_count = p.peak_points.size();
  p.avg_count = (p.density_count + static_cast<double>(p.peak_count)) / 2.0;
  return p;
}

/// Copy of `image` with a small red cross at every peak.
inline Image overlay_peaks(const Image& image, const std::vector<PixelPoint>& peaks) {
  Image out = image;
  for (const auto& p : peaks) {
    for (int d = -3; d <= 3; ++d) {
      for (auto [x, y] : {std::pair{p.x + d, p.y}, std::pair{p.x, p.y + d}}) {
        if (x < 0 || y < 0 || x >= out.width() || y >= out.height()) continue;
        out.at(y, x, 0) = 1.0;
        out.at(y, x, 1) = 0.0;
        out.at(y, x, 2) = 0.0;
      }
    }
  }
  return out;
}

}  // namespace wheatnet
