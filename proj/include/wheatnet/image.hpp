#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wheatnet/errors.hpp"
#include "wheatnet/tensor.hpp"

namespace wheatnet {

/// Interleaved (HWC) RGB image with values in [0, 1].
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * width * kChannels, fill) {
    if (height < 0 || width < 0) throw ShapeError("image: negative size");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }
  double at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool operator==(const Image&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Bilinear resample with the pixel-center convention; works in both directions.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: target size must be positive");
  if (src.empty()) throw ShapeError("resize_bilinear: empty source image");
  if (out_h == src.height() && out_w == src.width()) return src;
  Image out(out_h, out_w);
  auto taps = [](int in, int out_n) {
    std::vector<std::pair<int, double>> t(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in) / out_n;
    for (int o = 0; o < out_n; ++o) {
      double s = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      int lo = std::min(static_cast<int>(std::floor(s)), in - 1);
      t[static_cast<std::size_t>(o)] = {lo, s - lo};
    }
    return t;
  };
  const auto th = taps(src.height(), out_h);
  const auto tw = taps(src.width(), out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto [y0, fy] = th[static_cast<std::size_t>(y)];
    const int y1 = std::min(y0 + 1, src.height() - 1);
    for (int x = 0; x < out_w; ++x) {
      const auto [x0, fx] = tw[static_cast<std::size_t>(x)];
      const int x1 = std::min(x0 + 1, src.width() - 1);
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
        const double bot = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
        out.at(y, x, c) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

inline Image crop(const Image& src, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > src.height() || left + width > src.width()) {
    throw ShapeError("crop: window exceeds image bounds");
  }
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    std::copy_n(&src.data()[(static_cast<std::size_t>(top + y) * src.width() + left) * 3],
                static_cast<std::size_t>(width) * 3, &out.at(y, 0, 0));
  return out;
}

inline Image mirrored_horizontally(const Image& src) {
  Image out(src.height(), src.width());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, src.width() - 1 - x, c) = src.at(y, x, c);
  return out;
}

/// Mirror index into [0, n) without repeating the edge sample (numpy "reflect").
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Reflect-pads bottom/right so both sides are multiples of `multiple`.
inline Image pad_to_multiple(const Image& src, int multiple) {
  const int h = (src.height() + multiple - 1) / multiple * multiple;
  const int w = (src.width() + multiple - 1) / multiple * multiple;
  if (h == src.height() && w == src.width()) return src;
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = reflect_index(y, src.height());
    for (int x = 0; x < w; ++x) {
      const int sx = reflect_index(x, src.width());
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  return out;
}

/// Stacks equally sized images into an (N, 3, H, W) tensor.
inline Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const int h = images.front()->height(), w = images.front()->width();
  Tensor t = Tensor::zeros({images.size(), 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& im = *images[n];
    if (im.height() != h || im.width() != w) {
      throw ShapeError("images_to_tensor: image " + std::to_string(n) + " is " +
                       std::to_string(im.height()) + "x" + std::to_string(im.width()) +
                       ", batch expects " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at(n, static_cast<std::size_t>(c), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = im.at(y, x, c);
  }
  return t;
}

inline Tensor image_to_tensor(const Image& image) { return images_to_tensor({&image}); }

}  // namespace wheatnet
