#pragma once

// Resampling, pooling, concatenation and elementwise ops on NCHW tensors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wheatnet/errors.hpp"
#include "wheatnet/tape.hpp"
#include "wheatnet/tensor.hpp"

namespace wheatnet {

inline Tensor upsample_nearest(Tape& tape, const Tensor& input, std::size_t factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const Shape s = input.shape();
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros({s.n, s.c, s.h * factor, s.w * factor}, grad);
  const std::size_t ow = s.w * factor;
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const double* x = input.ptr() + p * s.plane();
    double* o = out.mutable_ptr() + p * s.plane() * factor * factor;
    for (std::size_t h = 0; h < s.h * factor; ++h) {
      const double* row = x + (h / factor) * s.w;
      double* orow = o + h * ow;
      for (std::size_t w = 0; w < ow; ++w) orow[w] = row[w / factor];
    }
  }
  if (grad) {
    tape.record("upsample_nearest", {input}, out, [input, out, factor]() mutable {
      const Shape s = input.shape();
      const std::size_t ow = s.w * factor;
      auto gx = input.grad_buffer();
      const double* go = out.grad().data();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        double* g = gx.data() + p * s.plane();
        const double* o = go + p * s.plane() * factor * factor;
        for (std::size_t h = 0; h < s.h * factor; ++h) {
          double* row = g + (h / factor) * s.w;
          const double* orow = o + h * ow;
          for (std::size_t w = 0; w < ow; ++w) row[w / factor] += orow[w];
        }
      }
    });
  }
  return out;
}

namespace detail {

// One output coordinate of a half-pixel (align_corners=false) linear resample.
struct LinearTap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling with the pixel-center convention (align_corners=false).
inline Tensor upsample_bilinear(Tape& tape, const Tensor& input, std::size_t out_h,
                                std::size_t out_w) {
  const Shape s = input.shape();
  if (s.h == 0 || s.w == 0) throw ShapeError("upsample_bilinear: empty input");
  if (out_h < s.h || out_w < s.w) {
    throw ShapeError("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " is smaller than input " + std::to_string(s.h) +
                     "x" + std::to_string(s.w));
  }
  const auto th = detail::linear_taps(s.h, out_h);
  const auto tw = detail::linear_taps(s.w, out_w);
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros({s.n, s.c, out_h, out_w}, grad);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const double* x = input.ptr() + p * s.plane();
    double* o = out.mutable_ptr() + p * out_h * out_w;
    for (std::size_t h = 0; h < out_h; ++h) {
      const auto& a = th[h];
      const double* r0 = x + a.lo * s.w;
      const double* r1 = x + a.hi * s.w;
      for (std::size_t w = 0; w < out_w; ++w) {
        const auto& b = tw[w];
        const double top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * b.frac;
        const double bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * b.frac;
        o[h * out_w + w] = top + (bot - top) * a.frac;
      }
    }
  }
  if (grad) {
    tape.record("upsample_bilinear", {input}, out, [input, out, th, tw]() mutable {
      const Shape s = input.shape();
      const std::size_t out_h = th.size(), out_w = tw.size();
      auto gx = input.grad_buffer();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        double* g = gx.data() + p * s.plane();
        const double* go = out.grad().data() + p * out_h * out_w;
        for (std::size_t h = 0; h < out_h; ++h) {
          const auto& a = th[h];
          for (std::size_t w = 0; w < out_w; ++w) {
            const auto& b = tw[w];
            const double v = go[h * out_w + w];
            g[a.lo * s.w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
            g[a.lo * s.w + b.hi] += v * (1.0 - a.frac) * b.frac;
            g[a.hi * s.w + b.lo] += v * a.frac * (1.0 - b.frac);
            g[a.hi * s.w + b.hi] += v * a.frac * b.frac;
          }
        }
      }
    });
  }
  return out;
}

/// Stride-1 3x3 mean filter. Border pixels average only their in-bounds taps.
inline Tensor avgpool2d_3x3_same(Tape& tape, const Tensor& input) {
  const Shape s = input.shape();
  const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros(s, grad);
  auto window = [H, W](long y, long x, auto&& fn) {
    const long y0 = std::max(0L, y - 1), y1 = std::min(H - 1, y + 1);
    const long x0 = std::max(0L, x - 1), x1 = std::min(W - 1, x + 1);
    const double inv = 1.0 / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    for (long yy = y0; yy <= y1; ++yy)
      for (long xx = x0; xx <= x1; ++xx) fn(yy * W + xx, inv);
  };
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const double* x = input.ptr() + p * s.plane();
    double* o = out.mutable_ptr() + p * s.plane();
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < W; ++xx) {
        double acc = 0.0, taps = 0.0;
        window(y, xx, [&](long idx, double) {
          acc += x[idx];
          taps += 1.0;
        });
        o[y * W + xx] = acc / taps;  // equal means compare equal regardless of tap count
      }
  }
  if (grad) {
    tape.record("avgpool2d_3x3_same", {input}, out, [input, out, window, H, W]() mutable {
      const Shape s = input.shape();
      auto gx = input.grad_buffer();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        double* g = gx.data() + p * s.plane();
        const double* go = out.grad().data() + p * s.plane();
        for (long y = 0; y < H; ++y)
          for (long xx = 0; xx < W; ++xx) {
            const double v = go[y * W + xx];
            window(y, xx, [&](long idx, double inv) { g[idx] += v * inv; });
          }
      }
    });
  }
  return out;
}

inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape first = inputs.front().shape();
  std::size_t channels = 0;
  for (const Tensor& t : inputs) {
    const Shape s = t.shape();
    if (s.n != first.n) throw ShapeError("concat_channels: batch N=" + std::to_string(s.n) + " != " + std::to_string(first.n));
    if (s.h != first.h) throw ShapeError("concat_channels: height H=" + std::to_string(s.h) + " != " + std::to_string(first.h));
    if (s.w != first.w) throw ShapeError("concat_channels: width W=" + std::to_string(s.w) + " != " + std::to_string(first.w));
    channels += s.c;
  }
  const bool grad = tape.needs_grad(inputs);
  Tensor out = Tensor::zeros({first.n, channels, first.h, first.w}, grad);
  const std::size_t plane = first.plane();
  for (std::size_t n = 0; n < first.n; ++n) {
    double* o = out.mutable_ptr() + n * channels * plane;
    for (const Tensor& t : inputs) {
      const std::size_t chunk = t.shape().c * plane;
      std::copy_n(t.ptr() + n * chunk, chunk, o);
      o += chunk;
    }
  }
  if (grad) {
    tape.record("concat_channels", inputs, out, [inputs, out, channels, plane]() mutable {
      const double* go = out.grad().data();
      const std::size_t batch = out.shape().n;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* src = go + n * channels * plane;
        for (const Tensor& t : inputs) {
          const std::size_t chunk = t.shape().c * plane;
          if (t.requires_grad()) {
            double* g = t.grad_buffer().data() + n * chunk;
            for (std::size_t k = 0; k < chunk; ++k) g[k] += src[k];
          }
          src += chunk;
        }
      }
    });
  }
  return out;
}

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const char* name, const Tensor& input, Fwd fwd, Deriv deriv) {
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros(input.shape(), grad);
  const double* x = input.ptr();
  double* o = out.mutable_ptr();
  for (std::size_t i = 0; i < input.numel(); ++i) o[i] = fwd(x[i]);
  if (grad) {
    tape.record(name, {input}, out, [input, out, deriv]() mutable {
      auto gx = input.grad_buffer();
      const double* go = out.grad().data();
      const double* x = input.ptr();
      const double* y = out.ptr();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * deriv(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace detail

/// max(x, 0); the subgradient at 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& input) {
  return detail::unary(
      tape, "relu", input, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& input) {
  return detail::unary(
      tape, "sigmoid", input,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor scale(Tape& tape, const Tensor& input, double factor) {
  return detail::unary(
      tape, "scale", input, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape " + a.shape().str() + " != " + b.shape().str());
  }
  const bool grad = tape.needs_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), grad);
  double* o = out.mutable_ptr();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a.ptr()[i] + b.ptr()[i];
  if (grad) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      const double* go = out.grad().data();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

/// Sum of all elements as a (1,1,1,1) tensor.
inline Tensor sum(Tape& tape, const Tensor& input) {
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros({1, 1, 1, 1}, grad);
  out.mutable_ptr()[0] = input.sum();
  if (grad) {
    tape.record("sum", {input}, out, [input, out]() mutable {
      const double g0 = out.grad()[0];
      for (double& g : input.grad_buffer()) g += g0;
    });
  }
  return out;
}

/// Spatial window [top, top+height) x [left, left+width) of every plane.
inline Tensor crop(Tape& tape, const Tensor& input, std::size_t top, std::size_t left,
                   std::size_t height, std::size_t width) {
  const Shape s = input.shape();
  if (top + height > s.h) throw ShapeError("crop: rows [" + std::to_string(top) + "," + std::to_string(top + height) + ") exceed H=" + std::to_string(s.h));
  if (left + width > s.w) throw ShapeError("crop: columns [" + std::to_string(left) + "," + std::to_string(left + width) + ") exceed W=" + std::to_string(s.w));
  if (top == 0 && left == 0 && height == s.h && width == s.w) return input;
  const bool grad = tape.needs_grad({&input});
  Tensor out = Tensor::zeros({s.n, s.c, height, width}, grad);
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t h = 0; h < height; ++h)
      std::copy_n(input.ptr() + p * s.plane() + (top + h) * s.w + left, width,
                  out.mutable_ptr() + (p * height + h) * width);
  if (grad) {
    tape.record("crop", {input}, out, [input, out, top, left, height, width]() mutable {
      const Shape s = input.shape();
      auto gx = input.grad_buffer();
      const double* go = out.grad().data();
      for (std::size_t p = 0; p < s.n * s.c; ++p)
        for (std::size_t h = 0; h < height; ++h) {
          double* dst = gx.data() + p * s.plane() + (top + h) * s.w + left;
          const double* src = go + (p * height + h) * width;
          for (std::size_t w = 0; w < width; ++w) dst[w] += src[w];
        }
    });
  }
  return out;
}

}  // namespace wheatnet
