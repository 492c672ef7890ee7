#pragma once

// Convolution family over NCHW tensors with "same" padding: the output of a
// stride-s layer is ceil(H/s) x ceil(W/s), and odd padding puts the extra
// row/column on the bottom/right.

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "wheatnet/errors.hpp"
#include "wheatnet/tape.hpp"
#include "wheatnet/tensor.hpp"

namespace wheatnet {

struct SamePadding {
  std::size_t out = 0;
  std::size_t before = 0;
  std::size_t total = 0;
};

inline SamePadding same_padding(std::size_t in, std::size_t kernel, std::size_t stride,
                                std::size_t dilation) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  const std::size_t out = (in + stride - 1) / stride;
  const long need = static_cast<long>((out - 1) * stride + span) - static_cast<long>(in);
  const std::size_t total = need > 0 ? static_cast<std::size_t>(need) : 0;
  return {out, total / 2, total};
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t channels, height, width;  // input plane
  std::size_t kh, kw, stride, dilation;
  std::size_t out_h, out_w;
  long pad_top, pad_left;
};

inline ConvGeometry make_geometry(std::size_t channels, std::size_t h, std::size_t w,
                                  std::size_t kh, std::size_t kw, std::size_t stride,
                                  std::size_t dilation) {
  const SamePadding ph = same_padding(h, kh, stride, dilation);
  const SamePadding pw = same_padding(w, kw, stride, dilation);
  return {channels, h, w, kh, kw, stride, dilation, ph.out, pw.out,
          static_cast<long>(ph.before), static_cast<long>(pw.before)};
}

// Output columns [lo, hi) for which ow*stride + offset lands inside [0, extent).
inline std::pair<long, long> valid_range(long offset, long stride, long extent, long outs) {
  long lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  long hi = extent - 1 - offset < 0 ? 0 : (extent - 1 - offset) / stride + 1;
  return {std::min(lo, outs), std::clamp(hi, 0L, outs)};
}

// Output rows [oh0, oh1) only; cols is K x ((oh1 - oh0) * out_w).
inline void im2col(const double* x, const ConvGeometry& g, double* cols, std::size_t oh0, std::size_t oh1) {
  const long s = static_cast<long>(g.stride);
  const long d = static_cast<long>(g.dilation);
  const long ow_n = static_cast<long>(g.out_w);
  const std::size_t rows = oh1 - oh0;
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * rows * g.out_w;
        const long col_off = static_cast<long>(j) * d - g.pad_left;
        const auto [lo, hi] = valid_range(col_off, s, W, ow_n);
        for (long oh = static_cast<long>(oh0); oh < static_cast<long>(oh1); ++oh) {
          double* out = row + (oh - static_cast<long>(oh0)) * ow_n;
          const long ih = oh * s + static_cast<long>(i) * d - g.pad_top;
          if (ih < 0 || ih >= H) {
            std::fill(out, out + ow_n, 0.0);
            continue;
          }
          const double* src = plane + ih * W;
          std::fill(out, out + lo, 0.0);
          for (long ow = lo; ow < hi; ++ow) out[ow] = src[ow * s + col_off];
          std::fill(out + hi, out + ow_n, 0.0);
        }
      }
    }
  }
}

// Scatter-add of im2col's layout back onto the input plane.
inline void col2im_add(const double* cols, const ConvGeometry& g, double* x, std::size_t oh0, std::size_t oh1) {
  const long s = static_cast<long>(g.stride);
  const long d = static_cast<long>(g.dilation);
  const long ow_n = static_cast<long>(g.out_w);
  const std::size_t rows = oh1 - oh0;
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * rows * g.out_w;
        const long col_off = static_cast<long>(j) * d - g.pad_left;
        const auto [lo, hi] = valid_range(col_off, s, W, ow_n);
        for (long oh = static_cast<long>(oh0); oh < static_cast<long>(oh1); ++oh) {
          const long ih = oh * s + static_cast<long>(i) * d - g.pad_top;
          if (ih < 0 || ih >= H) continue;
          double* dst = plane + ih * W;
          const double* src = row + (oh - static_cast<long>(oh0)) * ow_n;
          for (long ow = lo; ow < hi; ++ow) dst[ow * s + col_off] += src[ow];
        }
      }
    }
  }
}

// Output rows per im2col tile, sized so the column buffer stays cache-resident.
inline std::size_t tile_rows(const ConvGeometry& g, std::size_t K) {
  constexpr std::size_t kTileDoubles = 1 << 15;
  return std::clamp<std::size_t>(kTileDoubles / std::max<std::size_t>(1, K * g.out_w), 1, std::max<std::size_t>(1, g.out_h));
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
}

inline void check_stride(const char* op, std::size_t stride) {
  if (stride != 1 && stride != 2) {
    throw ShapeError(std::string(op) + ": stride must be 1 or 2, got " + std::to_string(stride));
  }
}

inline void check_bias(const char* op, const std::optional<Tensor>& bias, std::size_t channels) {
  if (bias && bias->numel() != channels) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias->numel()) +
                     " elements, expected Cout=" + std::to_string(channels));
  }
}

inline void add_bias(Tensor& out, const std::optional<Tensor>& bias) {
  if (!bias) return;
  const Shape& s = out.shape();
  double* o = out.mutable_ptr();
  const double* b = bias->ptr();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double* p = o + (n * s.c + c) * s.plane();
      for (std::size_t k = 0; k < s.plane(); ++k) p[k] += b[c];
    }
}

inline void bias_backward(const Tensor& bias, const Tensor& out) {
  const Shape& s = out.shape();
  auto gb = bias.grad_buffer();
  const double* go = out.grad().data();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* p = go + (n * s.c + c) * s.plane();
      double acc = 0.0;
      for (std::size_t k = 0; k < s.plane(); ++k) acc += p[k];
      gb[c] += acc;
    }
}

inline std::vector<Tensor> node_inputs(const Tensor& a, const Tensor& b,
                                       const std::optional<Tensor>& c) {
  std::vector<Tensor> v{a, b};
  if (c) v.push_back(*c);
  return v;
}

}  // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
};

/// Dense 2-D convolution; weight is (Cout, Cin, kh, kw).
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight,
                     const std::optional<Tensor>& bias = std::nullopt, Conv2dOptions opt = {}) {
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  detail::check_stride("conv2d", opt.stride);
  if (opt.dilation < 1) throw ShapeError("conv2d: dilation must be >= 1");
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: input channels C=" + std::to_string(xs.c) +
                     " do not match weight Cin=" + std::to_string(ws.c));
  }
  if (ws.h == 0 || ws.w == 0) throw ShapeError("conv2d: empty kernel");
  detail::check_bias("conv2d", bias, ws.n);

  const detail::ConvGeometry g =
      detail::make_geometry(xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.dilation);
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = g.out_h * g.out_w;
  const bool grad = tape.needs_grad({&input, &weight, bias ? &*bias : nullptr});
  Tensor out = Tensor::zeros({xs.n, ws.n, g.out_h, g.out_w}, grad);

  const bool pointwise = detail::is_pointwise(g);
  const std::size_t tile = detail::tile_rows(g, K);
  std::vector<double> cols(pointwise ? 0 : K * tile * g.out_w);
  detail::ConstMatMap wm(weight.ptr(), ws.n, K);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const double* xn = input.ptr() + n * xs.c * xs.plane();
    detail::MatMap om(out.mutable_ptr() + n * ws.n * P, ws.n, P);
    if (pointwise) {
      om.noalias() = wm * detail::ConstMatMap(xn, K, P);
      continue;
    }
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += tile) {
      const std::size_t r1 = std::min(g.out_h, r0 + tile), cn = (r1 - r0) * g.out_w;
      detail::im2col(xn, g, cols.data(), r0, r1);
      om.middleCols(r0 * g.out_w, cn).noalias() = wm * detail::ConstMatMap(cols.data(), K, cn);
    }
  }
  detail::add_bias(out, bias);

  if (grad) {
    tape.record("conv2d", detail::node_inputs(input, weight, bias), out,
                [input, weight, bias, out, g, K, P, pointwise, tile]() mutable {
                  const Shape xs = input.shape();
                  const std::size_t cout = weight.shape().n;
                  std::vector<double> cols(pointwise ? 0 : K * tile * g.out_w);
                  detail::ConstMatMap wm(weight.ptr(), cout, K);
                  const bool need_w = weight.requires_grad(), need_x = input.requires_grad();
                  for (std::size_t n = 0; n < xs.n; ++n) {
                    detail::ConstMatMap gom(out.grad().data() + n * cout * P, cout, P);
                    const double* xn = input.ptr() + n * xs.c * xs.plane();
                    double* gx = need_x ? input.grad_buffer().data() + n * xs.c * xs.plane() : nullptr;
                    if (pointwise) {
                      if (need_w) {
                        detail::MatMap gw(weight.grad_buffer().data(), cout, K);
                        gw.noalias() += gom * detail::ConstMatMap(xn, K, P).transpose();
                      }
                      if (need_x) detail::MatMap(gx, K, P).noalias() += wm.transpose() * gom;
                      continue;
                    }
                    for (std::size_t r0 = 0; r0 < g.out_h; r0 += tile) {
                      const std::size_t r1 = std::min(g.out_h, r0 + tile), cn = (r1 - r0) * g.out_w;
                      const auto go_tile = gom.middleCols(r0 * g.out_w, cn);
                      detail::MatMap cm(cols.data(), K, cn);
                      if (need_w) {
                        detail::im2col(xn, g, cols.data(), r0, r1);
                        detail::MatMap gw(weight.grad_buffer().data(), cout, K);
                        gw.noalias() += go_tile * cm.transpose();
                      }
                      if (need_x) {
                        cm.noalias() = wm.transpose() * go_tile;
                        detail::col2im_add(cols.data(), g, gx, r0, r1);
                      }
                    }
                  }
                  if (bias && bias->requires_grad()) detail::bias_backward(*bias, out);
                });
  }
  return out;
}

/// Per-channel convolution; weight is (C, 1, kh, kw).
inline Tensor depthwise_conv2d(Tape& tape, const Tensor& input, const Tensor& weight,
                               const std::optional<Tensor>& bias = std::nullopt,
                               Conv2dOptions opt = {}) {
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  detail::check_stride("depthwise_conv2d", opt.stride);
  if (opt.dilation < 1) throw ShapeError("depthwise_conv2d: dilation must be >= 1");
  if (ws.n != xs.c) {
    throw ShapeError("depthwise_conv2d: weight has " + std::to_string(ws.n) +
                     " channels, input C=" + std::to_string(xs.c));
  }
  if (ws.c != 1) throw ShapeError("depthwise_conv2d: weight dim 1 must be 1, got " + std::to_string(ws.c));
  detail::check_bias("depthwise_conv2d", bias, xs.c);

  const detail::ConvGeometry g =
      detail::make_geometry(1, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.dilation);
  const bool grad = tape.needs_grad({&input, &weight, bias ? &*bias : nullptr});
  Tensor out = Tensor::zeros({xs.n, xs.c, g.out_h, g.out_w}, grad);

  // Visits every (output pixel, input pixel, tap) triple of one channel plane.
  auto for_each_tap = [g](auto&& fn) {
    const long s = static_cast<long>(g.stride), d = static_cast<long>(g.dilation);
    const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
    const long oh_n = static_cast<long>(g.out_h), ow_n = static_cast<long>(g.out_w);
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long col_off = static_cast<long>(j) * d - g.pad_left;
        const auto [lo, hi] = detail::valid_range(col_off, s, W, ow_n);
        for (long oh = 0; oh < oh_n; ++oh) {
          const long ih = oh * s + static_cast<long>(i) * d - g.pad_top;
          if (ih < 0 || ih >= H) continue;
          fn(i * g.kw + j, oh * ow_n, ih * W + col_off, lo, hi, s);
        }
      }
  };

  const std::size_t in_plane = xs.plane(), out_plane = g.out_h * g.out_w;
  const std::size_t taps = ws.h * ws.w;
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c) {
      const double* x = input.ptr() + (n * xs.c + c) * in_plane;
      const double* w = weight.ptr() + c * taps;
      double* o = out.mutable_ptr() + (n * xs.c + c) * out_plane;
      for_each_tap([&](std::size_t tap, long orow, long irow, long lo, long hi, long s) {
        const double wv = w[tap];
        for (long ow = lo; ow < hi; ++ow) o[orow + ow] += wv * x[irow + ow * s];
      });
    }
  detail::add_bias(out, bias);

  if (grad) {
    tape.record("depthwise_conv2d", detail::node_inputs(input, weight, bias), out,
                [input, weight, bias, out, for_each_tap, in_plane, out_plane, taps]() mutable {
                  const Shape xs = input.shape();
                  const double* go_all = out.grad().data();
                  double* gw_all = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
                  double* gx_all = input.requires_grad() ? input.grad_buffer().data() : nullptr;
                  for (std::size_t n = 0; n < xs.n; ++n)
                    for (std::size_t c = 0; c < xs.c; ++c) {
                      const double* x = input.ptr() + (n * xs.c + c) * in_plane;
                      const double* w = weight.ptr() + c * taps;
                      const double* go = go_all + (n * xs.c + c) * out_plane;
                      double* gx = gx_all ? gx_all + (n * xs.c + c) * in_plane : nullptr;
                      double* gw = gw_all ? gw_all + c * taps : nullptr;
                      for_each_tap([&](std::size_t tap, long orow, long irow, long lo, long hi, long s) {
                        if (gw) {
                          double acc = 0.0;
                          for (long ow = lo; ow < hi; ++ow) acc += go[orow + ow] * x[irow + ow * s];
                          gw[tap] += acc;
                        }
                        if (gx) {
                          const double wv = w[tap];
                          for (long ow = lo; ow < hi; ++ow) gx[irow + ow * s] += wv * go[orow + ow];
                        }
                      });
                    }
                  if (bias && bias->requires_grad()) detail::bias_backward(*bias, out);
                });
  }
  return out;
}

/// Transposed convolution ("deconvolution"); weight is (Cin, Cout, kh, kw).
/// Defined as the exact adjoint of conv2d with the same kernel and stride on
/// an output of stride x the input's spatial size.
inline Tensor conv_transpose2d(Tape& tape, const Tensor& input, const Tensor& weight,
                               const std::optional<Tensor>& bias = std::nullopt,
                               std::size_t stride = 2) {
  const Shape ys = input.shape();
  const Shape ws = weight.shape();
  detail::check_stride("conv_transpose2d", stride);
  if (ys.c != ws.n) {
    throw ShapeError("conv_transpose2d: input channels C=" + std::to_string(ys.c) +
                     " do not match weight Cin=" + std::to_string(ws.n));
  }
  const std::size_t cout = ws.c;
  detail::check_bias("conv_transpose2d", bias, cout);

  const detail::ConvGeometry g =
      detail::make_geometry(cout, ys.h * stride, ys.w * stride, ws.h, ws.w, stride, 1);
  const std::size_t K = cout * ws.h * ws.w;
  const std::size_t P = ys.plane();
  const std::size_t out_plane = g.height * g.width;
  const bool grad = tape.needs_grad({&input, &weight, bias ? &*bias : nullptr});
  Tensor out = Tensor::zeros({ys.n, cout, g.height, g.width}, grad);

  // g describes the equivalent forward conv, whose output grid is the input grid here.
  const std::size_t tile = detail::tile_rows(g, K);
  std::vector<double> cols(K * tile * g.out_w);
  detail::ConstMatMap wm(weight.ptr(), ws.n, K);
  for (std::size_t n = 0; n < ys.n; ++n) {
    detail::ConstMatMap ym(input.ptr() + n * ys.c * P, ys.c, P);
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += tile) {
      const std::size_t r1 = std::min(g.out_h, r0 + tile), cn = (r1 - r0) * g.out_w;
      detail::MatMap(cols.data(), K, cn).noalias() = wm.transpose() * ym.middleCols(r0 * g.out_w, cn);
      detail::col2im_add(cols.data(), g, out.mutable_ptr() + n * cout * out_plane, r0, r1);
    }
  }
  detail::add_bias(out, bias);

  if (grad) {
    tape.record("conv_transpose2d", detail::node_inputs(input, weight, bias), out,
                [input, weight, bias, out, g, K, P, out_plane, tile]() mutable {
                  const Shape ys = input.shape();
                  const std::size_t cin = weight.shape().n;
                  std::vector<double> cols(K * tile * g.out_w);
                  detail::ConstMatMap wm(weight.ptr(), cin, K);
                  for (std::size_t n = 0; n < ys.n; ++n) {
                    for (std::size_t r0 = 0; r0 < g.out_h; r0 += tile) {
                      const std::size_t r1 = std::min(g.out_h, r0 + tile), cn = (r1 - r0) * g.out_w;
                      detail::im2col(out.grad().data() + n * g.channels * out_plane, g, cols.data(), r0, r1);
                      detail::ConstMatMap cm(cols.data(), K, cn);
                      if (input.requires_grad()) {
                        detail::MatMap gy(input.grad_buffer().data() + n * cin * P, cin, P);
                        gy.middleCols(r0 * g.out_w, cn).noalias() += wm * cm;
                      }
                      if (weight.requires_grad()) {
                        detail::ConstMatMap ym(input.ptr() + n * cin * P, cin, P);
                        detail::MatMap gw(weight.grad_buffer().data(), cin, K);
                        gw.noalias() += ym.middleCols(r0 * g.out_w, cn) * cm.transpose();
                      }
                    }
                  }
                  if (bias && bias->requires_grad()) detail::bias_backward(*bias, out);
                });
  }
  return out;
}

}  // namespace wheatnet
