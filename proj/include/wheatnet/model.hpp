#pragma once

// WheatNet: a truncated MobileNetV2 encoder (stem + four bottleneck stages),
// a multi-scale merge back to 1/2 resolution, and two heads. The
// localization head is four 1x1 convs; the counting head is three dilated
// 3x3 convs whose output is concatenated with the localization head's
// third-layer features and refined by three more convs. Both half-resolution
// maps are bilinearly upsampled to the input size.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wheatnet/conv.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/init.hpp"
#include "wheatnet/io.hpp"
#include "wheatnet/ops.hpp"
#include "wheatnet/tape.hpp"
#include "wheatnet/tensor.hpp"

namespace wheatnet {

struct WheatNetConfig {
  double width_multiplier = 1.0;
  int dilation_rate = 2;
  // Stem output followed by the output channels of the four bottleneck stages.
  std::array<int, 5> backbone_channels{32, 48, 64, 160, 256};
  std::array<int, 4> bottleneck_expansions{1, 6, 6, 6};
  std::array<int, 4> bottleneck_repeats{1, 2, 3, 4};
  std::array<int, 4> bottleneck_strides{1, 2, 2, 2};
  // Output channels of the learned x2 upsampling on the f2, f3 and f4 paths.
  std::array<int, 3> merge_channels{64, 64, 80};
  int merge_kernel = 2;
  std::array<int, 3> dilated_channels{128, 128, 64};
  std::array<int, 2> count_channels{128, 64};
  std::array<int, 3> loc_channels{128, 64, 32};
  // Initial foreground probability of the localization head; its last bias
  // starts at -log((1 - p) / p) instead of 0.
  double loc_prior = 0.01;
  // Xavier gain. sqrt(2) is the usual ReLU gain; at 1 the activations of this
  // normalization-free stack shrink roughly 8x per bottleneck.
  double init_gain = std::sqrt(2.0);
  std::uint64_t seed = 0;

  /// Channel count after the width multiplier, never below 1.
  int scaled(int channels) const {
    return std::max(1, static_cast<int>(std::lround(channels * width_multiplier)));
  }

  void validate() const {
    if (!(width_multiplier > 0.0)) throw DataError("model config: width_multiplier must be > 0");
    if (dilation_rate < 1) throw DataError("model config: dilation_rate must be >= 1");
    if (merge_kernel < 1) throw DataError("model config: merge_kernel must be >= 1");
    if (!(loc_prior > 0.0 && loc_prior < 1.0)) throw DataError("model config: loc_prior must be in (0, 1)");
    if (!(init_gain > 0.0)) throw DataError("model config: init_gain must be > 0");
    for (int t : bottleneck_expansions)
      if (t < 1) throw DataError("model config: bottleneck expansion must be >= 1");
    for (int n : bottleneck_repeats)
      if (n < 1) throw DataError("model config: bottleneck repeats must be >= 1");
    for (int s : bottleneck_strides)
      if (s != 1 && s != 2) throw DataError("model config: bottleneck strides must be 1 or 2");
  }

  nlohmann::json to_json() const {
    return {{"width_multiplier", width_multiplier},
            {"dilation_rate", dilation_rate},
            {"backbone_channels", backbone_channels},
            {"bottleneck_expansions", bottleneck_expansions},
            {"bottleneck_repeats", bottleneck_repeats},
            {"bottleneck_strides", bottleneck_strides},
            {"merge_channels", merge_channels},
            {"merge_kernel", merge_kernel},
            {"dilated_channels", dilated_channels},
            {"count_channels", count_channels},
            {"loc_channels", loc_channels},
            {"loc_prior", loc_prior},
            {"init_gain", init_gain},
            {"seed", seed}};
  }

  static WheatNetConfig from_json(const nlohmann::json& j) {
    WheatNetConfig c;
    auto opt = [&j](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    try {
      opt("width_multiplier", c.width_multiplier);
      opt("dilation_rate", c.dilation_rate);
      opt("backbone_channels", c.backbone_channels);
      opt("bottleneck_expansions", c.bottleneck_expansions);
      opt("bottleneck_repeats", c.bottleneck_repeats);
      opt("bottleneck_strides", c.bottleneck_strides);
      opt("merge_channels", c.merge_channels);
      opt("merge_kernel", c.merge_kernel);
      opt("dilated_channels", c.dilated_channels);
      opt("count_channels", c.count_channels);
      opt("loc_channels", c.loc_channels);
      opt("loc_prior", c.loc_prior);
      opt("init_gain", c.init_gain);
      opt("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

enum class LayerKind { Conv, Depthwise, Deconv };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;

  Shape weight_shape() const {
    const auto k = static_cast<std::size_t>(kernel);
    const auto ci = static_cast<std::size_t>(in_channels), co = static_cast<std::size_t>(out_channels);
    switch (kind) {
      case LayerKind::Depthwise: return {ci, 1, k, k};
      case LayerKind::Deconv: return {ci, co, k, k};
      case LayerKind::Conv: break;
    }
    return {co, ci, k, k};
  }
  Shape bias_shape() const { return {static_cast<std::size_t>(out_channels), 1, 1, 1}; }
  std::size_t param_count() const { return weight_shape().numel() + bias_shape().numel(); }
};

struct BottleneckSpec {
  std::string prefix;
  int in_channels, hidden_channels, out_channels, stride;
  bool residual() const { return stride == 1 && in_channels == out_channels; }
};

/// Every layer of the network, in execution order, for a given config.
struct Layout {
  LayerSpec stem;
  std::vector<BottleneckSpec> blocks;
  std::array<std::size_t, 4> stage_end{};  // index one past each stage's last block
  std::array<LayerSpec, 3> merge;
  int fused_channels = 0;
  std::array<LayerSpec, 4> loc;
  std::array<LayerSpec, 3> dilated;
  std::array<LayerSpec, 3> count;

  std::vector<LayerSpec> layers() const {
    std::vector<LayerSpec> out{stem};
    for (const auto& b : blocks) {
      out.push_back({b.prefix + ".expand", LayerKind::Conv, b.in_channels, b.hidden_channels, 1});
      out.push_back({b.prefix + ".dw", LayerKind::Depthwise, b.hidden_channels, b.hidden_channels, 3});
      out.push_back({b.prefix + ".project", LayerKind::Conv, b.hidden_channels, b.out_channels, 1});
    }
    out.insert(out.end(), merge.begin(), merge.end());
    out.insert(out.end(), loc.begin(), loc.end());
    out.insert(out.end(), dilated.begin(), dilated.end());
    out.insert(out.end(), count.begin(), count.end());
    return out;
  }
};

inline Layout make_layout(const WheatNetConfig& cfg) {
  cfg.validate();
  Layout l;
  const auto& bc = cfg.backbone_channels;
  l.stem = {"stem", LayerKind::Conv, 3, cfg.scaled(bc[0]), 3};
  int in = l.stem.out_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const int out = cfg.scaled(bc[s + 1]);
    for (int r = 0; r < cfg.bottleneck_repeats[s]; ++r) {
      l.blocks.push_back({"b" + std::to_string(s + 1) + "." + std::to_string(r), in,
                          in * cfg.bottleneck_expansions[s], out, r == 0 ? cfg.bottleneck_strides[s] : 1});
      in = out;
    }
    l.stage_end[s] = l.blocks.size();
  }
  static const char* kPaths[3] = {"merge.f2", "merge.f3", "merge.f4"};
  l.fused_channels = cfg.scaled(bc[1]);
  for (std::size_t p = 0; p < 3; ++p) {
    l.merge[p] = {kPaths[p], LayerKind::Deconv, cfg.scaled(bc[p + 2]), cfg.scaled(cfg.merge_channels[p]), cfg.merge_kernel};
    l.fused_channels += l.merge[p].out_channels;
  }
  const int f = l.fused_channels;
  const auto& lc = cfg.loc_channels;
  l.loc = {LayerSpec{"loc.conv1", LayerKind::Conv, f, cfg.scaled(lc[0]), 1},
           LayerSpec{"loc.conv2", LayerKind::Conv, cfg.scaled(lc[0]), cfg.scaled(lc[1]), 1},
           LayerSpec{"loc.conv3", LayerKind::Conv, cfg.scaled(lc[1]), cfg.scaled(lc[2]), 1},
           LayerSpec{"loc.conv4", LayerKind::Conv, cfg.scaled(lc[2]), 1, 1}};
  const auto& dc = cfg.dilated_channels;
  l.dilated = {LayerSpec{"count.dil1", LayerKind::Conv, f, cfg.scaled(dc[0]), 3},
               LayerSpec{"count.dil2", LayerKind::Conv, cfg.scaled(dc[0]), cfg.scaled(dc[1]), 3},
               LayerSpec{"count.dil3", LayerKind::Conv, cfg.scaled(dc[1]), cfg.scaled(dc[2]), 3}};
  const auto& cc = cfg.count_channels;
  l.count = {LayerSpec{"count.conv1", LayerKind::Conv, cfg.scaled(dc[2]) + cfg.scaled(lc[2]), cfg.scaled(cc[0]), 3},
             LayerSpec{"count.conv2", LayerKind::Conv, cfg.scaled(cc[0]), cfg.scaled(cc[1]), 3},
             LayerSpec{"count.conv3", LayerKind::Conv, cfg.scaled(cc[1]), 1, 1}};
  return l;
}

/// Named weights and biases. Names are "<layer>.weight" and "<layer>.bias".
class ModelParams {
 public:
  void insert(const std::string& name, Tensor t) {
    if (!tensors_.emplace(name, std::move(t)).second) {
      throw DataError("model params: duplicate parameter '" + name + "'");
    }
  }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError("model params: missing parameter '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

  void set_requires_grad(bool v) {
    for (auto& [_, t] : tensors_) t.set_requires_grad(v);
  }

  ModelParams clone() const {
    ModelParams out;
    for (const auto& [name, t] : tensors_) out.insert(name, t.clone());
    return out;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Xavier-uniform weights (scaled by init_gain) drawn in layout order from `seed`. Biases are zero
/// apart from the localization output, which starts at the prior logit.
inline ModelParams init_params(const WheatNetConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams p;
  for (const LayerSpec& layer : make_layout(cfg).layers()) {
    const Shape ws = layer.weight_shape();
    Tensor w = layer.kind == LayerKind::Depthwise
                   ? xavier_init(ws, static_cast<double>(ws.plane()), static_cast<double>(ws.plane()), rng, true,
                                 cfg.init_gain)
                   : xavier_init(ws, rng, true, cfg.init_gain);
    p.insert(layer.name + ".weight", std::move(w));
    p.insert(layer.name + ".bias", Tensor::zeros(layer.bias_shape(), true));
  }
  p.get("loc.conv4.bias").mutable_data()[0] = -std::log((1.0 - cfg.loc_prior) / cfg.loc_prior);
  // density starts at zero
  for (double& v : p.get("count.conv3.weight").mutable_data()) v = 0.0;
  return p;
}

inline ModelParams init_params(const WheatNetConfig& cfg) { return init_params(cfg, cfg.seed); }

/// Total scalar parameters implied by the config (no allocation).
inline std::size_t param_count(const WheatNetConfig& cfg) {
  std::size_t n = 0;
  for (const LayerSpec& layer : make_layout(cfg).layers()) n += layer.param_count();
  return n;
}

// ---------------------------------------------------------------- layers

namespace layers {

inline Tensor conv(Tape& tape, const Tensor& x, const ModelParams& p, const std::string& name,
                   std::size_t stride = 1, std::size_t dilation = 1) {
  return conv2d(tape, x, p.get(name + ".weight"), p.get(name + ".bias"), {stride, dilation});
}

inline Tensor conv_relu(Tape& tape, const Tensor& x, const ModelParams& p, const std::string& name,
                        std::size_t stride = 1, std::size_t dilation = 1) {
  return relu(tape, conv(tape, x, p, name, stride, dilation));
}

}  // namespace layers

/// Inverted residual block: 1x1 expand + ReLU, 3x3 depthwise (stride s) +
/// ReLU, linear 1x1 projection, plus identity skip when shapes allow.
inline Tensor bottleneck(Tape& tape, const Tensor& input, const ModelParams& p,
                         const std::string& prefix, std::size_t stride) {
  Tensor h = layers::conv_relu(tape, input, p, prefix + ".expand");
  h = relu(tape, depthwise_conv2d(tape, h, p.get(prefix + ".dw.weight"), p.get(prefix + ".dw.bias"), {stride, 1}));
  Tensor out = layers::conv(tape, h, p, prefix + ".project");
  if (stride == 1 && out.shape() == input.shape()) out = add(tape, out, input);
  return out;
}

struct BackboneFeatures {
  Tensor f1;  // 1/2
  Tensor f2;  // 1/4
  Tensor f3;  // 1/8
  Tensor f4;  // 1/16
};

inline void check_input(const Tensor& image) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("wheatnet: input must have 3 channels, got C=" + std::to_string(s.c));
  if (s.h % 16 != 0 || s.w % 16 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("wheatnet: input H=" + std::to_string(s.h) + ", W=" + std::to_string(s.w) +
                     " must be positive multiples of 16 (pad the image first)");
  }
}

inline BackboneFeatures backbone_forward(Tape& tape, const Tensor& image, const ModelParams& p,
                                         const Layout& layout) {
  check_input(image);
  Tensor x = layers::conv_relu(tape, image, p, "stem", 2);
  std::array<Tensor, 4> stage_out;
  std::size_t b = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    for (; b < layout.stage_end[s]; ++b) {
      x = bottleneck(tape, x, p, layout.blocks[b].prefix, static_cast<std::size_t>(layout.blocks[b].stride));
    }
    stage_out[s] = x;
  }
  return {stage_out[0], stage_out[1], stage_out[2], stage_out[3]};
}

/// Brings f2..f4 to f1's resolution (nearest x1/x2/x4, then a learned x2
/// deconvolution) and concatenates [f1, f2', f3', f4'] along channels.
inline Tensor merge_multiscale(Tape& tape, const BackboneFeatures& f, const ModelParams& p,
                               const Layout& layout) {
  auto path = [&](const Tensor& x, std::size_t nearest, const LayerSpec& layer) {
    Tensor up = nearest > 1 ? upsample_nearest(tape, x, nearest) : x;
    return relu(tape, conv_transpose2d(tape, up, p.get(layer.name + ".weight"), p.get(layer.name + ".bias"), 2));
  };
  return concat_channels(tape, {f.f1, path(f.f2, 1, layout.merge[0]), path(f.f3, 2, layout.merge[1]),
                                path(f.f4, 4, layout.merge[2])});
}

struct LocalizationOutputs {
  Tensor features;  // shared with the counting head
  Tensor logits;    // single channel, 1/2 resolution
};

inline LocalizationOutputs localization_branch(Tape& tape, const Tensor& fused, const ModelParams& p,
                                               const Layout& layout) {
  Tensor h = layers::conv_relu(tape, fused, p, layout.loc[0].name);
  h = layers::conv_relu(tape, h, p, layout.loc[1].name);
  Tensor features = layers::conv_relu(tape, h, p, layout.loc[2].name);
  Tensor logits = layers::conv(tape, features, p, layout.loc[3].name);
  return {features, logits};
}

inline Tensor counting_branch(Tape& tape, const Tensor& fused, const Tensor& loc_features,
                              const ModelParams& p, const Layout& layout, std::size_t dilation) {
  Tensor h = fused;
  for (const LayerSpec& layer : layout.dilated) h = layers::conv_relu(tape, h, p, layer.name, 1, dilation);
  h = concat_channels(tape, {h, loc_features});
  h = layers::conv_relu(tape, h, p, layout.count[0].name);
  h = layers::conv_relu(tape, h, p, layout.count[1].name);
  return layers::conv(tape, h, p, layout.count[2].name);
}

struct ForwardOutputs {
  Tensor density;        // (N,1,H,W), linear
  Tensor locmap;         // (N,1,H,W), in (0,1)
  Tensor density_half;   // (N,1,H/2,W/2)
  Tensor loc_logits_half;
};

/// Network with its config and parameters. Forward requires H, W divisible by 16.
class WheatNet {
 public:
  explicit WheatNet(WheatNetConfig cfg) : cfg_(std::move(cfg)), layout_(make_layout(cfg_)), params_(init_params(cfg_)) {}
  WheatNet(WheatNetConfig cfg, ModelParams params)
      : cfg_(std::move(cfg)), layout_(make_layout(cfg_)), params_(std::move(params)) {
    validate_params(params_);
  }

  const WheatNetConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  /// Throws DataError when names or shapes differ from the layout.
  void validate_params(const ModelParams& p) const {
    std::size_t expected = 0;
    for (const LayerSpec& layer : layout_.layers()) {
      for (auto [suffix, shape] : {std::pair{".weight", layer.weight_shape()}, std::pair{".bias", layer.bias_shape()}}) {
        const std::string name = layer.name + suffix;
        const Tensor& t = p.get(name);
        if (t.shape() != shape) {
          throw DataError("model params: '" + name + "' has shape " + t.shape().str() +
                          ", config expects " + shape.str());
        }
        ++expected;
      }
    }
    if (expected != p.size()) {
      throw DataError("model params: " + std::to_string(p.size()) + " tensors, config expects " +
                      std::to_string(expected));
    }
  }

  BackboneFeatures backbone(Tape& tape, const Tensor& image) const {
    return backbone_forward(tape, image, params_, layout_);
  }

  ForwardOutputs forward(Tape& tape, const Tensor& image) const {
    const BackboneFeatures f = backbone(tape, image);
    const Tensor fused = merge_multiscale(tape, f, params_, layout_);
    const LocalizationOutputs loc = localization_branch(tape, fused, params_, layout_);
    const Tensor dens = counting_branch(tape, fused, loc.features, params_, layout_,
                                        static_cast<std::size_t>(cfg_.dilation_rate));
    const Shape s = image.shape();
    ForwardOutputs out;
    out.density_half = dens;
    out.loc_logits_half = loc.logits;
    out.density = upsample_bilinear(tape, dens, s.h, s.w);
    out.locmap = sigmoid(tape, upsample_bilinear(tape, loc.logits, s.h, s.w));
    return out;
  }

 private:
  WheatNetConfig cfg_;
  Layout layout_;
  ModelParams params_;
};

// ---------------------------------------------------------------- weights file
//
// "WHNW" | u16 version | u32 record count | records | u32 json length | json config
// record: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
// Biases are stored with rank 1, kernels with rank 4.

inline constexpr std::uint16_t kWeightsVersion = 1;

inline std::string encode_weights(const ModelParams& params, const WheatNetConfig& cfg) {
  std::string out = "WHNW";
  detail::put_le<std::uint16_t>(out, kWeightsVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    const Shape s = t.shape();
    const bool vec = s.c == 1 && s.h == 1 && s.w == 1;
    if (vec) {
      detail::put_le<std::uint8_t>(out, 1);
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.n));
    } else {
      detail::put_le<std::uint8_t>(out, 4);
      for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) detail::put_le<float>(out, static_cast<float>(v));
  }
  const std::string js = cfg.to_json().dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  return out;
}

struct LoadedWeights {
  WheatNetConfig config;
  ModelParams params;
};

inline LoadedWeights decode_weights(std::string_view bytes, const std::string& what = "weights") {
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "WHNW") throw DataError(what + ": bad magic, expected WHNW");
  const auto version = r.get<std::uint16_t>();
  if (version != kWeightsVersion) throw DataError(what + ": unsupported format version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  LoadedWeights lw;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name(r.take(len));
    const auto rank = r.get<std::uint8_t>();
    if (rank < 1 || rank > 4) throw DataError(what + ": '" + name + "' has unsupported rank " + std::to_string(rank));
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    for (std::uint8_t d = 0; d < rank; ++d) dims[d] = r.get<std::uint32_t>();
    const Shape shape{dims[0], dims[1], dims[2], dims[3]};
    std::vector<double> values(shape.numel());
    for (double& v : values) v = r.get<float>();
    lw.params.insert(name, Tensor::from(shape, std::move(values), true));
  }
  const auto js_len = r.get<std::uint32_t>();
  const std::string_view js = r.take(js_len);
  if (r.remaining() != 0) throw DataError(what + ": trailing bytes after config");
  try {
    lw.config = WheatNetConfig::from_json(nlohmann::json::parse(js));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": bad config blob: " + e.what());
  }
  WheatNet validated(lw.config, lw.params);  // shape check against the embedded config
  (void)validated;
  return lw;
}

inline void save_weights(const std::string& path, const ModelParams& params, const WheatNetConfig& cfg) {
  write_file(path, encode_weights(params, cfg));
}

inline LoadedWeights load_weights(const std::string& path) { return decode_weights(read_file(path), path); }

}  // namespace wheatnet
