#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "support/gradcheck.hpp"
#include "wheatnet/model.hpp"

using namespace wheatnet;
using wheatnet::testing::check_gradients;
using wheatnet::testing::probe;
using wheatnet::testing::random_tensor;

namespace {

WheatNetConfig tiny(double wm = 0.0625, std::uint64_t seed = 3) {
  WheatNetConfig c;
  c.width_multiplier = wm;
  c.seed = seed;
  return c;
}

// Parameter count written out from the backbone table and head widths.
std::size_t counted_by_hand() {
  auto conv = [](std::size_t ci, std::size_t co, std::size_t k) { return ci * co * k * k + co; };
  std::size_t n = conv(3, 32, 3);
  const std::size_t t[] = {1, 6, 6, 6}, c[] = {48, 64, 160, 256}, reps[] = {1, 2, 3, 4};
  std::size_t in = 32;
  for (int s = 0; s < 4; ++s) {
    for (std::size_t r = 0; r < reps[s]; ++r) {
      const std::size_t hid = in * t[s];
      n += conv(in, hid, 1) + (hid * 9 + hid) + conv(hid, c[s], 1);
      in = c[s];
    }
  }
  n += conv(64, 64, 2) + conv(160, 64, 2) + conv(256, 80, 2);  // deconv: same count as a conv
  const std::size_t fused = 48 + 64 + 64 + 80;
  n += conv(fused, 128, 1) + conv(128, 64, 1) + conv(64, 32, 1) + conv(32, 1, 1);
  n += conv(fused, 128, 3) + conv(128, 128, 3) + conv(128, 64, 3);
  n += conv(64 + 32, 128, 3) + conv(128, 64, 3) + conv(64, 1, 1);
  return n;
}

ModelParams block_params(std::size_t ch, double value_expand, double value_dw, double value_project) {
  ModelParams p;
  auto eye = [ch](double v) {
    Tensor t = Tensor::zeros({ch, ch, 1, 1});
    for (std::size_t i = 0; i < ch; ++i) t.mutable_ptr()[i * ch + i] = v;
    return t;
  };
  Tensor dw = Tensor::zeros({ch, 1, 3, 3});
  for (std::size_t i = 0; i < ch; ++i) dw.mutable_ptr()[i * 9 + 4] = value_dw;
  p.insert("x.expand.weight", eye(value_expand));
  p.insert("x.expand.bias", Tensor::zeros({ch, 1, 1, 1}));
  p.insert("x.dw.weight", dw);
  p.insert("x.dw.bias", Tensor::zeros({ch, 1, 1, 1}));
  p.insert("x.project.weight", eye(value_project));
  p.insert("x.project.bias", Tensor::zeros({ch, 1, 1, 1}));
  return p;
}

std::vector<double> run(const WheatNet& net, const Tensor& image) {
  Tape tape = Tape::no_grad();
  const ForwardOutputs o = net.forward(tape, image);
  std::vector<double> v(o.density.data().begin(), o.density.data().end());
  v.insert(v.end(), o.locmap.data().begin(), o.locmap.data().end());
  return v;
}

}  // namespace

TEST(Layout, ParamCountAtFullWidth) {
  const std::size_t n = param_count(WheatNetConfig{});
  EXPECT_EQ(n, counted_by_hand());
  EXPECT_GE(n, 3'400'000u);
  EXPECT_LE(n, 4'600'000u);
  EXPECT_EQ(init_params(WheatNetConfig{}).scalar_count(), n);
}

TEST(Layout, BlocksFollowBackboneTable) {
  const Layout l = make_layout(WheatNetConfig{});
  ASSERT_EQ(l.blocks.size(), 10u);
  EXPECT_EQ(l.stem.out_channels, 32);
  EXPECT_EQ(l.blocks[0].hidden_channels, 32);  // t = 1
  EXPECT_EQ(l.blocks[0].out_channels, 48);
  EXPECT_EQ(l.blocks[1].hidden_channels, 48 * 6);
  EXPECT_EQ(l.blocks[1].stride, 2);
  EXPECT_EQ(l.blocks[2].stride, 1);
  EXPECT_TRUE(l.blocks[2].residual());
  EXPECT_FALSE(l.blocks[3].residual());
  EXPECT_EQ(l.blocks[9].out_channels, 256);
  EXPECT_EQ(l.stage_end, (std::array<std::size_t, 4>{1, 3, 6, 10}));
  EXPECT_EQ(l.fused_channels, 256);
}

TEST(Layout, WidthMultiplierRoundsToAtLeastOne) {
  EXPECT_EQ(make_layout(tiny(0.25)).blocks[0].out_channels, 12);
  const Layout l = make_layout(tiny(0.001));
  for (const LayerSpec& s : l.layers()) {
    EXPECT_GE(s.in_channels, 1);
    EXPECT_GE(s.out_channels, 1);
  }
  WheatNetConfig bad;
  bad.width_multiplier = 0.0;
  EXPECT_THROW(make_layout(bad), DataError);
}

TEST(Params, NoNormalizationAndUniqueNames) {
  const ModelParams p = init_params(WheatNetConfig{});
  for (const auto& [name, t] : p) {
    const bool w = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    const bool b = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    EXPECT_TRUE(w || b) << name;
    EXPECT_EQ(name.find("bn"), std::string::npos) << name;
    EXPECT_EQ(name.find("norm"), std::string::npos) << name;
  }
  ModelParams q;
  q.insert("a.weight", Tensor::zeros({1, 1, 1, 1}));
  EXPECT_THROW(q.insert("a.weight", Tensor::zeros({1, 1, 1, 1})), DataError);
}

TEST(Params, XavierBoundsPriorBiasAndSeeding) {
  const WheatNetConfig cfg = tiny(0.25);
  const ModelParams a = init_params(cfg, 1), b = init_params(cfg, 1), c = init_params(cfg, 2);
  for (const LayerSpec& s : make_layout(cfg).layers()) {
    const Tensor& w = a.get(s.name + ".weight");
    const Shape ws = w.shape();
    double fi = double(ws.c * ws.plane()), fo = double(ws.n * ws.plane());
    if (s.kind == LayerKind::Depthwise) fi = fo = double(ws.plane());
    const double bound = cfg.init_gain * std::sqrt(6.0 / (fi + fo));
    double peak = 0.0;
    for (double v : w.data()) peak = std::max(peak, std::abs(v));
    if (s.name == "count.conv3") {
      EXPECT_EQ(peak, 0.0);  // zero density at init
      continue;
    }
    EXPECT_LE(peak, bound) << s.name;
    if (w.numel() >= 64) {
      EXPECT_GT(peak, 0.8 * bound) << s.name;
    }
    if (s.name != "loc.conv4") {
      for (double v : a.get(s.name + ".bias").data()) EXPECT_EQ(v, 0.0);
    }
  }
  EXPECT_NEAR(a.get("loc.conv4.bias").data()[0], -std::log(99.0), 1e-12);  // sigmoid -> 0.01
  EXPECT_TRUE(std::equal(a.get("stem.weight").data().begin(), a.get("stem.weight").data().end(),
                         b.get("stem.weight").data().begin()));
  EXPECT_NE(a.get("stem.weight").data()[0], c.get("stem.weight").data()[0]);
}

TEST(Bottleneck, IdentityWiredResidualDoubles) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 4, 6, 5}, rng, 0.1, 1.0);
  Tape tape = Tape::no_grad();
  const Tensor y = bottleneck(tape, x, block_params(4, 1, 1, 1), "x", 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], 2.0 * x.data()[i]);
}

TEST(Bottleneck, ZeroWeightsPassInputThrough) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Tape tape = Tape::no_grad();
  const Tensor y = bottleneck(tape, x, block_params(3, 0, 0, 0), "x", 1);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Bottleneck, StrideTwoHalvesRoundingUp) {
  std::mt19937_64 rng(3);
  Tape tape = Tape::no_grad();
  const Tensor y = bottleneck(tape, random_tensor({1, 3, 7, 9}, rng), block_params(3, 1, 1, 1), "x", 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 5}));
}

TEST(Backbone, FeatureShapesAtFullWidth) {
  const WheatNet net(WheatNetConfig{});
  std::mt19937_64 rng(4);
  Tape tape = Tape::no_grad();
  const BackboneFeatures f = net.backbone(tape, random_tensor({1, 3, 64, 96}, rng, 0, 1));
  EXPECT_EQ(f.f1.shape(), (Shape{1, 48, 32, 48}));
  EXPECT_EQ(f.f2.shape(), (Shape{1, 64, 16, 24}));
  EXPECT_EQ(f.f3.shape(), (Shape{1, 160, 8, 12}));
  EXPECT_EQ(f.f4.shape(), (Shape{1, 256, 4, 6}));
}

TEST(Backbone, PatchSizedInputAtFullWidth) {
  // 304 = 300 padded to a multiple of 16
  const WheatNet net(WheatNetConfig{});
  Tape tape = Tape::no_grad();
  const BackboneFeatures f = net.backbone(tape, Tensor::filled({1, 3, 304, 304}, 0.5));
  EXPECT_EQ(f.f1.shape(), (Shape{1, 48, 152, 152}));
  EXPECT_EQ(f.f4.shape(), (Shape{1, 256, 19, 19}));
}

TEST(Backbone, RejectsBadInput) {
  const WheatNet net(tiny());
  Tape tape = Tape::no_grad();
  EXPECT_THROW(net.backbone(tape, Tensor::zeros({1, 1, 32, 32})), ShapeError);
  EXPECT_THROW(net.backbone(tape, Tensor::zeros({1, 3, 40, 32})), ShapeError);
}

TEST(Merge, ConcatenatesAtHalfResolution) {
  const WheatNet net(tiny(0.25));
  std::mt19937_64 rng(5);
  Tape tape = Tape::no_grad();
  const BackboneFeatures f = net.backbone(tape, random_tensor({1, 3, 48, 32}, rng, 0, 1));
  const Tensor fused = merge_multiscale(tape, f, net.params(), net.layout());
  EXPECT_EQ(fused.shape(), (Shape{1, std::size_t(net.layout().fused_channels), 24, 16}));
  EXPECT_EQ(net.layout().fused_channels, 12 + 16 + 16 + 20);

  BackboneFeatures z{f.f1, Tensor::zeros(f.f2.shape()), Tensor::zeros(f.f3.shape()), Tensor::zeros(f.f4.shape())};
  const Tensor fz = merge_multiscale(tape, z, net.params(), net.layout());
  for (std::size_t i = 0; i < f.f1.numel(); ++i) EXPECT_EQ(fz.data()[i], f.f1.data()[i]);
}

TEST(Heads, ZeroWeightsGiveBias) {
  const WheatNetConfig cfg = tiny(0.125);
  ModelParams p = init_params(cfg);
  for (auto& [name, t] : p)
    for (double& v : t.mutable_data()) v = 0.0;
  p.get("loc.conv4.bias").mutable_data()[0] = -1.5;
  p.get("count.conv3.bias").mutable_data()[0] = 0.25;
  const WheatNet net(cfg, p);
  Tape tape = Tape::no_grad();
  const ForwardOutputs o = net.forward(tape, Tensor::filled({1, 3, 32, 48}, 0.3));
  EXPECT_EQ(o.loc_logits_half.shape(), (Shape{1, 1, 16, 24}));
  EXPECT_EQ(o.density_half.shape(), (Shape{1, 1, 16, 24}));
  EXPECT_EQ(o.density.shape(), (Shape{1, 1, 32, 48}));
  for (double v : o.loc_logits_half.data()) EXPECT_EQ(v, -1.5);
  for (double v : o.density.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  for (double v : o.locmap.data()) EXPECT_NEAR(v, 1.0 / (1.0 + std::exp(1.5)), 1e-15);
}

TEST(Forward, DeterministicAndBatchIndependent) {
  const WheatNet net(tiny(0.125));
  std::mt19937_64 rng(6);
  const Tensor a = random_tensor({1, 3, 32, 32}, rng, 0, 1), b = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  std::vector<double> ab(a.data().begin(), a.data().end());
  ab.insert(ab.end(), b.data().begin(), b.data().end());
  const auto ya = run(net, a);
  EXPECT_EQ(ya, run(net, a));

  Tape tape = Tape::no_grad();
  const ForwardOutputs o = net.forward(tape, Tensor::from({2, 3, 32, 32}, ab));
  for (std::size_t i = 0; i < 1024; ++i) EXPECT_NEAR(o.density.data()[i], ya[i], 1e-12);
  for (double v : o.locmap.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Forward, RejectsMismatchedParams) {
  ModelParams p = init_params(tiny());
  EXPECT_THROW(WheatNet(tiny(0.125), p), DataError);
  ModelParams extra = init_params(tiny());
  extra.insert("spare.bias", Tensor::zeros({1, 1, 1, 1}));
  EXPECT_THROW(WheatNet(tiny(), extra), DataError);
}

TEST(Gradients, FullNetworkAtSixteenthWidth) {
  const WheatNetConfig cfg = tiny(0.0625, 11);
  std::mt19937_64 rng(12);
  ModelParams params = init_params(cfg);
  // nonzero biases and density weights put gradient on every path
  for (auto& [name, t] : params)
    if (name.find(".bias") != std::string::npos || name == "count.conv3.weight")
      for (double& v : t.mutable_data()) v = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  const WheatNet net(cfg, params);
  const Tensor image = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  const Tensor cd = random_tensor({2, 1, 32, 32}, rng), cl = random_tensor({2, 1, 32, 32}, rng);
  auto loss = [&](Tape& tape) {
    const ForwardOutputs o = net.forward(tape, image);
    return add(tape, probe(tape, o.density, cd), probe(tape, o.locmap, cl));
  };
  std::vector<std::pair<std::string, Tensor>> wrt{{"image", image}};
  for (const auto& [name, t] : net.params()) wrt.emplace_back(name, t);
  const auto r = check_gradients(loss, wrt, 4, rng, 1e-5, true);
  EXPECT_GT(r.checked, 300u);
  EXPECT_LT(r.kinks, r.checked);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(Weights, RoundTripIsBitwiseStable) {
  const WheatNetConfig cfg = tiny(0.125, 21);
  const ModelParams p = init_params(cfg);
  const std::string bytes = encode_weights(p, cfg);
  const LoadedWeights a = decode_weights(bytes), b = decode_weights(bytes);
  EXPECT_EQ(a.config.to_json(), cfg.to_json());
  EXPECT_EQ(encode_weights(a.params, a.config), bytes);

  std::mt19937_64 rng(8);
  const Tensor image = random_tensor({1, 3, 48, 32}, rng, 0, 1);
  const auto ya = run(WheatNet(a.config, a.params), image);
  const auto yb = run(WheatNet(b.config, b.params), image);
  ASSERT_EQ(ya.size(), yb.size());
  EXPECT_EQ(std::memcmp(ya.data(), yb.data(), ya.size() * sizeof(double)), 0);

  // stored as f32: equal to the original network with weights rounded once
  ModelParams rounded = p.clone();
  for (auto& [name, t] : rounded)
    for (double& v : t.mutable_data()) v = static_cast<float>(v);
  EXPECT_EQ(run(WheatNet(cfg, rounded), image), ya);
}

TEST(Weights, DecodeErrors) {
  const WheatNetConfig cfg = tiny();
  const std::string bytes = encode_weights(init_params(cfg), cfg);
  EXPECT_THROW(decode_weights("WHNX" + bytes.substr(4)), DataError);
  EXPECT_THROW(decode_weights(bytes.substr(0, bytes.size() / 2)), DataError);
  EXPECT_THROW(decode_weights(bytes + "x"), DataError);

  // config blob claiming a wider network than the stored tensors
  WheatNetConfig wider = cfg;
  wider.width_multiplier = 0.125;
  const std::string a = cfg.to_json().dump(), b = wider.to_json().dump();
  std::string swapped = bytes.substr(0, bytes.size() - a.size() - 4);
  detail::put_le<std::uint32_t>(swapped, static_cast<std::uint32_t>(b.size()));
  swapped += b;
  EXPECT_THROW(decode_weights(swapped), DataError);
}
