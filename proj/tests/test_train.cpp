#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "support/gradcheck.hpp"
#include "wheatnet/corpus.hpp"
#include "wheatnet/init.hpp"
#include "wheatnet/train.hpp"

using namespace wheatnet;
using wheatnet::testing::check_gradients;
using wheatnet::testing::random_tensor;

namespace {

Tensor one(double v) { return Tensor::from({1, 1, 1, 1}, {v}); }

double focal_value(double p, double y, const FocalParams& fp) {
  Tape tape = Tape::no_grad();
  return focal_loss(tape, one(p), one(y), fp).item();
}

Tensor binary_map(Shape s, std::mt19937_64& rng, double rate) {
  std::bernoulli_distribution b(rate);
  std::vector<double> v(s.numel());
  for (double& x : v) x = b(rng) ? 1.0 : 0.0;
  return Tensor::from(s, std::move(v));
}

std::vector<TrainingPatch> small_patches(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SyntheticParams sp;
  sp.size = 48;
  sp.heads_min = 2;
  sp.heads_max = 8;
  std::vector<TrainingPatch> out;
  for (auto& s : generate_synthetic(n, sp, rng)) out.push_back(crop_patch(s.image, s.annotations, 8, 8, 32));
  return out;
}

WheatNetConfig tiny_model() {
  WheatNetConfig m;
  m.width_multiplier = 0.0625;
  m.seed = 4;
  return m;
}

TrainConfig short_run() {
  TrainConfig c;
  c.batch_size = 2;
  c.iterations = 6;
  c.lr_initial = 1e-3;
  c.lr_final = 1e-4;
  c.val_every = 2;
  c.seed = 9;
  return c;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    const auto u = b.get(name).data();
    if (!std::equal(t.data().begin(), t.data().end(), u.begin(), u.end())) return false;
  }
  return true;
}

}  // namespace

TEST(Focal, PositivePixelAtHalf) {
  // 0.25 * ln 2 * 0.5^2
  EXPECT_NEAR(focal_value(0.5, 1.0, {}), 0.0433217, 1e-7);
  EXPECT_NEAR(focal_value(0.5, 1.0, {}), 0.25 * std::log(2.0) * 0.25, 1e-15);
}

TEST(Focal, NegativePixelAtHalfIsUnweighted) {
  EXPECT_NEAR(focal_value(0.5, 0.0, {}), 0.1732868, 1e-7);
  FocalParams conv;
  conv.form = FocalForm::Conventional;
  EXPECT_NEAR(focal_value(0.5, 0.0, conv), 0.75 * std::log(2.0) * 0.25, 1e-15);
}

TEST(Focal, GammaZeroAlphaOneIsBinaryCrossEntropy) {
  std::mt19937_64 rng(1);
  const Shape s{3, 1, 17, 13};
  const Tensor p = random_tensor(s, rng, 0.001, 0.999);
  const Tensor y = binary_map(s, rng, 0.2);
  double bce = 0.0;
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double q = p.data()[i], t = y.data()[i];
    bce -= t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
  }
  bce /= 3.0;
  FocalParams fp;
  fp.gamma = 0.0;
  fp.alpha = 1.0;
  Tape tape = Tape::no_grad();
  EXPECT_NEAR(focal_loss(tape, p, y, fp).item(), bce, 1e-9);
}

TEST(Focal, ConfidentCorrectPixelsCostLittle) {
  EXPECT_LT(focal_value(0.99, 1.0, {}), 1e-5);
  EXPECT_LT(focal_value(0.01, 0.0, {}), 1e-5);
  EXPECT_GT(focal_value(0.01, 1.0, {}), 1.0);
}

TEST(Focal, ClampedAtExtremes) {
  EXPECT_TRUE(std::isfinite(focal_value(0.0, 1.0, {})));
  EXPECT_TRUE(std::isfinite(focal_value(1.0, 0.0, {})));
  Tape tape;
  Tensor p = Tensor::from({1, 1, 1, 2}, {0.0, 1.0}, true);
  tape.backward(focal_loss(tape, p, Tensor::from({1, 1, 1, 2}, {1.0, 0.0})));
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
}

class FocalGrad : public ::testing::TestWithParam<std::tuple<double, double, FocalForm>> {};

TEST_P(FocalGrad, MatchesFiniteDifferences) {
  const auto [gamma, alpha, form] = GetParam();
  std::mt19937_64 rng(2);
  const Shape s{2, 1, 6, 5};
  const Tensor p = random_tensor(s, rng, 0.05, 0.95);
  const Tensor y = binary_map(s, rng, 0.3);
  const FocalParams fp{gamma, alpha, form, 1e-7};
  const auto r = check_gradients([&](Tape& t) { return focal_loss(t, p, y, fp); }, {{"p", p}}, 1000, rng);
  EXPECT_EQ(r.checked, s.numel());
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Forms, FocalGrad,
                         ::testing::Values(std::tuple{2.0, 0.25, FocalForm::AsPrinted},
                                           std::tuple{2.0, 0.25, FocalForm::Conventional},
                                           std::tuple{0.0, 1.0, FocalForm::AsPrinted},
                                           std::tuple{0.5, 0.6, FocalForm::AsPrinted}));

TEST(Losses, NonNegativeOnRandomMaps) {
  std::mt19937_64 rng(12);
  const Shape s{2, 1, 9, 7};
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor p = random_tensor(s, rng, 0.0, 1.0), y = binary_map(s, rng, 0.2);
    Tape tape = Tape::no_grad();
    EXPECT_GE(focal_loss(tape, p, y).item(), 0.0);
    EXPECT_GE(euclidean_loss(tape, random_tensor(s, rng), random_tensor(s, rng)).item(), 0.0);
  }
}

TEST(Euclidean, HandCaseAndBatchMean) {
  Tape tape = Tape::no_grad();
  EXPECT_EQ(euclidean_loss(tape, Tensor::from({1, 1, 1, 2}, {1, 2}), Tensor::zeros({1, 1, 1, 2})).item(), 5.0);
  EXPECT_EQ(euclidean_loss(tape, Tensor::from({2, 1, 1, 2}, {1, 2, 3, 0}), Tensor::zeros({2, 1, 1, 2})).item(), 7.0);
  EXPECT_THROW(euclidean_loss(tape, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 3})), ShapeError);
}

TEST(Euclidean, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Tensor p = random_tensor({2, 1, 5, 4}, rng), g = random_tensor({2, 1, 5, 4}, rng);
  const auto r = check_gradients([&](Tape& t) { return euclidean_loss(t, p, g); }, {{"p", p}}, 1000, rng);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(TotalLoss, BetaDerivativeIsLocalizationLoss) {
  std::mt19937_64 rng(4);
  const Shape s{2, 1, 8, 8};
  const Tensor pd = random_tensor(s, rng), gd = random_tensor(s, rng);
  const Tensor pl = random_tensor(s, rng, 0.05, 0.95), gl = binary_map(s, rng, 0.3);
  Tape tape = Tape::no_grad();
  const LossParts a = total_loss(tape, pd, gd, pl, gl, 0.0);
  const LossParts b = total_loss(tape, pd, gd, pl, gl, 0.5);
  EXPECT_EQ(a.total.item(), a.density.item());
  EXPECT_NEAR((b.total.item() - a.total.item()) / 0.5, b.localization.item(), 1e-12);
}

TEST(Split, HundredPatchesNinetyTen) {
  const SplitIndices s = split_train_val(100, 0.1, 5);
  EXPECT_EQ(s.train.size(), 90u);
  EXPECT_EQ(s.val.size(), 10u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(split_train_val(100, 0.1, 5).val, s.val);
  EXPECT_NE(split_train_val(100, 0.1, 6).val, s.val);
  EXPECT_EQ(split_train_val(5, 0.1, 0).val.size(), 0u);
}

TEST(Schedule, DefaultEndpoints) {
  TrainConfig c;
  c.iterations = 130001;
  EXPECT_EQ(lr_schedule(0, c), 3e-4);
  EXPECT_NEAR(lr_schedule(130000, c), 1.5e-6, 1e-18);
  EXPECT_NEAR(lr_schedule(65000, c), 2.12e-5, 0.005e-5);
  EXPECT_NEAR(lr_schedule(65000, c), std::sqrt(3e-4 * 1.5e-6), 1e-18);
}

TEST(Schedule, GeometricFromInitialToFinal) {
  TrainConfig c;
  c.lr_initial = 1e-3;
  c.lr_final = 1e-5;
  c.iterations = 101;
  EXPECT_DOUBLE_EQ(lr_schedule(0, c), 1e-3);
  EXPECT_NEAR(lr_schedule(100, c), 1e-5, 1e-18);
  EXPECT_NEAR(lr_schedule(50, c), 1e-4, 1e-17);
  for (int i = 1; i < 100; ++i) {
    EXPECT_LT(lr_schedule(i, c), lr_schedule(i - 1, c));
    EXPECT_NEAR(lr_schedule(i + 1, c) / lr_schedule(i, c), lr_schedule(i, c) / lr_schedule(i - 1, c), 1e-12);
  }
}

TEST(Adam, FirstStepsByHand) {
  ModelParams p;
  p.insert("w", Tensor::from({1, 1, 1, 2}, {1.0, -2.0}, true));
  p.insert("idle", Tensor::from({1, 1, 1, 1}, {3.0}, true));
  AdamState st;
  p.get("w").grad_buffer()[0] = 0.5;
  p.get("w").grad_buffer()[1] = -4.0;
  adam_step(p, st, 0.1);
  // bias-corrected first step moves by lr * g / (|g| + eps)
  EXPECT_NEAR(p.get("w").data()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p.get("w").data()[1], -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.get("idle").data()[0], 3.0);

  p.get("w").zero_grad();
  p.get("w").grad_buffer()[0] = 1.5;
  adam_step(p, st, 0.1);
  const double m = 0.9 * 0.1 * 0.5 + 0.1 * 1.5, v = 0.999 * 0.001 * 0.25 + 0.001 * 2.25;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.get("w").data()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
  EXPECT_EQ(st.step, 2u);
}

TEST(Adam, UnitGradientMovesByLearningRate) {
  ModelParams p;
  p.insert("w", Tensor::from({1, 1, 1, 1}, {0.0}, true));
  p.insert("z", Tensor::from({1, 1, 1, 1}, {2.0}, true));
  p.get("w").grad_buffer()[0] = 1.0;
  p.get("z").grad_buffer()[0] = 0.0;
  AdamState st;
  adam_step(p, st, 0.1);
  EXPECT_NEAR(p.get("w").data()[0], -0.1, 1e-8);
  EXPECT_EQ(p.get("z").data()[0], 2.0);
}

TEST(Adam, NonFiniteGradientRaises) {
  ModelParams p;
  p.insert("w", Tensor::from({1, 1, 1, 1}, {1.0}, true));
  p.get("w").grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  EXPECT_THROW(adam_step(p, st, 0.1), NumericError);
  EXPECT_EQ(p.get("w").data()[0], 1.0);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c = short_run();
  c.focal_form = FocalForm::Conventional;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json({{"batch_size", 0}}), DataError);
  EXPECT_THROW(TrainConfig::from_json({{"lr_initial", 1e-5}, {"lr_final", 1e-3}}), DataError);
  EXPECT_THROW(TrainConfig::from_json({{"focal_form", "other"}}), DataError);
  EXPECT_THROW(TrainConfig::from_json({{"val_fraction", 1.0}}), DataError);
}

TEST(Train, Errors) {
  EXPECT_THROW(train({}, tiny_model(), short_run()), DataError);
  const auto data = small_patches(2, 1);
  TrainConfig c = short_run();
  c.batch_size = 3;
  EXPECT_THROW(train(data, tiny_model(), c), DataError);
}

TEST(Train, NonFiniteInputRaisesNumericError) {
  auto data = small_patches(4, 2);
  for (auto& p : data) p.image.at(0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(data, tiny_model(), short_run()), NumericError);
}

TEST(Train, LogsEveryStepAndValidates) {
  const auto data = small_patches(12, 3);  // 1 validation patch
  std::vector<HistoryEntry> seen;
  TrainHooks hooks;
  hooks.on_step = [&](const HistoryEntry& e) { seen.push_back(e); };
  const Checkpoint ck = train(data, tiny_model(), short_run(), hooks);
  ASSERT_EQ(seen.size(), 6u);
  EXPECT_EQ(seen, ck.history);
  EXPECT_EQ(ck.next_step, 6);
  EXPECT_EQ(ck.optimizer.step, 6u);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(seen[i].step, i);
    EXPECT_DOUBLE_EQ(seen[i].lr, lr_schedule(i, short_run()));
    EXPECT_EQ(seen[i].val_loss.has_value(), i % 2 == 1);
  }
  EXPECT_FALSE(same_params(ck.params, init_params(tiny_model())));
}

TEST(Train, SameSeedSameRun) {
  const auto data = small_patches(8, 4);
  const Checkpoint a = train(data, tiny_model(), short_run());
  const Checkpoint b = train(data, tiny_model(), short_run());
  EXPECT_EQ(a.history, b.history);
  EXPECT_TRUE(same_params(a.params, b.params));
  TrainConfig other = short_run();
  other.seed = 10;
  EXPECT_NE(train(data, tiny_model(), other).history, a.history);
}

TEST(Train, ResumeEqualsUninterrupted) {
  const auto data = small_patches(12, 5);
  TrainConfig c = short_run();
  c.checkpoint_every = 2;
  std::vector<std::string> saved;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& ck) { saved.push_back(encode_checkpoint(ck)); };
  const Checkpoint full = train(data, tiny_model(), c, hooks);
  ASSERT_EQ(saved.size(), 2u);  // after steps 2 and 4; the last step is saved by the caller

  const Checkpoint part = train(data, tiny_model(), c, {}, nullptr, 3);
  EXPECT_EQ(part.next_step, 3);
  const Checkpoint reloaded = decode_checkpoint(encode_checkpoint(part));
  const Checkpoint resumed = train(data, reloaded.model_config, c, {}, &reloaded);
  EXPECT_EQ(resumed.history, full.history);
  EXPECT_TRUE(same_params(resumed.params, full.params));

  const Checkpoint from_hook = decode_checkpoint(saved[1]);
  EXPECT_EQ(from_hook.next_step, 4);
  EXPECT_TRUE(same_params(train(data, tiny_model(), c, {}, &from_hook).params, full.params));
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto data = small_patches(4, 6);
  TrainConfig c = short_run();
  c.iterations = 2;
  const Checkpoint ck = train(data, tiny_model(), c);
  const std::string bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.history, ck.history);
  EXPECT_TRUE(same_params(back.params, ck.params));
  EXPECT_EQ(back.optimizer.m, ck.optimizer.m);
  EXPECT_THROW(decode_checkpoint("WHCX" + bytes.substr(4)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes + "!"), DataError);
}

TEST(Xavier, VarianceMeanAndSeed) {
  const Shape s{100, 10, 3, 3};  // fan_in 90, fan_out 900
  std::mt19937_64 r1(3), r2(3);
  const Tensor w = xavier_init(s, r1);
  double mean = 0.0, var = 0.0;
  for (double v : w.data()) mean += v;
  mean /= double(w.numel());
  for (double v : w.data()) var += (v - mean) * (v - mean);
  var /= double(w.numel() - 1);
  const double want = 2.0 / (90.0 + 900.0);
  EXPECT_NEAR(var, want, 0.1 * want);
  EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(want / double(w.numel())));
  const Tensor again = xavier_init(s, r2);
  EXPECT_TRUE(std::equal(w.data().begin(), w.data().end(), again.data().begin()));
  std::mt19937_64 r3(3);
  EXPECT_DOUBLE_EQ(xavier_init(s, r3, true, 2.0).data()[5], 2.0 * w.data()[5]);
}
