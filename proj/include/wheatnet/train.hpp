#pragma once

// Losses, Adam, the learning-rate schedule, the training loop and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wheatnet/augment.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/image.hpp"
#include "wheatnet/model.hpp"
#include "wheatnet/ops.hpp"
#include "wheatnet/tape.hpp"

namespace wheatnet {

// ---------------------------------------------------------------- losses

/// Sum of squared pixel differences per image, averaged over the batch.
inline Tensor euclidean_loss(Tape& tape, const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("euclidean_loss: prediction " + pred.shape().str() + " vs ground truth " + gt.shape().str());
  }
  const double inv_n = 1.0 / static_cast<double>(pred.shape().n);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred.ptr()[i] - gt.ptr()[i];
    acc += d * d;
  }
  const bool grad = tape.needs_grad({&pred});
  Tensor out = Tensor::scalar(acc * inv_n, grad);
  if (grad) {
    tape.record("euclidean_loss", {pred, gt}, out, [pred, gt, out, inv_n]() mutable {
      const double g0 = out.grad()[0] * 2.0 * inv_n;
      auto gp = pred.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g0 * (pred.ptr()[i] - gt.ptr()[i]);
    });
  }
  return out;
}

enum class FocalForm {
  AsPrinted,     // alpha on the positive term only
  Conventional,  // alpha on positives, (1 - alpha) on negatives
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
  FocalForm form = FocalForm::AsPrinted;
  double eps = 1e-7;  // predictions are clamped to [eps, 1 - eps]
};

/// Pixel-wise focal loss: -(1/N) sum_i sum_j [ alpha log(p)(1-p)^g y + w_neg log(1-p) p^g (1-y) ].
inline Tensor focal_loss(Tape& tape, const Tensor& pred, const Tensor& gt, const FocalParams& fp = {}) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("focal_loss: prediction " + pred.shape().str() + " vs ground truth " + gt.shape().str());
  }
  const double inv_n = 1.0 / static_cast<double>(pred.shape().n);
  const double w_pos = fp.alpha;
  const double w_neg = fp.form == FocalForm::AsPrinted ? 1.0 : 1.0 - fp.alpha;
  const double g = fp.gamma;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double p = std::clamp(pred.ptr()[i], fp.eps, 1.0 - fp.eps);
    const double y = gt.ptr()[i];
    acc += w_pos * y * std::log(p) * std::pow(1.0 - p, g) + w_neg * (1.0 - y) * std::log(1.0 - p) * std::pow(p, g);
  }
  const bool grad = tape.needs_grad({&pred});
  Tensor out = Tensor::scalar(-acc * inv_n, grad);
  if (grad) {
    tape.record("focal_loss", {pred, gt}, out, [pred, gt, out, inv_n, w_pos, w_neg, g, fp]() mutable {
      const double g0 = -out.grad()[0] * inv_n;
      auto gp = pred.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) {
        const double raw = pred.ptr()[i];
        if (raw < fp.eps || raw > 1.0 - fp.eps) continue;  // clamped: flat
        const double p = raw, q = 1.0 - raw;
        const double y = gt.ptr()[i];
        double d = 0.0;
        if (y != 0.0) {
          double t = std::pow(q, g) / p;
          if (g != 0.0) t -= g * std::log(p) * std::pow(q, g - 1.0);
          d += w_pos * y * t;
        }
        if (y != 1.0) {
          double t = -std::pow(p, g) / q;
          if (g != 0.0) t += g * std::log(q) * std::pow(p, g - 1.0);
          d += w_neg * (1.0 - y) * t;
        }
        gp[i] += g0 * d;
      }
    });
  }
  return out;
}

struct LossParts {
  Tensor total;
  Tensor density;
  Tensor localization;
};

/// L = L_den + beta * L_loc.
inline LossParts total_loss(Tape& tape, const Tensor& pred_density, const Tensor& gt_density,
                            const Tensor& pred_loc, const Tensor& gt_loc, double beta,
                            const FocalParams& fp = {}) {
  LossParts parts;
  parts.density = euclidean_loss(tape, pred_density, gt_density);
  parts.localization = focal_loss(tape, pred_loc, gt_loc, fp);
  parts.total = add(tape, parts.density, scale(tape, parts.localization, beta));
  return parts;
}

// ---------------------------------------------------------------- optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

/// One bias-corrected Adam update using each parameter's accumulated grad
/// (a parameter without a grad buffer counts as zero gradient).
inline void adam_step(ModelParams& params, AdamState& state, double lr, const AdamHyper& h = {}) {
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (auto& [name, param] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(param.numel(), 0.0);
      v.assign(param.numel(), 0.0);
    }
    auto w = param.mutable_data();
    const bool has = param.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? param.grad()[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
    }
  }
}

// ---------------------------------------------------------------- config

struct TrainConfig {
  int batch_size = 16;
  double lr_initial = 3e-4;
  double lr_final = 1.5e-6;
  int iterations = 2000;
  double beta_loss = 0.01;
  double gamma = 2.0;
  double alpha = 0.25;
  FocalForm focal_form = FocalForm::AsPrinted;
  double val_fraction = 0.1;
  int val_every = 100;
  int checkpoint_every = 0;  // 0 = only at the end
  std::uint64_t seed = 0;
  AdamHyper adam;

  void validate() const {
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (iterations < 1) throw DataError("train config: iterations must be >= 1");
    if (!(lr_final > 0.0 && lr_final <= lr_initial)) throw DataError("train config: need 0 < lr_final <= lr_initial");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw DataError("train config: val_fraction must be in (0, 1)");
    if (val_every < 1) throw DataError("train config: val_every must be >= 1");
  }

  FocalParams focal() const { return {gamma, alpha, focal_form, 1e-7}; }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},   {"lr_initial", lr_initial},
            {"lr_final", lr_final},       {"iterations", iterations},
            {"beta_loss", beta_loss},     {"gamma", gamma},
            {"alpha", alpha},             {"focal_form", focal_form == FocalForm::AsPrinted ? "as_printed" : "conventional"},
            {"val_fraction", val_fraction}, {"val_every", val_every},
            {"checkpoint_every", checkpoint_every}, {"seed", seed},
            {"adam_beta1", adam.beta1},   {"adam_beta2", adam.beta2},
            {"adam_eps", adam.eps}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto opt = [&j](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    try {
      opt("batch_size", c.batch_size);
      opt("lr_initial", c.lr_initial);
      opt("lr_final", c.lr_final);
      opt("iterations", c.iterations);
      opt("beta_loss", c.beta_loss);
      opt("gamma", c.gamma);
      opt("alpha", c.alpha);
      if (j.contains("focal_form")) {
        const auto form = j.at("focal_form").get<std::string>();
        if (form == "as_printed") c.focal_form = FocalForm::AsPrinted;
        else if (form == "conventional") c.focal_form = FocalForm::Conventional;
        else throw DataError("train config: focal_form must be as_printed or conventional");
      }
      opt("val_fraction", c.val_fraction);
      opt("val_every", c.val_every);
      opt("checkpoint_every", c.checkpoint_every);
      opt("seed", c.seed);
      opt("adam_beta1", c.adam.beta1);
      opt("adam_beta2", c.adam.beta2);
      opt("adam_eps", c.adam.eps);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Geometric decay from lr_initial at step 0 to lr_final at the last step.
inline double lr_schedule(int step, const TrainConfig& cfg) {
  if (cfg.iterations <= 1) return cfg.lr_initial;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.iterations - 1);
  return cfg.lr_initial * std::pow(cfg.lr_final / cfg.lr_initial, frac);
}

// ---------------------------------------------------------------- data split

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded shuffle; the validation share is floor(n * val_fraction).
inline SplitIndices split_train_val(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5EED5A1F));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction + 1e-9));
  SplitIndices s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<long>(n_val));
  s.train.assign(idx.begin() + static_cast<long>(n_val), idx.end());
  return s;
}

// ---------------------------------------------------------------- batches

struct Batch {
  Tensor images;      // (N,3,Hp,Wp), padded to /16
  Tensor density_gt;  // (N,1,H,W)
  Tensor loc_gt;      // (N,1,H,W)
  std::size_t height = 0, width = 0;
};

inline Batch make_batch(const std::vector<TrainingPatch>& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  std::vector<Image> padded;
  padded.reserve(indices.size());
  const int h = data[indices.front()].image.height(), w = data[indices.front()].image.width();
  for (std::size_t i : indices) padded.push_back(pad_to_multiple(data[i].image, 16));
  std::vector<const Image*> ptrs;
  for (const auto& im : padded) ptrs.push_back(&im);
  Batch b;
  b.images = images_to_tensor(ptrs);
  b.height = static_cast<std::size_t>(h);
  b.width = static_cast<std::size_t>(w);
  const Shape gs{indices.size(), 1, b.height, b.width};
  b.density_gt = Tensor::zeros(gs);
  b.loc_gt = Tensor::zeros(gs);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& p = data[indices[n]];
    if (p.density_gt.height() != h || p.density_gt.width() != w || p.loc_gt.height() != h || p.loc_gt.width() != w) {
      throw DataError("make_batch: patch " + std::to_string(indices[n]) + " has mismatched map sizes");
    }
    std::copy(p.density_gt.values().begin(), p.density_gt.values().end(), b.density_gt.mutable_ptr() + n * gs.plane());
    std::copy(p.loc_gt.values().begin(), p.loc_gt.values().end(), b.loc_gt.mutable_ptr() + n * gs.plane());
  }
  return b;
}

struct BatchLoss {
  double total = 0.0;
  double density = 0.0;
  double localization = 0.0;
};

/// Forward on a padded batch, crop back to the patch size and score.
inline LossParts batch_loss(Tape& tape, const WheatNet& net, const Batch& batch, const TrainConfig& cfg) {
  ForwardOutputs out = net.forward(tape, batch.images);
  Tensor dens = crop(tape, out.density, 0, 0, batch.height, batch.width);
  Tensor loc = crop(tape, out.locmap, 0, 0, batch.height, batch.width);
  return total_loss(tape, dens, batch.density_gt, loc, batch.loc_gt, cfg.beta_loss, cfg.focal());
}

// ---------------------------------------------------------------- loop

struct HistoryEntry {
  int step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"lr", lr}, {"train_loss", train_loss}};
    j["val_loss"] = val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr);
    return j;
  }
  bool operator==(const HistoryEntry&) const = default;
};

struct Checkpoint {
  WheatNetConfig model_config;
  TrainConfig train_config;
  ModelParams params;
  AdamState optimizer;
  int next_step = 0;
  std::vector<HistoryEntry> history;
};

struct TrainHooks {
  std::function<void(const HistoryEntry&)> on_step;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

/// Mean total loss over `indices`, evaluated without a tape.
inline double evaluate_loss(const WheatNet& net, const std::vector<TrainingPatch>& data,
                            const std::vector<std::size_t>& indices, const TrainConfig& cfg) {
  double acc = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(cfg.batch_size));
    std::vector<std::size_t> chunk(indices.begin() + static_cast<long>(start), indices.begin() + static_cast<long>(end));
    Tape tape = Tape::no_grad();
    const Batch b = make_batch(data, chunk);
    acc += batch_loss(tape, net, b, cfg).total.item() * static_cast<double>(chunk.size());
  }
  return acc / static_cast<double>(indices.size());
}

/// Mini-batch Adam on the training share of `data`. Batches walk a fresh
/// seeded permutation each epoch, so batch k depends only on (seed, k) and a
/// resumed run replays exactly. `stop_at` (exclusive step) ends early, for
/// interrupted runs; the checkpoint then resumes from that step.
inline Checkpoint train(const std::vector<TrainingPatch>& data, const WheatNetConfig& model_cfg,
                        const TrainConfig& cfg, const TrainHooks& hooks = {},
                        const Checkpoint* resume = nullptr, std::optional<int> stop_at = std::nullopt) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  const SplitIndices split = split_train_val(data.size(), cfg.val_fraction, cfg.seed);
  if (split.train.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw DataError("train: " + std::to_string(split.train.size()) + " training patches is fewer than batch size " +
                    std::to_string(cfg.batch_size) + "; lower it with --batch-size");
  }

  Checkpoint ck;
  if (resume) {
    ck.model_config = resume->model_config;
    ck.params = resume->params.clone();
    ck.optimizer = resume->optimizer;
    ck.next_step = resume->next_step;
    ck.history = resume->history;
  } else {
    ck.model_config = model_cfg;
    ck.params = init_params(model_cfg);
  }
  ck.train_config = cfg;
  ck.params.set_requires_grad(true);
  WheatNet net(ck.model_config, ck.params);  // shares tensor storage with ck.params

  const std::size_t n_train = split.train.size();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> perm;
  std::size_t perm_epoch = static_cast<std::size_t>(-1);
  auto sample_at = [&](std::size_t pos) {
    const std::size_t epoch = pos / n_train;
    if (epoch != perm_epoch) {
      perm = split.train;
      std::mt19937_64 rng(derive_seed(cfg.seed, 0xE90C0000ULL + epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      perm_epoch = epoch;
    }
    return perm[pos % n_train];
  };

  const int end = std::min(cfg.iterations, stop_at.value_or(cfg.iterations));
  for (int step = ck.next_step; step < end; ++step) {
    std::vector<std::size_t> idx(B);
    for (std::size_t k = 0; k < B; ++k) idx[k] = sample_at(static_cast<std::size_t>(step) * B + k);
    const Batch batch = make_batch(data, idx);

    Tape tape;
    LossParts loss = batch_loss(tape, net, batch, cfg);
    const double value = loss.total.item();
    if (!std::isfinite(value)) throw NumericError("train: non-finite loss at step " + std::to_string(step));
    net.params().zero_grad();
    tape.backward(loss.total);
    const double lr = lr_schedule(step, cfg);
    adam_step(net.params(), ck.optimizer, lr, cfg.adam);

    HistoryEntry entry{step, lr, value, std::nullopt};
    const bool last = step + 1 == cfg.iterations;
    if (!split.val.empty() && ((step + 1) % cfg.val_every == 0 || last)) {
      entry.val_loss = evaluate_loss(net, data, split.val, cfg);
    }
    ck.history.push_back(entry);
    ck.next_step = step + 1;
    if (hooks.on_step) hooks.on_step(entry);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last) {
      hooks.on_checkpoint(ck);
    }
  }
  net.params().zero_grad();
  return ck;
}

// ---------------------------------------------------------------- checkpoint file
//
// "WHCK" | u16 version | u32 json length | json {model_config, train_config,
// next_step, adam_step, history} | u32 record count | records
// record: u16 name length | name | u32 numel | f64 weights | f64 m | f64 v
// Everything is f64 so resumed training is bit-identical.

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "WHCK";
  detail::put_le<std::uint16_t>(out, 1);
  nlohmann::json meta{{"model_config", ck.model_config.to_json()},
                      {"train_config", ck.train_config.to_json()},
                      {"next_step", ck.next_step},
                      {"adam_step", ck.optimizer.step}};
  meta["history"] = nlohmann::json::array();
  for (const auto& h : ck.history) meta["history"].push_back(h.to_json());
  const std::string js = meta.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.numel()));
    for (double v : t.data()) detail::put_le<double>(out, v);
    auto moments = [&](const std::map<std::string, std::vector<double>>& m) {
      auto it = m.find(name);
      for (std::size_t i = 0; i < t.numel(); ++i) {
        detail::put_le<double>(out, it == m.end() || it->second.empty() ? 0.0 : it->second[i]);
      }
    };
    moments(ck.optimizer.m);
    moments(ck.optimizer.v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "WHCK") throw DataError(what + ": bad magic, expected WHCK");
  if (r.get<std::uint16_t>() != 1) throw DataError(what + ": unsupported checkpoint version");
  const auto js_len = r.get<std::uint32_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.take(js_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": bad metadata: " + e.what());
  }
  Checkpoint ck;
  ck.model_config = WheatNetConfig::from_json(meta.at("model_config"));
  ck.train_config = TrainConfig::from_json(meta.at("train_config"));
  ck.next_step = meta.at("next_step").get<int>();
  ck.optimizer.step = meta.at("adam_step").get<std::uint64_t>();
  for (const auto& h : meta.at("history")) {
    HistoryEntry e{h.at("step").get<int>(), h.at("lr").get<double>(), h.at("train_loss").get<double>(), std::nullopt};
    if (!h.at("val_loss").is_null()) e.val_loss = h.at("val_loss").get<double>();
    ck.history.push_back(e);
  }
  const Layout layout = make_layout(ck.model_config);
  std::map<std::string, Shape> shapes;
  for (const auto& layer : layout.layers()) {
    shapes[layer.name + ".weight"] = layer.weight_shape();
    shapes[layer.name + ".bias"] = layer.bias_shape();
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.take(r.get<std::uint16_t>()));
    const auto numel = r.get<std::uint32_t>();
    auto it = shapes.find(name);
    if (it == shapes.end() || it->second.numel() != numel) {
      throw DataError(what + ": parameter '" + name + "' does not match the stored model config");
    }
    auto read_vec = [&] {
      std::vector<double> v(numel);
      for (double& x : v) x = r.get<double>();
      return v;
    };
    ck.params.insert(name, Tensor::from(it->second, read_vec(), true));
    ck.optimizer.m[name] = read_vec();
    ck.optimizer.v[name] = read_vec();
  }
  if (r.remaining() != 0) throw DataError(what + ": trailing bytes");
  WheatNet validated(ck.model_config, ck.params);
  (void)validated;
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

}  // namespace wheatnet
