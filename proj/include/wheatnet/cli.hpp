#pragma once

// Command-line front end: gen-synthetic | gen-gt | augment | train | infer | eval | yield.
// Exit codes: 0 ok, 1 usage, 2 bad data or input, 3 numeric failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wheatnet/augment.hpp"
#include "wheatnet/config.hpp"
#include "wheatnet/corpus.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/evalyield.hpp"
#include "wheatnet/groundtruth.hpp"
#include "wheatnet/infer.hpp"
#include "wheatnet/io.hpp"
#include "wheatnet/model.hpp"
#include "wheatnet/patch_store.hpp"
#include "wheatnet/train.hpp"

namespace wheatnet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace fs = std::filesystem;

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------- gen-synthetic

struct GenSyntheticArgs {
  std::string out_dir;
  int n = 10;
  SyntheticParams params;
  std::optional<double> test_fraction;
  bool points_only = false;
  std::uint64_t seed = 0;
};

inline void write_split(const fs::path& dir, const std::string& name, std::vector<ManifestEntry> entries) {
  CorpusManifest m;
  m.split = name;
  m.images = std::move(entries);
  write_manifest((dir / (name + ".json")).string(), m);
  write_file((dir / (name + ".csv")).string(), format_annotations_csv(m.annotation_table()));
}

inline int gen_synthetic(const GenSyntheticArgs& a, Streams io) {
  std::mt19937_64 rng(derive_seed(a.seed, 0x5CE7E));
  SyntheticParams params = a.params;
  params.render = !a.points_only;
  const auto scenes = generate_synthetic(a.n, params, rng);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir / "images");
  std::vector<ManifestEntry> entries;
  for (const auto& s : scenes) {
    const std::string rel = "images/" + s.annotations.image_id + ".png";
    if (!a.points_only) write_png((dir / rel).string(), s.image);
    entries.push_back({rel, s.annotations});
  }
  write_split(dir, "all", entries);
  nlohmann::json summary{{"images", scenes.size()}, {"manifest", (dir / "all.json").string()}};
  if (a.test_fraction) {
    auto [train, test] = split_corpus(entries, *a.test_fraction, a.seed);
    summary["train"] = train.size();
    summary["test"] = test.size();
    write_split(dir, "train", std::move(train));
    write_split(dir, "test", std::move(test));
  }
  io.out << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- gen-gt

struct GenGtArgs {
  std::string manifest;
  std::string annotations;
  std::string images_dir;
  std::string out_dir;
  SigmaParams sigma;
};

inline CorpusManifest manifest_from_args(const std::string& manifest, const std::string& annotations,
                                         const std::string& images_dir, bool check_files) {
  if (!manifest.empty()) return read_manifest(manifest, check_files);
  if (annotations.empty() || images_dir.empty()) {
    throw DataError("need --manifest, or --annotations together with --images-dir");
  }
  return manifest_from_annotations(read_annotations(annotations), images_dir);
}

inline int gen_gt(const GenGtArgs& a, Streams io) {
  const CorpusManifest m = manifest_from_args(a.manifest, a.annotations, a.images_dir, false);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  for (const auto& e : m.images) {
    const auto& ann = e.annotations;
    const DensityMap den = density_map(ann, a.sigma);
    const LocalizationMap loc = localization_map(ann);
    write_whgt((dir / (ann.image_id + "_den.whgt")).string(), den);
    write_whgt((dir / (ann.image_id + "_loc.whgt")).string(), loc);
    io.out << nlohmann::json{{"image_id", ann.image_id},
                             {"points", ann.points.size()},
                             {"density_sum", den.sum()},
                             {"loc_positives", loc.positives()}}
                  .dump()
           << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- augment

struct AugmentArgs {
  std::string manifest;
  std::string out_dir;
  AugmentParams params;
  bool dry_run = false;
  std::uint64_t seed = 0;
};

inline int augment(const AugmentArgs& a, Streams io) {
  const CorpusManifest m = read_manifest(a.manifest, !a.dry_run);
  std::vector<ImageExtent> extents;
  for (const auto& e : m.images) extents.push_back({e.annotations.width, e.annotations.height});
  const auto plan = plan_dataset(extents, a.params, a.seed);
  if (a.dry_run) {
    io.out << nlohmann::json{{"images", m.images.size()}, {"patches", plan.size()}}.dump() << "\n";
    return kOk;
  }
  PatchWriter writer(a.out_dir, a.params.patch_size);
  std::size_t cursor = 0;
  // One source image in memory at a time.
  for (std::size_t i = 0; i < m.images.size(); ++i) {
    const Image im = read_png(m.resolve(m.images[i]).string());
    const auto levels = build_pyramid(im, m.images[i].annotations, a.params, &io.err);
    for (const auto& level : levels) {
      for (; cursor < plan.size() && plan[cursor].image_index == i && plan[cursor].scale == level.scale; ++cursor) {
        writer.add(materialize_patch(plan[cursor], level, a.params));
      }
    }
  }
  writer.finish();
  io.out << nlohmann::json{{"images", m.images.size()}, {"patches", writer.size()}, {"out", a.out_dir}}.dump()
         << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data_dir;
  std::string out;
  std::string weights_out;
  std::string resume;
  std::optional<int> iterations;
  std::optional<int> batch_size;
  std::optional<std::uint64_t> seed;
};

inline std::string default_weights_path(const std::string& checkpoint_path) {
  return fs::path(checkpoint_path).replace_extension(".whnw").string();
}

inline int train_cmd(const TrainArgs& a, Streams io) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.iterations) rc.train.iterations = *a.iterations;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.seed) rc.train.seed = rc.model.seed = *a.seed;
  rc.model.validate();
  rc.train.validate();
  const auto data = load_patches(a.data_dir);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  TrainHooks hooks;
  hooks.on_step = [&](const HistoryEntry& h) { io.out << h.to_json().dump() << "\n" << std::flush; };
  hooks.on_checkpoint = [&](const Checkpoint& ck) { save_checkpoint(a.out, ck); };
  const Checkpoint ck = train(data, rc.model, rc.train, hooks, resume ? &*resume : nullptr);
  save_checkpoint(a.out, ck);
  save_weights(a.weights_out.empty() ? default_weights_path(a.out) : a.weights_out, ck.params, ck.model_config);
  return kOk;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string weights;
  std::vector<std::string> images;
  std::string manifest;
  double threshold = kDefaultPeakThreshold;
  bool emit_maps = false;
  std::string maps_dir = ".";
  std::string out;
};

/// Accepts either a weights file or a training checkpoint.
inline WheatNet load_network(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.rfind("WHCK", 0) == 0) {
    Checkpoint ck = decode_checkpoint(bytes, path);
    ck.params.set_requires_grad(false);
    return WheatNet(ck.model_config, std::move(ck.params));
  }
  LoadedWeights lw = decode_weights(bytes, path);
  return WheatNet(lw.config, std::move(lw.params));
}

inline int infer_cmd(const InferArgs& a, Streams io) {
  std::vector<std::pair<std::string, std::string>> jobs;  // (image id, path)
  for (const auto& p : a.images) jobs.emplace_back(fs::path(p).stem().string(), p);
  if (!a.manifest.empty()) {
    const CorpusManifest m = read_manifest(a.manifest);
    for (const auto& e : m.images) jobs.emplace_back(e.annotations.image_id, m.resolve(e).string());
  }
  if (jobs.empty()) throw DataError("infer: no images given (use --image or --manifest)");
  const WheatNet net = load_network(a.weights);
  nlohmann::json results = nlohmann::json::array();
  for (const auto& [id, path] : jobs) {
    const Image image = read_png(path);
    const Prediction p = predict(net, image, a.threshold, id);
    if (a.emit_maps) {
      const fs::path dir(a.maps_dir);
      fs::create_directories(dir);
      write_whgt((dir / (id + "_density.whgt")).string(), p.density_map);
      write_whgt((dir / (id + "_locmap.whgt")).string(), p.loc_map);
      write_png((dir / (id + "_peaks.png")).string(), overlay_peaks(image, p.peak_points));
    }
    results.push_back(p.to_json());
  }
  const std::string text = (results.size() == 1 ? results[0] : results).dump(1) + "\n";
  if (a.out.empty()) io.out << text;
  else write_file(a.out, text);
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string count_source = "avg";
  std::string out;
};

inline int eval_cmd(const EvalArgs& a, Streams io) {
  const auto preds = parse_predictions(read_file(a.pred), a.pred);
  const EvalReport rep = evaluate(preds, gt_counts(read_annotations(a.gt)), parse_count_source(a.count_source));
  rep.print_table(io.out);
  if (!a.out.empty()) write_file(a.out, rep.to_json().dump(1) + "\n");
  return kOk;
}

// ---------------------------------------------------------------- yield

struct YieldArgs {
  std::optional<double> heads_per_foot;
  std::string from_prediction;
  std::optional<double> feet_per_image;
  std::string count_source = "avg";
  double kernels = kDefaultKernelsPerHead;
  double spacing_in = 0.0;
};

inline int yield_cmd(const YieldArgs& a, Streams io) {
  YieldInput in;
  in.kernels_per_head = a.kernels;
  in.row_spacing_inches = a.spacing_in;
  if (a.heads_per_foot) {
    in.heads_per_foot = *a.heads_per_foot;
  } else {
    if (a.from_prediction.empty() || !a.feet_per_image) {
      throw DataError("yield: give --heads-per-foot, or --from-prediction with --feet-per-image");
    }
    if (!(*a.feet_per_image > 0.0)) throw DataError("yield: --feet-per-image must be > 0");
    const auto preds = parse_predictions(read_file(a.from_prediction), a.from_prediction);
    const CountSource src = parse_count_source(a.count_source);
    double total = 0.0;
    for (const auto& p : preds) total += p.count(src);
    in.heads_per_foot = total / static_cast<double>(preds.size()) / *a.feet_per_image;
  }
  if (const std::string warning = in.validate(); !warning.empty()) io.err << warning << "\n";
  io.out << nlohmann::json{{"heads_per_foot", in.heads_per_foot},
                           {"kernels_per_head", in.kernels_per_head},
                           {"row_spacing_in", in.row_spacing_inches},
                           {"bu_per_acre", yield_estimate(in)}}
                .dump()
         << "\n";
  return kOk;
}

// ---------------------------------------------------------------- dispatch

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"wheatnet: wheat head counting, localization and yield estimation"};
  app.name("wheatnet");
  app.require_subcommand(1);
  Streams io{out, err};
  std::uint64_t seed = 0;
  auto add_seed = [&seed](CLI::App* sub) {
    return sub->add_option("--seed", seed, "Master seed")->envname("HEADCOUNT_SEED");
  };

  GenSyntheticArgs gs;
  auto* c_gs = app.add_subcommand("gen-synthetic", "Generate a synthetic annotated corpus");
  c_gs->add_option("--out", gs.out_dir, "Output directory")->required();
  c_gs->add_option("--n", gs.n, "Number of images")->check(CLI::NonNegativeNumber);
  c_gs->add_option("--heads-min", gs.params.heads_min, "Minimum heads per image");
  c_gs->add_option("--heads-max", gs.params.heads_max, "Maximum heads per image");
  c_gs->add_option("--size", gs.params.size, "Image side in pixels")->check(CLI::PositiveNumber);
  c_gs->add_option("--test-fraction", gs.test_fraction, "Also write train/test split manifests");
  c_gs->add_flag("--points-only", gs.points_only, "Write manifests without rendering pixels");
  add_seed(c_gs);

  GenGtArgs gg;
  auto* c_gg = app.add_subcommand("gen-gt", "Write density and localization ground-truth maps");
  c_gg->add_option("--manifest", gg.manifest, "Corpus manifest JSON");
  c_gg->add_option("--annotations", gg.annotations, "Point annotations (CSV or JSON)");
  c_gg->add_option("--images-dir", gg.images_dir, "Directory holding <image_id>.png");
  c_gg->add_option("--out", gg.out_dir, "Output directory")->required();
  c_gg->add_option("--sigma-k", gg.sigma.k, "Neighbours used for adaptive sigma");
  c_gg->add_option("--sigma-beta", gg.sigma.beta, "Sigma scale on mean neighbour distance");
  c_gg->add_option("--sigma-min", gg.sigma.min_sigma, "Lower sigma clamp (px)");
  c_gg->add_option("--sigma-max", gg.sigma.max_sigma, "Upper sigma clamp (px)");
  c_gg->add_option("--sigma-default", gg.sigma.default_sigma, "Sigma for a lone point (px)");

  AugmentArgs ag;
  auto* c_ag = app.add_subcommand("augment", "Expand a corpus into training patches");
  c_ag->add_option("--manifest", ag.manifest, "Corpus manifest JSON")->required();
  c_ag->add_option("--out", ag.out_dir, "Patch directory");
  c_ag->add_option("--patch-size", ag.params.patch_size, "Patch side")->check(CLI::PositiveNumber);
  c_ag->add_option("--crops", ag.params.crops_per_scale, "Crops per scale")->check(CLI::PositiveNumber);
  c_ag->add_option("--scales", ag.params.scales, "Pyramid scales")->delimiter(',');
  c_ag->add_option("--flip-prob", ag.params.flip_prob, "Flip probability")->check(CLI::Range(0.0, 1.0));
  c_ag->add_option("--noise-prob", ag.params.noise_prob, "Noise probability")->check(CLI::Range(0.0, 1.0));
  c_ag->add_option("--noise-std", ag.params.noise_std, "Noise std in [0,1] units")->check(CLI::NonNegativeNumber);
  c_ag->add_flag("--dry-run", ag.dry_run, "Only count patches; image files are not read");
  add_seed(c_ag);

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train on an augmented patch directory");
  c_tr->add_option("--config", tr.config, "key=value or JSON config file");
  c_tr->add_option("--data", tr.data_dir, "Patch directory from `augment`")->required();
  c_tr->add_option("--out", tr.out, "Checkpoint path")->required();
  c_tr->add_option("--weights-out", tr.weights_out, "Weights path (default: checkpoint with .whnw)");
  c_tr->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_tr->add_option("--iterations", tr.iterations, "Total iterations")->check(CLI::PositiveNumber);
  c_tr->add_option("--batch-size", tr.batch_size, "Batch size")->check(CLI::PositiveNumber);
  auto* tr_seed = add_seed(c_tr);

  InferArgs in;
  auto* c_in = app.add_subcommand("infer", "Count and localize heads in images");
  c_in->add_option("--weights", in.weights, "Weights (.whnw) or checkpoint")->required();
  c_in->add_option("--image", in.images, "Image path (repeatable)");
  c_in->add_option("--manifest", in.manifest, "Run on every image of a manifest");
  c_in->add_option("--threshold", in.threshold, "Peak threshold on the smoothed map");
  c_in->add_flag("--emit-maps", in.emit_maps, "Write WHGT maps and a peak overlay PNG");
  c_in->add_option("--maps-dir", in.maps_dir, "Directory for --emit-maps output");
  c_in->add_option("--out", in.out, "Write predictions JSON here instead of stdout");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score predictions against annotations");
  c_ev->add_option("--pred", ev.pred, "Predictions JSON from `infer`")->required();
  c_ev->add_option("--gt", ev.gt, "Annotations CSV or JSON")->required();
  c_ev->add_option("--count-source", ev.count_source, "avg, density or peak")
      ->check(CLI::IsMember({"avg", "density", "peak"}));
  c_ev->add_option("--out", ev.out, "Write the report JSON here");

  YieldArgs yl;
  auto* c_yl = app.add_subcommand("yield", "Estimate yield in bushels per acre");
  auto* hpf = c_yl->add_option("--heads-per-foot", yl.heads_per_foot, "Heads per foot of row");
  auto* fp = c_yl->add_option("--from-prediction", yl.from_prediction, "Predictions JSON from `infer`");
  c_yl->add_option("--feet-per-image", yl.feet_per_image, "Row feet covered by one image")->needs(fp);
  c_yl->add_option("--count-source", yl.count_source, "avg, density or peak")
      ->check(CLI::IsMember({"avg", "density", "peak"}));
  c_yl->add_option("--kernels", yl.kernels, "Kernels per head");
  c_yl->add_option("--spacing-in", yl.spacing_in, "Row spacing in inches")->required();
  hpf->excludes(fp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_gs) {
      gs.seed = seed;
      return gen_synthetic(gs, io);
    }
    if (*c_gg) return gen_gt(gg, io);
    if (*c_ag) {
      if (!ag.dry_run && ag.out_dir.empty()) throw CLI::RequiredError("--out");
      ag.seed = seed;
      return augment(ag, io);
    }
    if (*c_tr) {
      if (tr_seed->count() > 0) tr.seed = seed;
      return train_cmd(tr, io);
    }
    if (*c_in) return infer_cmd(in, io);
    if (*c_ev) return eval_cmd(ev, io);
    if (*c_yl) return yield_cmd(yl, io);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace wheatnet::cli
