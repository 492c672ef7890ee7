#pragma once

// On-disk patch datasets written by `augment` and read by `train`:
//
//   <dir>/index.json             {"patch_size": 300, "count": N, "patches": [...]}
//   <dir>/p000000.png            image
//   <dir>/p000000_den.whgt       density ground truth
//   <dir>/p000000_loc.whgt       localization ground truth
//
// Each index entry records the stem, provenance and the patch's points.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "wheatnet/augment.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/io.hpp"

namespace wheatnet {

inline std::string patch_stem(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%06llu", static_cast<unsigned long long>(index));
  return buf;
}

class PatchWriter {
 public:
  explicit PatchWriter(std::filesystem::path dir, int patch_size) : dir_(std::move(dir)), patch_size_(patch_size) {
    std::filesystem::create_directories(dir_);
  }

  void add(const TrainingPatch& patch) {
    const std::string stem = patch_stem(entries_.size());
    write_png((dir_ / (stem + ".png")).string(), patch.image);
    write_whgt((dir_ / (stem + "_den.whgt")).string(), patch.density_gt);
    write_whgt((dir_ / (stem + "_loc.whgt")).string(), patch.loc_gt);
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : patch.points) pts.push_back({p.x, p.y});
    const auto& pv = patch.provenance;
    entries_.push_back({{"stem", stem},
                        {"image_id", pv.image_id},
                        {"scale", pv.scale},
                        {"crop_x", pv.crop_x},
                        {"crop_y", pv.crop_y},
                        {"flipped", pv.flipped},
                        {"noised", pv.noised},
                        {"noise_seed", pv.noise_seed},
                        {"points", pts}});
  }

  std::size_t size() const { return entries_.size(); }

  void finish() const {
    const nlohmann::json index{{"patch_size", patch_size_}, {"count", entries_.size()}, {"patches", entries_}};
    write_file((dir_ / "index.json").string(), index.dump(1) + "\n");
  }

 private:
  std::filesystem::path dir_;
  int patch_size_;
  nlohmann::json entries_ = nlohmann::json::array();
};

/// Loads every patch listed in <dir>/index.json.
inline std::vector<TrainingPatch> load_patches(const std::filesystem::path& dir) {
  const std::string index_path = (dir / "index.json").string();
  if (!std::filesystem::exists(index_path)) {
    throw DataError("patch dataset: '" + index_path + "' not found (run `augment` first)");
  }
  std::vector<TrainingPatch> out;
  try {
    const auto index = nlohmann::json::parse(read_file(index_path));
    for (const auto& e : index.at("patches")) {
      const std::string stem = e.at("stem").get<std::string>();
      TrainingPatch p;
      p.image = read_png((dir / (stem + ".png")).string());
      p.density_gt = DensityMap(read_whgt((dir / (stem + "_den.whgt")).string()));
      p.loc_gt = LocalizationMap(read_whgt((dir / (stem + "_loc.whgt")).string()));
      for (const auto& q : e.at("points")) p.points.push_back({q.at(0).get<double>(), q.at(1).get<double>()});
      auto& pv = p.provenance;
      pv.image_id = e.at("image_id").get<std::string>();
      pv.scale = e.at("scale").get<double>();
      pv.crop_x = e.at("crop_x").get<int>();
      pv.crop_y = e.at("crop_y").get<int>();
      pv.flipped = e.at("flipped").get<bool>();
      pv.noised = e.at("noised").get<bool>();
      pv.noise_seed = e.at("noise_seed").get<std::uint64_t>();
      if (p.density_gt.height() != p.image.height() || p.density_gt.width() != p.image.width() ||
          p.loc_gt.height() != p.image.height() || p.loc_gt.width() != p.image.width()) {
        throw DataError("patch dataset: '" + stem + "' has ground truth sized differently from its image");
      }
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(index_path + ": " + e.what());
  }
  return out;
}

}  // namespace wheatnet
