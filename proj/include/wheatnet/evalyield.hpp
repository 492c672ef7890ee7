#pragma once

// Count metrics (MAE, RMSE, percentage error) and the wheat yield estimate:
//   yield [bu/acre] = (heads per foot of row * kernels per head) / row spacing [in] * 0.48

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/io.hpp"

namespace wheatnet {

namespace detail {

inline void check_pairs(const std::vector<double>& preds, const std::vector<double>& gts, const char* fn) {
  if (preds.empty()) throw std::invalid_argument(std::string(fn) + ": empty input");
  if (preds.size() != gts.size()) {
    throw std::invalid_argument(std::string(fn) + ": " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(gts.size()) + " ground truths");
  }
}

}  // namespace detail

inline double mae(const std::vector<double>& preds, const std::vector<double>& gts) {
  detail::check_pairs(preds, gts, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += std::abs(preds[i] - gts[i]);
  return acc / static_cast<double>(preds.size());
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& gts) {
  detail::check_pairs(preds, gts, "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += (preds[i] - gts[i]) * (preds[i] - gts[i]);
  return std::sqrt(acc / static_cast<double>(preds.size()));
}

/// Total absolute count error as a fraction of all ground-truth heads.
inline double percentage_error(double mae_value, std::size_t n_images, double total_gt) {
  if (!(total_gt > 0.0)) throw std::invalid_argument("percentage_error: total ground-truth count must be > 0");
  return mae_value * static_cast<double>(n_images) / total_gt;
}

inline constexpr double kYieldConstant = 0.48;
inline constexpr double kDefaultKernelsPerHead = 22.0;

struct YieldInput {
  double heads_per_foot = 0.0;
  double kernels_per_head = kDefaultKernelsPerHead;
  double row_spacing_inches = 0.0;

  /// Throws on non-positive fields; returns a warning for spacing outside 5-40 in.
  std::string validate() const {
    if (!(heads_per_foot > 0.0)) throw std::invalid_argument("yield: heads per foot must be > 0");
    if (!(kernels_per_head > 0.0)) throw std::invalid_argument("yield: kernels per head must be > 0");
    if (!(row_spacing_inches > 0.0)) throw std::invalid_argument("yield: row spacing must be > 0");
    if (row_spacing_inches < 5.0 || row_spacing_inches > 40.0) {
      std::ostringstream os;
      os << "warning: row spacing " << row_spacing_inches << " in is outside the usual 5-40 in range";
      return os.str();
    }
    return {};
  }
};

/// Bushels per acre.
inline double yield_estimate(const YieldInput& in) {
  in.validate();
  return in.heads_per_foot * in.kernels_per_head / in.row_spacing_inches * kYieldConstant;
}

enum class CountSource { Avg, Density, Peak };

inline CountSource parse_count_source(const std::string& s) {
  if (s == "avg") return CountSource::Avg;
  if (s == "density") return CountSource::Density;
  if (s == "peak") return CountSource::Peak;
  throw std::invalid_argument("count source must be avg, density or peak, got '" + s + "'");
}

/// The per-image counts an inference run emits.
struct PredictionRecord {
  std::string image_id;
  double density_count = 0.0;
  double peak_count = 0.0;
  double avg_count = 0.0;

  double count(CountSource src) const {
    switch (src) {
      case CountSource::Density: return density_count;
      case CountSource::Peak: return peak_count;
      case CountSource::Avg: break;
    }
    return avg_count;
  }
};

/// Accepts a single record object or an array of them.
inline std::vector<PredictionRecord> parse_predictions(const std::string& text, const std::string& what = "predictions") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": " + e.what());
  }
  if (j.is_object()) j = nlohmann::json::array({j});
  if (!j.is_array()) throw DataError(what + ": expected a prediction object or an array of them");
  std::vector<PredictionRecord> out;
  try {
    for (const auto& r : j) {
      out.push_back({r.at("image_id").get<std::string>(), r.at("density_count").get<double>(),
                     r.at("peak_count").get<double>(), r.at("avg_count").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": " + e.what());
  }
  return out;
}

struct EvalRow {
  std::string image_id;
  double pred = 0.0;
  double gt = 0.0;
  double abs_err = 0.0;
  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::size_t n_images = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double pct_error = 0.0;
  std::vector<EvalRow> rows;  // sorted by image id

  bool operator==(const EvalReport&) const = default;

  nlohmann::json to_json() const {
    nlohmann::json j{{"n_images", n_images}, {"mae", mae}, {"rmse", rmse}, {"pct_error", pct_error}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back({{"image_id", r.image_id}, {"pred", r.pred}, {"gt", r.gt}, {"abs_err", r.abs_err}});
    return j;
  }

  void print_table(std::ostream& os) const {
    os << std::left << std::setw(24) << "image_id" << std::right << std::setw(12) << "pred" << std::setw(8) << "gt"
       << std::setw(12) << "abs_err" << "\n";
    os << std::fixed << std::setprecision(3);
    for (const auto& r : rows) {
      os << std::left << std::setw(24) << r.image_id << std::right << std::setw(12) << r.pred << std::setw(8)
         << std::setprecision(0) << r.gt << std::setprecision(3) << std::setw(12) << r.abs_err << "\n";
    }
    os << "images " << n_images << "  MAE " << std::setprecision(4) << mae << "  RMSE " << rmse
       << "  error " << pct_error << " (" << std::setprecision(2) << pct_error * 100.0 << "%)\n";
    os.unsetf(std::ios::floatfield);
  }
};

/// Scores predictions against per-image ground-truth counts. Rows are sorted
/// by id so the result does not depend on input order. Throws DataError
/// listing any prediction ids without ground truth.
inline EvalReport evaluate(const std::vector<PredictionRecord>& predictions,
                           const std::map<std::string, double>& gt_counts, CountSource source = CountSource::Avg) {
  if (predictions.empty()) throw DataError("evaluate: no predictions");
  std::vector<std::string> missing;
  EvalReport rep;
  for (const auto& p : predictions) {
    auto it = gt_counts.find(p.image_id);
    if (it == gt_counts.end()) {
      missing.push_back(p.image_id);
      continue;
    }
    const double pred = p.count(source);
    rep.rows.push_back({p.image_id, pred, it->second, std::abs(pred - it->second)});
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: no ground truth for image ids:";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }
  std::sort(rep.rows.begin(), rep.rows.end(), [](const EvalRow& a, const EvalRow& b) { return a.image_id < b.image_id; });
  std::vector<double> preds, gts;
  double total_gt = 0.0;
  for (const auto& r : rep.rows) {
    preds.push_back(r.pred);
    gts.push_back(r.gt);
    total_gt += r.gt;
  }
  rep.n_images = rep.rows.size();
  rep.mae = mae(preds, gts);
  rep.rmse = rmse(preds, gts);
  rep.pct_error = total_gt > 0.0 ? percentage_error(rep.mae, rep.n_images, total_gt) : 0.0;
  return rep;
}

inline std::map<std::string, double> gt_counts(const AnnotationTable& table) {
  std::map<std::string, double> out;
  for (const auto& [id, pts] : table) out[id] = static_cast<double>(pts.size());
  return out;
}

}  // namespace wheatnet
