#pragma once

// Run configuration files. Either JSON or flat key=value text:
//
//   # reduced-width model
//   width_multiplier = 0.125
//   merge_channels = 64, 64, 80
//   lr_initial = 1e-3
//   focal_form = as_printed
//
// Keys are the fields of WheatNetConfig::to_json() and TrainConfig::to_json();
// "seed" sets both. Unknown keys are an error.

#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/io.hpp"
#include "wheatnet/model.hpp"
#include "wheatnet/train.hpp"

namespace wheatnet {

struct RunConfig {
  WheatNetConfig model;
  TrainConfig train;
};

namespace detail {

inline nlohmann::json parse_scalar(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    std::size_t used = 0;
    if (v.find_first_of(".eE") == std::string::npos) {
      const long long i = std::stoll(v, &used);
      if (used == v.size()) return i;
    }
    used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  return v;
}

}  // namespace detail

inline nlohmann::json parse_key_value(const std::string& text, const std::string& what = "config") {
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(what + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw DataError(what + ":" + std::to_string(lineno) + ": empty key");
    if (value.find(',') != std::string::npos) {
      nlohmann::json arr = nlohmann::json::array();
      std::istringstream items(value);
      std::string item;
      while (std::getline(items, item, ',')) arr.push_back(detail::parse_scalar(detail::trim(item)));
      j[key] = arr;
    } else {
      j[key] = detail::parse_scalar(value);
    }
  }
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& what = "config") {
  if (!j.is_object()) throw DataError(what + ": expected an object of settings");
  std::set<std::string> known;
  const nlohmann::json defaults[] = {WheatNetConfig{}.to_json(), TrainConfig{}.to_json()};
  for (const auto& d : defaults)
    for (const auto& [k, v] : d.items()) known.insert(k);
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw DataError(what + ": unknown key '" + k + "'");
  }
  RunConfig rc;
  rc.model = WheatNetConfig::from_json(j);
  rc.train = TrainConfig::from_json(j);
  return rc;
}

inline RunConfig parse_run_config(const std::string& text, const std::string& what = "config") {
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(what + ": " + e.what());
    }
    return run_config_from_json(j, what);
  }
  return run_config_from_json(parse_key_value(text, what), what);
}

inline RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path), path); }

}  // namespace wheatnet
