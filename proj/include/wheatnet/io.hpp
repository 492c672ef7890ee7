#pragma once

// File formats: PNG images, WHGT raw maps, point annotations (CSV / JSON).
//
// WHGT layout (little-endian): "WHGT" | u16 height | u16 width | f32[height*width]
// in row-major order.
//
// Annotation CSV: header `image_id,x,y`, one row per head. A row with empty x
// and y registers an image that has no heads. The JSON form is an array of
// objects with the same three fields.

#include <png.h>

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "wheatnet/errors.hpp"
#include "wheatnet/groundtruth.hpp"
#include "wheatnet/image.hpp"

namespace wheatnet {

// ---------------------------------------------------------------- bytes

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::string& out, T value) {
  std::array<unsigned char, sizeof(T)> b{};
  std::memcpy(b.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  out.append(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::array<unsigned char, sizeof(T)> b{};
    std::memcpy(b.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(what_ + ": truncated file");
  }
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------- PNG

inline Image read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read image '" + path + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode image '" + path + "': " + msg);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < buf.size(); ++i) out.data()[i] = buf[i] / 255.0;
  return out;
}

inline std::vector<unsigned char> to_rgb8(const Image& image) {
  std::vector<unsigned char> buf(image.data().size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = std::clamp(image.data()[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  return buf;
}

inline void write_png(const std::string& path, const Image& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = PNG_FORMAT_RGB;
  const auto buf = to_rgb8(image);
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write image '" + path + "': " + img.message);
  }
}

// ---------------------------------------------------------------- WHGT maps

inline std::string encode_whgt(const Map2D& map) {
  if (map.height() > 0xFFFF || map.width() > 0xFFFF) {
    throw ShapeError("WHGT: map " + std::to_string(map.height()) + "x" + std::to_string(map.width()) +
                     " exceeds the u16 header range");
  }
  std::string out = "WHGT";
  out.reserve(8 + map.size() * 4);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(map.height()));
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(map.width()));
  for (double v : map.values()) detail::put_le<float>(out, static_cast<float>(v));
  return out;
}

inline Map2D decode_whgt(std::string_view bytes, const std::string& what = "WHGT") {
  detail::ByteReader r(bytes, what);
  if (r.take(4) != "WHGT") throw DataError(what + ": bad magic, expected WHGT");
  const int h = r.get<std::uint16_t>();
  const int w = r.get<std::uint16_t>();
  std::vector<double> values(static_cast<std::size_t>(h) * w);
  for (double& v : values) v = r.get<float>();
  if (r.remaining() != 0) throw DataError(what + ": trailing bytes after map payload");
  return Map2D(h, w, std::move(values));
}

inline void write_whgt(const std::string& path, const Map2D& map) { write_file(path, encode_whgt(map)); }
inline Map2D read_whgt(const std::string& path) { return decode_whgt(read_file(path), path); }

// ---------------------------------------------------------------- annotations

/// Points per image id. Dimensions are not part of the annotation files.
using AnnotationTable = std::map<std::string, std::vector<Point>>;

inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw DataError(where + ": '" + s + "' is not a finite number");
  }
  return v;
}

}  // namespace detail

inline AnnotationTable parse_annotations_csv(std::string_view text, const std::string& what = "annotations") {
  AnnotationTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(detail::trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    const std::string where = what + ":" + std::to_string(lineno);
    if (!header) {
      if (cells.size() != 3 || cells[0] != "image_id" || cells[1] != "x" || cells[2] != "y") {
        throw DataError(where + ": expected header 'image_id,x,y'");
      }
      header = true;
      continue;
    }
    if (cells.size() != 3) throw DataError(where + ": expected 3 fields, got " + std::to_string(cells.size()));
    if (cells[0].empty()) throw DataError(where + ": empty image_id");
    auto& pts = table[cells[0]];
    if (cells[1].empty() && cells[2].empty()) continue;
    pts.push_back({detail::parse_double(cells[1], where), detail::parse_double(cells[2], where)});
  }
  if (!header) throw DataError(what + ": missing header 'image_id,x,y'");
  return table;
}

inline AnnotationTable parse_annotations_json(std::string_view text, const std::string& what = "annotations") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": " + e.what());
  }
  if (!j.is_array()) throw DataError(what + ": expected a JSON array of {image_id, x, y}");
  AnnotationTable table;
  for (const auto& row : j) {
    if (!row.is_object() || !row.contains("image_id")) throw DataError(what + ": row without image_id");
    auto& pts = table[row.at("image_id").get<std::string>()];
    const bool has_x = row.contains("x") && !row["x"].is_null();
    const bool has_y = row.contains("y") && !row["y"].is_null();
    if (!has_x && !has_y) continue;
    if (!has_x || !has_y) throw DataError(what + ": row with only one coordinate");
    pts.push_back({row["x"].get<double>(), row["y"].get<double>()});
  }
  return table;
}

/// Reads CSV or JSON, chosen by the first non-blank character.
inline AnnotationTable read_annotations(const std::string& path) {
  const std::string text = read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') return parse_annotations_json(text, path);
  return parse_annotations_csv(text, path);
}

inline std::string format_annotations_csv(const AnnotationTable& table) {
  std::string out = "image_id,x,y\n";
  for (const auto& [id, pts] : table) {
    if (pts.empty()) out += id + ",,\n";
    for (const Point& p : pts) out += id + "," + format_double(p.x) + "," + format_double(p.y) + "\n";
  }
  return out;
}

}  // namespace wheatnet
