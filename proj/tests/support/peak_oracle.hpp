#pragma once

#include <vector>

#include "wheatnet/infer.hpp"

namespace wheatnet::testing {

// Exact peak rule on integer-valued maps: window means compared as fractions,
// ties decided by the raw value.
struct Window {
  long sum = 0;
  long taps = 0;
};

inline Window window_at(const std::vector<int>& v, int h, int w, int y, int x) {
  Window out;
  for (int yy = y - 1; yy <= y + 1; ++yy)
    for (int xx = x - 1; xx <= x + 1; ++xx) {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      out.sum += v[yy * w + xx];
      ++out.taps;
    }
  return out;
}

inline std::vector<PixelPoint> oracle_peaks(const std::vector<int>& v, int h, int w, int thr_num) {
  std::vector<PixelPoint> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Window c = window_at(v, h, w, y, x);
      if (c.sum < long(thr_num) * c.taps) continue;
      bool strict = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if ((dx == 0 && dy == 0) || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const Window n = window_at(v, h, w, yy, xx);
          const long lhs = c.sum * n.taps, rhs = n.sum * c.taps;
          strict &= lhs > rhs || (lhs == rhs && v[y * w + x] > v[yy * w + xx]);
        }
      if (strict) out.push_back({x, y});
    }
  return out;
}

}  // namespace wheatnet::testing
