#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pseudoseg/error.hpp"

namespace pseudoseg {

// A polygon is a flat list of coordinates [x1,y1,...,xn,yn] in pixel units.
using Polygon = std::vector<double>;
using PolygonSet = std::vector<Polygon>;

// Axis-aligned box [x, y, w, h].
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

// Row-major binary raster packed 64 pixels per word.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height)
      : width_(width), height_(height),
        words_((static_cast<std::size_t>(width) * height + 63) / 64, 0) {}

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }

  bool get(int row, int col) const {
    const std::size_t i = index(row, col);
    return (words_[i >> 6] >> (i & 63)) & 1u;
  }
  void set(int row, int col) {
    const std::size_t i = index(row, col);
    words_[i >> 6] |= std::uint64_t{1} << (i & 63);
  }

  // Sets columns [c0, c1) of one row.
  void set_span(int row, int c0, int c1) {
    for (int c = c0; c < c1; ++c) set(row, c);
  }

  std::int64_t popcount() const {
    std::int64_t n = 0;
    for (auto w : words_) n += std::popcount(w);
    return n;
  }

  Mask& operator|=(const Mask& o) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
    return *this;
  }

  std::span<const std::uint64_t> words() const noexcept { return words_; }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * width_ + col;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint64_t> words_;
};

inline std::int64_t intersection_count(const Mask& a, const Mask& b) {
  const auto wa = a.words();
  const auto wb = b.words();
  std::int64_t n = 0;
  for (std::size_t i = 0; i < wa.size(); ++i) n += std::popcount(wa[i] & wb[i]);
  return n;
}

inline std::int64_t union_count(const Mask& a, const Mask& b) {
  const auto wa = a.words();
  const auto wb = b.words();
  std::int64_t n = 0;
  for (std::size_t i = 0; i < wa.size(); ++i) n += std::popcount(wa[i] | wb[i]);
  return n;
}

inline std::size_t vertex_count(const Polygon& poly) { return poly.size() / 2; }

// Throws ValidationError unless the list has even length and >= 3 vertices.
inline void check_polygon(const Polygon& poly, const std::string& context) {
  if (poly.size() % 2 != 0) {
    throw ValidationError(context + ": polygon has odd coordinate count " +
                          std::to_string(poly.size()));
  }
  if (poly.size() < 6) {
    throw ValidationError(context + ": polygon needs at least 3 vertices, got " +
                          std::to_string(poly.size() / 2));
  }
  for (double v : poly) {
    if (!std::isfinite(v)) throw ValidationError(context + ": non-finite coordinate");
  }
}

// Shoelace area, absolute value.
inline double polygon_area(const Polygon& poly) {
  if (poly.size() % 2 != 0 || poly.size() < 6) {
    throw ValidationError("polygon_area: need an even-length list with >= 3 vertices");
  }
  const std::size_t n = vertex_count(poly);
  double twice = 0.0;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    twice += poly[2 * j] * poly[2 * i + 1] - poly[2 * i] * poly[2 * j + 1];
  }
  return std::abs(twice) * 0.5;
}

// Tight bounds of every vertex across the set. Empty set gives a zero box.
inline Box bounding_box(const PolygonSet& polys) {
  double x0 = INFINITY, y0 = INFINITY, x1 = -INFINITY, y1 = -INFINITY;
  for (const auto& p : polys) {
    for (std::size_t i = 0; i + 1 < p.size(); i += 2) {
      x0 = std::min(x0, p[i]);
      x1 = std::max(x1, p[i]);
      y0 = std::min(y0, p[i + 1]);
      y1 = std::max(y1, p[i + 1]);
    }
  }
  if (x0 > x1) return {};
  return {x0, y0, x1 - x0, y1 - y0};
}

namespace detail {

// Scanline fill of one polygon under the even-odd rule. An edge crosses the
// scanline y iff exactly one endpoint lies strictly above it (half-open in
// y), and a pixel centre cx is inside iff an odd number of crossings have
// x > cx.
inline void fill_polygon(const Polygon& poly, Mask& mask) {
  const std::size_t n = vertex_count(poly);
  if (n < 3) return;
  double ymin = INFINITY, ymax = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    ymin = std::min(ymin, poly[2 * i + 1]);
    ymax = std::max(ymax, poly[2 * i + 1]);
  }
  const int row_lo = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int row_hi = std::min(mask.height() - 1, static_cast<int>(std::ceil(ymax)));
  std::vector<double> xs;
  for (int r = row_lo; r <= row_hi; ++r) {
    const double py = r + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const double xi = poly[2 * i], yi = poly[2 * i + 1];
      const double xj = poly[2 * j], yj = poly[2 * j + 1];
      if ((yi > py) != (yj > py)) {
        xs.push_back((xj - xi) * (py - yi) / (yj - yi) + xi);
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // First column whose centre is >= xs[k], first column whose centre is >= xs[k+1].
      auto first_at_or_after = [&](double x) {
        double c = std::floor(x - 0.5);
        if (c < 0) return 0;
        if (c > mask.width()) return mask.width();
        int ci = static_cast<int>(c);
        while (ci < mask.width() && ci + 0.5 < x) ++ci;
        while (ci > 0 && ci - 0.5 >= x) --ci;
        return ci;
      };
      const int c0 = first_at_or_after(xs[k]);
      const int c1 = first_at_or_after(xs[k + 1]);
      if (c0 < c1) mask.set_span(r, c0, c1);
    }
  }
}

}  // namespace detail

// Pixel (r, c) is set iff its centre (c + 0.5, r + 0.5) lies inside any of
// the polygons under the even-odd rule.
inline Mask rasterize(const PolygonSet& polys, int width, int height) {
  if (width <= 0 || height <= 0) {
    throw ContractError("rasterize: dimensions must be positive");
  }
  Mask out(width, height);
  if (polys.size() == 1) {
    detail::fill_polygon(polys.front(), out);
    return out;
  }
  for (const auto& p : polys) {
    Mask one(width, height);
    detail::fill_polygon(p, one);
    out |= one;
  }
  return out;
}

// Sutherland-Hodgman clip of one polygon against [0,w] x [0,h].
inline Polygon clip_to_rect(const Polygon& poly, double w, double h) {
  struct Pt {
    double x, y;
  };
  std::vector<Pt> pts;
  for (std::size_t i = 0; i + 1 < poly.size(); i += 2) pts.push_back({poly[i], poly[i + 1]});

  auto clip_edge = [](const std::vector<Pt>& in, auto inside, auto intersect) {
    std::vector<Pt> out;
    if (in.empty()) return out;
    Pt prev = in.back();
    bool prev_in = inside(prev);
    for (const Pt& cur : in) {
      const bool cur_in = inside(cur);
      if (cur_in) {
        if (!prev_in) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(intersect(prev, cur));
      }
      prev = cur;
      prev_in = cur_in;
    }
    return out;
  };
  auto at_x = [](double x) {
    return [x](Pt a, Pt b) { return Pt{x, a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x)}; };
  };
  auto at_y = [](double y) {
    return [y](Pt a, Pt b) { return Pt{a.x + (b.x - a.x) * (y - a.y) / (b.y - a.y), y}; };
  };

  pts = clip_edge(pts, [](Pt p) { return p.x >= 0.0; }, at_x(0.0));
  pts = clip_edge(pts, [w](Pt p) { return p.x <= w; }, at_x(w));
  pts = clip_edge(pts, [](Pt p) { return p.y >= 0.0; }, at_y(0.0));
  pts = clip_edge(pts, [h](Pt p) { return p.y <= h; }, at_y(h));

  // Consecutive duplicates appear when a vertex sits exactly on a clip edge.
  Polygon out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Pt& p = pts[i];
    const Pt& q = pts[(i + pts.size() - 1) % pts.size()];
    if (pts.size() > 1 && p.x == q.x && p.y == q.y) continue;
    out.push_back(p.x);
    out.push_back(p.y);
  }
  return out;
}

// Round to the 1e-6 grid used by canonical serialization.
inline double quantize(double v) {
  const double q = std::round(v * 1e6) / 1e6;
  return q == 0.0 ? 0.0 : q;  // no negative zero
}

}  // namespace pseudoseg
