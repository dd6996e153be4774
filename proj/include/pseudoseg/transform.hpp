#pragma once

#include "pseudoseg/error.hpp"

namespace pseudoseg {

struct GeometricTransform {
  enum class Kind { identity, hflip, vflip, translate, scale };
  Kind kind = Kind::identity;
  double dx = 0.0, dy = 0.0;  // translate
  double factor = 1.0;        // scale about the image centre

  static GeometricTransform identity() { return {}; }
  static GeometricTransform hflip() { return {Kind::hflip}; }
  static GeometricTransform vflip() { return {Kind::vflip}; }
  static GeometricTransform translate(double dx, double dy) { return {Kind::translate, dx, dy}; }
  static GeometricTransform scale(double factor) {
    if (!(factor > 0.0)) throw ContractError("scale factor must be positive");
    return {Kind::scale, 0.0, 0.0, factor};
  }
};

// Axis-aligned affine map x' = sx*x + tx, y' = sy*y + ty. Every transform
// kind above is one of these, so chains compose into a single map.
struct AxisAffine {
  double sx = 1.0, tx = 0.0, sy = 1.0, ty = 0.0;

  static AxisAffine from(const GeometricTransform& t, double width, double height) {
    using K = GeometricTransform::Kind;
    switch (t.kind) {
      case K::identity: return {};
      case K::hflip: return {-1.0, width, 1.0, 0.0};
      case K::vflip: return {1.0, 0.0, -1.0, height};
      case K::translate: return {1.0, t.dx, 1.0, t.dy};
      case K::scale:
        return {t.factor, 0.5 * width * (1.0 - t.factor), t.factor, 0.5 * height * (1.0 - t.factor)};
    }
    return {};
  }

  // Apply *this first, then `next`.
  AxisAffine then(const AxisAffine& next) const {
    return {next.sx * sx, next.sx * tx + next.tx, next.sy * sy, next.sy * ty + next.ty};
  }

  bool is_identity() const { return sx == 1.0 && tx == 0.0 && sy == 1.0 && ty == 0.0; }
};

}  // namespace pseudoseg
