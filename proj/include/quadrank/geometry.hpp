#pragma once

#include <array>
#include <cmath>

#include "quadrank/core.hpp"

namespace quadrank {

struct Point2 {
  double x = 0, y = 0;
  bool operator==(const Point2&) const = default;
};

// Row-major 3x3 matrix acting on homogeneous image coordinates.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty, 0, 0, 1}}; }
  static Mat3 rotation(double a) {
    const double c = std::cos(a), s = std::sin(a);
    return {{c, -s, 0, s, c, 0, 0, 0, 1}};
  }
  static Mat3 scaling(double sx, double sy) { return {{sx, 0, 0, 0, sy, 0, 0, 0, 1}}; }

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Mat3 operator*(const Mat3& o) const {
    Mat3 out;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(r, k) * o(k, c);
        out(r, c) = s;
      }
    return out;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  // Determinant of the upper-left 2x2 block.
  double affine_det() const { return m[0] * m[4] - m[1] * m[3]; }

  bool is_affine() const { return m[6] == 0 && m[7] == 0 && m[8] != 0; }

  Mat3 inverse() const {
    const double d = det();
    if (std::abs(d) < 1e-15) throw Error("singular mapping");
    Mat3 inv;
    inv.m = {(m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d,
             (m[1] * m[5] - m[2] * m[4]) / d, (m[5] * m[6] - m[3] * m[8]) / d,
             (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
             (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d,
             (m[0] * m[4] - m[1] * m[3]) / d};
    return inv;
  }

  Point2 apply(Point2 p) const {
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
  }

  // Jacobian of apply() at p, row-major 2x2.
  std::array<double, 4> jacobian(Point2 p) const {
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    const double u = m[0] * p.x + m[1] * p.y + m[2];
    const double v = m[3] * p.x + m[4] * p.y + m[5];
    const double w2 = w * w;
    return {(m[0] * w - u * m[6]) / w2, (m[1] * w - u * m[7]) / w2,
            (m[3] * w - v * m[6]) / w2, (m[4] * w - v * m[7]) / w2};
  }

  bool operator==(const Mat3&) const = default;
};

}  // namespace quadrank
