#pragma once

#include <array>

#include "stseg/raster.hpp"

namespace oracle {

// Each dihedral op as a 2x2 integer matrix on centred coordinates
// (x = column, y = row pointing down).
using M2 = std::array<int, 4>;

inline M2 mat_mul(const M2& a, const M2& b) {
  return M2{a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]};
}

inline M2 op_matrix(int op) {
  const M2 rot{0, 1, -1, 0};  // counter-clockwise quarter turn in image coordinates
  M2 m{1, 0, 0, 1};
  for (int k = 0; k < op % 4; ++k) m = mat_mul(rot, m);
  if (op >= 4) m = mat_mul(M2{-1, 0, 0, 1}, m);
  return m;
}

// Places every source pixel of a square mask at its image under op_matrix.
inline stseg::Mask transform(const stseg::Mask& src, int op) {
  const auto m = op_matrix(op);
  const long n = long(src.height);
  stseg::Mask out(src.height, src.width);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) {
      const long x = 2 * c - (n - 1), y = 2 * r - (n - 1);
      const long x2 = m[0] * x + m[1] * y, y2 = m[2] * x + m[3] * y;
      out.at((y2 + n - 1) / 2, (x2 + n - 1) / 2) = src.at(r, c);
    }
  return out;
}

}  // namespace oracle
