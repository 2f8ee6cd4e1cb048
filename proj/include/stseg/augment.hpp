#pragma once

// The eight symmetries of the square, applied jointly to a sequence and its label.
// op_id = r + 4*f: rotate r quarter turns counter-clockwise, then mirror
// left-right when f = 1.

#include <vector>

#include "stseg/synth.hpp"

namespace stseg {

inline constexpr int kDihedralOps = 8;

namespace detail {

struct DihedralMap {
  int op;
  std::size_t in_h, in_w, out_h, out_w;

  DihedralMap(int op_id, std::size_t h, std::size_t w) : op(op_id), in_h(h), in_w(w) {
    if (op < 0 || op >= kDihedralOps) throw ConfigError("augment: op_id must be in 0..7");
    const bool odd = (op % 4) % 2 == 1;
    if (odd && h != w) throw ShapeError("augment: quarter-turn rotations need square patches");
    out_h = odd ? w : h;
    out_w = odd ? h : w;
  }

  // Source pixel for output pixel (i, j).
  std::size_t source(std::size_t i, std::size_t j) const {
    if (op >= 4) j = out_w - 1 - j;
    switch (op % 4) {
      case 0: return i * in_w + j;
      case 1: return j * in_w + (in_w - 1 - i);
      case 2: return (in_h - 1 - i) * in_w + (in_w - 1 - j);
      default: return (in_h - 1 - j) * in_w + i;
    }
  }

  template <class T>
  void plane(const T* src, T* dst) const {
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) dst[i * out_w + j] = src[source(i, j)];
  }
};

}  // namespace detail

/// Applies op_id to every plane of a [...,H,W] tensor.
template <class T>
Tensor<T> augment(const Tensor<T>& x, int op_id) {
  if (x.ndim() < 2) throw ShapeError("augment: need at least 2 dims");
  const auto n = x.ndim();
  const detail::DihedralMap m(op_id, x.dim(n - 2), x.dim(n - 1));
  Shape s = x.shape();
  s[n - 2] = m.out_h;
  s[n - 1] = m.out_w;
  Tensor<T> y(s);
  const auto plane = m.in_h * m.in_w;
  for (std::size_t p = 0; p < x.size() / plane; ++p) m.plane(x.data().data() + p * plane, y.data().data() + p * plane);
  return y;
}

inline Mask augment(const Mask& x, int op_id) {
  const detail::DihedralMap m(op_id, x.height, x.width);
  Mask y(m.out_h, m.out_w);
  m.plane(x.px.data(), y.px.data());
  return y;
}

inline SequenceSample augment(const SequenceSample& s, int op_id) {
  SequenceSample out = s;
  for (auto& img : out.images) img = augment(img, op_id);
  out.label = augment(s.label, op_id);
  return out;
}

/// Index of the op equal to applying b first, then a.
inline int dihedral_compose(int a, int b) {
  // op = F^f R^r as a map; F^fa R^ra F^fb R^rb with R F = F R^-1
  const int ra = a % 4, fa = a / 4, rb = b % 4, fb = b / 4;
  const int r = fb ? (rb - ra + 4) % 4 : (ra + rb) % 4;
  return r + 4 * (fa ^ fb);
}

}  // namespace stseg
