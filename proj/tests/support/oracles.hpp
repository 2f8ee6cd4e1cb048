#pragma once

// Brute-force reference implementations used only by the tests. None of
// these share code paths with the library kernels they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stseg/tensor.hpp"

namespace oracle {

using stseg::Shape;
using stseg::Tensor;

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

/// Central differences of a scalar function with respect to every entry of x.
inline Tensor<double> finite_diff(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                  double step = 1e-5) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double dn = f(x);
    x[i] = orig;
    g[i] = (up - dn) / (2 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, tiny).
inline double rel_err(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Direct summation definition of a zero-padded strided cross-correlation.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                             std::size_t stride, std::size_t pad) {
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = w.dim(0), k = w.dim(2);
  const auto Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> out(Shape{B, Cout, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = bias[o];
          for (std::size_t c = 0; c < Cin; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += w.at(o, c, u, v) * x.at(b, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q));
              }
          out.at(b, o, i, j) = acc;
        }
  return out;
}

/// Scatter definition of a transposed convolution without padding.
inline Tensor<double> conv_transpose2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                                       std::size_t stride) {
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = w.dim(0), k = w.dim(2);
  Tensor<double> out(Shape{B, Cout, (H - 1) * stride + k, (W - 1) * stride + k});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o) {
      for (std::size_t i = 0; i < out.dim(2); ++i)
        for (std::size_t j = 0; j < out.dim(3); ++j) out.at(b, o, i, j) = bias[o];
      for (std::size_t c = 0; c < Cin; ++c)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) out.at(b, o, i * stride + u, j * stride + v) += x.at(b, c, i, j) * w.at(o, c, u, v);
    }
  return out;
}

inline Tensor<double> maxpool2x2(const Tensor<double>& x) {
  Tensor<double> out(Shape{x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < out.dim(2); ++i)
        for (std::size_t j = 0; j < out.dim(3); ++j)
          out.at(b, c, i, j) = std::max({x.at(b, c, 2 * i, 2 * j), x.at(b, c, 2 * i, 2 * j + 1),
                                         x.at(b, c, 2 * i + 1, 2 * j), x.at(b, c, 2 * i + 1, 2 * j + 1)});
  return out;
}

/// Train-mode batch normalization from its two-pass definition.
inline Tensor<double> batchnorm_train(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                                      double eps) {
  Tensor<double> out(x.shape());
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) m += x.at(b, c, i, j);
    m /= static_cast<double>(B * H * W);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) v += (x.at(b, c, i, j) - m) * (x.at(b, c, i, j) - m);
    v /= static_cast<double>(B * H * W);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          out.at(b, c, i, j) = gamma[c] * (x.at(b, c, i, j) - m) / std::sqrt(v + eps) + beta[c];
  }
  return out;
}

/// Scalar peephole LSTM (one hidden unit, one input), the 1x1 limit of the
/// convolutional cell.
struct ScalarLstm {
  double wxi, wxf, wxc, wxo, whi, whf, whc, who, wci, wcf, wco, bi, bf, bc, bo;
  bool output_peeks_current = false;

  static double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  void step(double x, double& h, double& c) const {
    const double i = sig(wxi * x + whi * h + wci * c + bi);
    const double f = sig(wxf * x + whf * h + wcf * c + bf);
    const double cn = f * c + i * std::tanh(wxc * x + whc * h + bc);
    const double o = sig(wxo * x + who * h + wco * (output_peeks_current ? cn : c) + bo);
    c = cn;
    h = o * std::tanh(cn);
  }
};

/// Adam on a single scalar, written out longhand.
struct ScalarAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0;
  int t = 0;

  double step(double theta, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace oracle
