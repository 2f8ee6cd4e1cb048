#pragma once

// Layers shared by the segmentation network and the recurrent head:
// convolution, transposed convolution, 2x2 max pooling, batch normalization,
// channel concatenation/slicing and a per-pixel softmax.

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <numeric>
#include <vector>

#include "stseg/autodiff.hpp"

namespace stseg {

template <Real T>
struct Conv2dParams {
  Var<T> weight;  // [Cout, Cin, k, k]
  Var<T> bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <Real T>
struct BatchNormParams {
  Var<T> gamma;  // [C]
  Var<T> beta;   // [C]
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.9);
  T epsilon = T(1e-5);
  bool train = true;
};

namespace detail {

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MapMat = Eigen::Map<RowMat<T>>;
template <Real T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t channels, height, width;  // image the kernel slides over
  std::size_t k, stride, pad;
  std::size_t out_h, out_w;             // grid of kernel positions
};

// Column matrix layout: row (c*k + u)*k + v, column i*out_w + j holds
// image[c, i*stride + u - pad, j*stride + v - pad] (zero outside).
template <Real T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const auto P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        T* row = col + ((c * g.k + u) * g.k + v) * P;
        for (std::size_t i = 0; i < g.out_h; ++i) {
          const auto ii = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + i * g.out_w;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(ii)) * g.width;
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const auto jj = static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
            dst[j] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : src[jj];
          }
        }
      }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <Real T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const auto P = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        const T* row = col + ((c * g.k + u) * g.k + v) * P;
        for (std::size_t i = 0; i < g.out_h; ++i) {
          const auto ii = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(ii)) * g.width;
          const T* src = row + i * g.out_w;
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const auto jj = static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(g.width)) dst[jj] += src[j];
          }
        }
      }
}

inline bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [B,C,H,W], got " + to_string(s));
}

}  // namespace detail

/// 2-D cross-correlation with zero padding, as used by every conv layer.
template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              std::size_t padding = 0) {
  using namespace detail;
  require_rank4(x.shape(), "conv2d");
  require_rank4(weight.shape(), "conv2d weight");
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin)
    throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
  if (bias.shape() != Shape{Cout}) throw ShapeError("conv2d: bias must be [Cout]");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (H + 2 * padding < k || W + 2 * padding < k) throw ShapeError("conv2d: output extent < 1");
  const ConvGeom g{Cin, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                   (W + 2 * padding - k) / stride + 1};
  const auto K = Cin * k * k, P = g.out_h * g.out_w;

  Tensor<T> out(Shape{B, Cout, g.out_h, g.out_w});
  std::vector<T> col(is_pointwise(g) ? 0 : K * P);
  CMapMat<T> wm(weight.value().data().data(), Cout, K);
  const auto& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().data().data() + b * Cin * H * W;
    const T* cp = xb;
    if (!is_pointwise(g)) {
      im2col(xb, g, col.data());
      cp = col.data();
    }
    MapMat<T> ob(out.data().data() + b * Cout * P, Cout, P);
    ob.noalias() = wm * CMapMat<T>(cp, K, P);
    for (std::size_t o = 0; o < Cout; ++o) ob.row(o).array() += bv[o];
  }

  return make_result<T>(std::move(out), {x.node(), weight.node(), bias.node()}, "conv2d", [g, B, Cout](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    auto& nb = *self.inputs[2];
    const auto K = g.channels * g.k * g.k, P = g.out_h * g.out_w;
    const auto in_sz = g.channels * g.height * g.width;
    std::vector<T> col(K * P);
    CMapMat<T> wm(nw.value.data().data(), Cout, K);
    for (std::size_t b = 0; b < B; ++b) {
      CMapMat<T> gb(self.grad.data().data() + b * Cout * P, Cout, P);
      if (nw.requires_grad) {
        const T* xb = nx.value.data().data() + b * in_sz;
        const T* cp = xb;
        if (!is_pointwise(g)) {
          im2col(xb, g, col.data());
          cp = col.data();
        }
        MapMat<T> gw(nw.grad_buffer().data().data(), Cout, K);
        gw.noalias() += gb * CMapMat<T>(cp, K, P).transpose();
      }
      if (nb.requires_grad) {
        auto& gbias = nb.grad_buffer();
        // fixed summation order, independent of buffer alignment
        for (std::size_t o = 0; o < Cout; ++o) {
          const T* r = gb.data() + o * P;
          gbias[o] += static_cast<T>(std::accumulate(r, r + P, 0.0));
        }
      }
      if (nx.requires_grad) {
        T* gx = nx.grad_buffer().data().data() + b * in_sz;
        if (is_pointwise(g)) {
          MapMat<T>(gx, K, P).noalias() += wm.transpose() * gb;
        } else {
          MapMat<T>(col.data(), K, P).noalias() = wm.transpose() * gb;
          col2im(col.data(), g, gx);
        }
      }
    }
  });
}

template <Real T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.stride, p.padding);
}

/// Transposed convolution: each input pixel scatters a weighted k x k stamp
/// at stride offsets. Weight layout [Cout, Cin, k, k]. Output extent
/// (H-1)*stride + k - 2*padding; with k = stride = 2 the extents double.
template <Real T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 2,
                        std::size_t padding = 0) {
  using namespace detail;
  require_rank4(x.shape(), "conv_transpose2d");
  require_rank4(weight.shape(), "conv_transpose2d weight");
  const auto B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin)
    throw ShapeError("conv_transpose2d: input has " + std::to_string(Cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  if (weight.dim(3) != k) throw ShapeError("conv_transpose2d: kernel must be square");
  if (bias.shape() != Shape{Cout}) throw ShapeError("conv_transpose2d: bias must be [Cout]");
  if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
  if ((H - 1) * stride + k <= 2 * padding) throw ShapeError("conv_transpose2d: output extent < 1");
  const auto Ho = (H - 1) * stride + k - 2 * padding, Wo = (W - 1) * stride + k - 2 * padding;
  // The output image plays the role of the im2col source; the input grid is the kernel-position grid.
  const ConvGeom g{Cout, Ho, Wo, k, stride, padding, H, W};
  const auto KK = Cout * k * k, P = H * W;

  // stamp[(o*k+u)*k+v, c] = weight[o,c,u,v]
  auto stamp = std::make_shared<RowMat<T>>(KK, Cin);
  const auto& wv = weight.value();
  for (std::size_t o = 0; o < Cout; ++o)
    for (std::size_t c = 0; c < Cin; ++c)
      for (std::size_t u = 0; u < k; ++u)
        for (std::size_t v = 0; v < k; ++v) (*stamp)((o * k + u) * k + v, c) = wv.at(o, c, u, v);

  Tensor<T> out(Shape{B, Cout, Ho, Wo});
  std::vector<T> col(KK * P);
  for (std::size_t b = 0; b < B; ++b) {
    MapMat<T>(col.data(), KK, P).noalias() = *stamp * CMapMat<T>(x.value().data().data() + b * Cin * P, Cin, P);
    T* ob = out.data().data() + b * Cout * Ho * Wo;
    col2im(col.data(), g, ob);
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t i = 0; i < Ho * Wo; ++i) ob[o * Ho * Wo + i] += bias.value()[o];
  }

  return make_result<T>(std::move(out), {x.node(), weight.node(), bias.node()}, "conv_transpose2d",
                        [g, B, Cin, stamp](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    auto& nb = *self.inputs[2];
    const auto Cout = g.channels, k = g.k, KK = Cout * k * k, P = g.out_h * g.out_w;
    const auto out_sz = Cout * g.height * g.width;
    std::vector<T> col(KK * P);
    RowMat<T> gstamp = RowMat<T>::Zero(KK, Cin);
    for (std::size_t b = 0; b < B; ++b) {
      const T* gout = self.grad.data().data() + b * out_sz;
      im2col(gout, g, col.data());
      CMapMat<T> gc(col.data(), KK, P);
      if (nx.requires_grad) {
        MapMat<T> gx(nx.grad_buffer().data().data() + b * Cin * P, Cin, P);
        gx.noalias() += stamp->transpose() * gc;
      }
      if (nw.requires_grad) gstamp.noalias() += gc * CMapMat<T>(nx.value.data().data() + b * Cin * P, Cin, P).transpose();
      if (nb.requires_grad) {
        auto& gbias = nb.grad_buffer();
        for (std::size_t o = 0; o < Cout; ++o)
          for (std::size_t i = 0; i < g.height * g.width; ++i) gbias[o] += gout[o * g.height * g.width + i];
      }
    }
    if (nw.requires_grad) {
      auto& gw = nw.grad_buffer();
      for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t c = 0; c < Cin; ++c)
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) gw.at(o, c, u, v) += gstamp((o * k + u) * k + v, c);
    }
  });
}

template <Real T>
Var<T> conv_transpose2d(const Var<T>& x, const Conv2dParams<T>& p) {
  return conv_transpose2d(x, p.weight, p.bias, p.stride, p.padding);
}

/// 2x2 max pooling, stride 2. Ties go to the first maximum in row-major order.
template <Real T>
Var<T> maxpool2x2(const Var<T>& x) {
  detail::require_rank4(x.shape(), "maxpool2x2");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("maxpool2x2: odd extent in " + to_string(x.shape()));
  const auto Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.value();
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j, ++o) {
        const std::size_t base = bc * H * W + 2 * i * W + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (xv[cand[q]] > xv[best]) best = cand[q];
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  return make_result<T>(std::move(out), {x.node()}, "maxpool2x2", [argmax](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax->size(); ++i) buf[(*argmax)[i]] += self.grad[i];
  });
}

/// Per-channel batch normalization over (B,H,W). Train mode normalizes with
/// batch statistics and updates the running estimates (biased variance);
/// eval mode applies the running estimates as a fixed affine map.
template <Real T>
Var<T> batchnorm2d(const Var<T>& x, const BatchNormParams<T>& p) {
  detail::require_rank4(x.shape(), "batchnorm2d");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto N = B * HW;
  if (p.gamma.shape() != Shape{C} || p.beta.shape() != Shape{C})
    throw ShapeError("batchnorm2d: gamma/beta must be [C]");
  if (!p.running_mean || !p.running_var) throw ConfigError("batchnorm2d: running statistics missing");
  if (!(p.epsilon > T{0})) throw ConfigError("batchnorm2d: epsilon must be positive");
  if (p.train && N < 2) throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel");

  const auto& xv = x.value();
  const auto& gv = p.gamma.value();
  const auto& bv = p.beta.value();
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  Tensor<T> out(x.shape());

  for (std::size_t c = 0; c < C; ++c) {
    T m, var;
    if (p.train) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += xv[(b * C + c) * HW + i];
      const double md = s / static_cast<double>(N);
      double ss = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xv[(b * C + c) * HW + i] - md;
          ss += d * d;
        }
      m = static_cast<T>(md);
      var = static_cast<T>(ss / static_cast<double>(N));
      auto& rm = (*p.running_mean)[c];
      auto& rv = (*p.running_var)[c];
      rm = p.momentum * rm + (T{1} - p.momentum) * m;
      rv = p.momentum * rv + (T{1} - p.momentum) * var;
    } else {
      m = (*p.running_mean)[c];
      var = std::max((*p.running_var)[c], T{0});
    }
    const T is = T{1} / std::sqrt(var + p.epsilon);
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const auto idx = (b * C + c) * HW + i;
        const T xh = (xv[idx] - m) * is;
        (*xhat)[idx] = xh;
        out[idx] = gv[c] * xh + bv[c];
      }
  }

  const bool train = p.train;
  return make_result<T>(std::move(out), {x.node(), p.gamma.node(), p.beta.node()}, "batchnorm2d",
                        [xhat, inv_std, B, C, HW, train](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& ng = *self.inputs[1];
    auto& nbeta = *self.inputs[2];
    const auto& g = self.grad;
    const T n = static_cast<T>(B * HW);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g{0}, sum_gx{0};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const auto idx = (b * C + c) * HW + i;
          sum_g += g[idx];
          sum_gx += g[idx] * (*xhat)[idx];
        }
      if (ng.requires_grad) ng.grad_buffer()[c] += sum_gx;
      if (nbeta.requires_grad) nbeta.grad_buffer()[c] += sum_g;
      if (!nx.requires_grad) continue;
      const T gamma = ng.value[c];
      const T is = (*inv_std)[c];
      auto& gx = nx.grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const auto idx = (b * C + c) * HW + i;
          if (train)
            gx[idx] += gamma * is / n * (n * g[idx] - sum_g - (*xhat)[idx] * sum_gx);
          else
            gx[idx] += gamma * is * g[idx];
        }
    }
  });
}

/// Concatenates along the channel axis: a fills [0,C1), b fills [C1,C1+C2).
template <Real T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  if (!a.defined() || !b.defined()) throw ShapeError("concat_channels: undefined input");
  detail::require_rank4(a.shape(), "concat_channels");
  detail::require_rank4(b.shape(), "concat_channels");
  const auto B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), HW = a.dim(2) * a.dim(3);
  if (b.dim(0) != B || b.dim(2) != a.dim(2) || b.dim(3) != a.dim(3))
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(Shape{B, C1 + C2, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.value().data().data() + n * C1 * HW, C1 * HW, out.data().data() + n * (C1 + C2) * HW);
    std::copy_n(b.value().data().data() + n * C2 * HW, C2 * HW, out.data().data() + (n * (C1 + C2) + C1) * HW);
  }
  return make_result<T>(std::move(out), {a.node(), b.node()}, "concat_channels", [B, C1, C2, HW](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t n = 0; n < B; ++n) {
      const T* g = self.grad.data().data() + n * (C1 + C2) * HW;
      if (na.requires_grad) {
        T* d = na.grad_buffer().data().data() + n * C1 * HW;
        for (std::size_t i = 0; i < C1 * HW; ++i) d[i] += g[i];
      }
      if (nb.requires_grad) {
        T* d = nb.grad_buffer().data().data() + n * C2 * HW;
        for (std::size_t i = 0; i < C2 * HW; ++i) d[i] += g[C1 * HW + i];
      }
    }
  });
}

/// Channels [start, start+count) of a [B,C,H,W] tensor.
template <Real T>
Var<T> slice_channels(const Var<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank4(x.shape(), "slice_channels");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (count == 0 || start + count > C) throw ShapeError("slice_channels: range out of bounds");
  Tensor<T> out(Shape{B, count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < B; ++n)
    std::copy_n(x.value().data().data() + (n * C + start) * HW, count * HW, out.data().data() + n * count * HW);
  return make_result<T>(std::move(out), {x.node()}, "slice_channels", [B, C, HW, start, count](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    for (std::size_t n = 0; n < B; ++n) {
      const T* g = self.grad.data().data() + n * count * HW;
      T* d = buf.data().data() + (n * C + start) * HW;
      for (std::size_t i = 0; i < count * HW; ++i) d[i] += g[i];
    }
  });
}

template <Real T>
std::pair<Var<T>, Var<T>> split_channels(const Var<T>& x, std::size_t first) {
  return {slice_channels(x, 0, first), slice_channels(x, first, x.dim(1) - first)};
}

/// Stacks tensors with identical trailing extents along their leading axis.
/// Used to fuse per-gate kernels into one convolution.
template <Real T>
Var<T> stack_leading(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack_leading: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) throw ShapeError("stack_leading: trailing extents differ");
    lead += p.dim(0);
    nodes.push_back(p.node());
  }
  Shape s{lead};
  s.insert(s.end(), tail.begin(), tail.end());
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return make_result<T>(std::move(out), std::move(nodes), "stack_leading", [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const auto n = in->value.size();
      if (in->requires_grad) {
        auto& buf = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) buf[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// Softmax across the channel axis independently at every pixel.
template <Real T>
Var<T> softmax_channels(const Var<T>& x) {
  detail::require_rank4(x.shape(), "softmax_channels");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      const std::size_t base = n * C * HW + i;
      T mx = xv[base];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * HW]);
      T z{0};
      for (std::size_t c = 0; c < C; ++c) z += (out[base + c * HW] = std::exp(xv[base + c * HW] - mx));
      for (std::size_t c = 0; c < C; ++c) out[base + c * HW] /= z;
    }
  return make_result<T>(std::move(out), {x.node()}, "softmax_channels", [B, C, HW](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const auto& p = self.value;
    const auto& g = self.grad;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t base = n * C * HW + i;
        T dot{0};
        for (std::size_t c = 0; c < C; ++c) dot += g[base + c * HW] * p[base + c * HW];
        for (std::size_t c = 0; c < C; ++c) buf[base + c * HW] += p[base + c * HW] * (g[base + c * HW] - dot);
      }
  });
}

}  // namespace stseg
