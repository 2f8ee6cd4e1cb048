#pragma once

// Joint segmentation loss L = alpha*H - (1-alpha)*log(J) and pixel metrics.
// Channel 0 of every probability map is the "roads" class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stseg/autodiff.hpp"

namespace stseg {

inline constexpr std::size_t kRoadChannel = 0;

struct LossConfig {
  double alpha = 0.7;
  double epsilon = 1e-7;
  // Adds the (1-y) log(1-p) terms; for heads with independent per-channel sigmoids.
  bool binary = false;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("LossConfig: alpha must lie in [0,1]");
    if (!(epsilon > 0.0)) throw ConfigError("LossConfig: epsilon must be positive");
  }
};

namespace detail {

template <Real T>
void require_one_hot(const Tensor<T>& target, const Shape& pred_shape) {
  if (target.shape() != pred_shape)
    throw ShapeError("target shape " + to_string(target.shape()) + " does not match prediction " + to_string(pred_shape));
  if (pred_shape.size() != 4) throw ShapeError("expected [B,C,H,W] maps");
  const auto B = pred_shape[0], C = pred_shape[1], HW = pred_shape[2] * pred_shape[3];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      int ones = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T v = target[(b * C + c) * HW + i];
        if (v == T{1}) ++ones;
        else if (v != T{0}) throw ConfigError("target is not one-hot");
      }
      if (ones != 1) throw ConfigError("target is not one-hot");
    }
}

}  // namespace detail

/// Mean over pixels of -sum_c y_c log(clamp(p_c, eps, 1-eps)).
template <Real T>
Var<T> cross_entropy(const Var<T>& pred, const Tensor<T>& target, double epsilon = 1e-7) {
  detail::require_one_hot(target, pred.shape());
  const auto& p = pred.value();
  const T lo = static_cast<T>(epsilon), hi = T{1} - static_cast<T>(epsilon);
  const auto pixels = pred.dim(0) * pred.dim(2) * pred.dim(3);
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (target[i] != T{0}) acc -= std::log(static_cast<double>(std::clamp(p[i], lo, hi)));
  const T value = static_cast<T>(acc / static_cast<double>(pixels));
  return make_result<T>(Tensor<T>::scalar(value), {pred.node()}, "cross_entropy", [target, lo, hi, pixels](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& buf = in.grad_buffer();
    const T g = self.grad[0] / static_cast<T>(pixels);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T v = in.value[i];
      if (target[i] != T{0} && v > lo && v < hi) buf[i] -= g / v;
    }
  });
}

/// Mean over pixels of -sum_c [y_c log p_c + (1-y_c) log(1-p_c)], p clamped as above.
template <Real T>
Var<T> binary_cross_entropy(const Var<T>& pred, const Tensor<T>& target, double epsilon = 1e-7) {
  detail::require_one_hot(target, pred.shape());
  const auto& p = pred.value();
  const T lo = static_cast<T>(epsilon), hi = T{1} - static_cast<T>(epsilon);
  const auto pixels = pred.dim(0) * pred.dim(2) * pred.dim(3);
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = std::clamp(p[i], lo, hi);
    acc -= target[i] != T{0} ? std::log(v) : std::log1p(-v);
  }
  const T value = static_cast<T>(acc / static_cast<double>(pixels));
  return make_result<T>(Tensor<T>::scalar(value), {pred.node()}, "binary_cross_entropy",
                        [target, lo, hi, pixels](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& buf = in.grad_buffer();
    const T g = self.grad[0] / static_cast<T>(pixels);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T v = in.value[i];
      if (v <= lo || v >= hi) continue;
      buf[i] += target[i] != T{0} ? -g / v : g / (T{1} - v);
    }
  });
}

/// Soft IoU on the roads channel: (sum p*y + eps) / (sum (p + y - p*y) + eps).
template <Real T>
Var<T> soft_iou(const Var<T>& pred, const Tensor<T>& target, double epsilon = 1e-7) {
  detail::require_one_hot(target, pred.shape());
  const auto B = pred.dim(0), C = pred.dim(1), HW = pred.dim(2) * pred.dim(3);
  const auto& p = pred.value();
  double inter = 0, uni = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      const auto idx = (b * C + kRoadChannel) * HW + i;
      const double pv = p[idx], yv = target[idx];
      inter += pv * yv;
      uni += pv + yv - pv * yv;
    }
  const double I = inter + epsilon, U = uni + epsilon;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(I / U)), {pred.node()}, "soft_iou",
                        [target, I, U, B, C, HW](Node<T>& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const auto idx = (b * C + kRoadChannel) * HW + i;
        const double y = target[idx];
        // dI/dp = y, dU/dp = 1 - y
        buf[idx] += static_cast<T>(g * (y * U - I * (1.0 - y)) / (U * U));
      }
  });
}

template <Real T>
struct LossTerms {
  Var<T> loss;
  double cross_entropy;
  double iou;
};

template <Real T>
LossTerms<T> joint_loss(const Var<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  auto H = cfg.binary ? binary_cross_entropy(pred, target, cfg.epsilon) : cross_entropy(pred, target, cfg.epsilon);
  auto J = soft_iou(pred, target, cfg.epsilon);
  const T a = static_cast<T>(cfg.alpha);
  auto L = add(scale(H, a), scale(log(J), -(T{1} - a)));
  return {L, static_cast<double>(H.value().item()), static_cast<double>(J.value().item())};
}

// ---------------------------------------------------------------------------
// Hard-label metrics

/// Per-pixel class ids, [B,H,W] row-major.
struct ClassMap {
  std::size_t batch = 0, height = 0, width = 0;
  std::vector<std::uint8_t> ids;

  ClassMap() = default;
  ClassMap(std::size_t b, std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : batch(b), height(h), width(w), ids(b * h * w, fill) {}
  std::size_t size() const { return ids.size(); }
  bool same_extent(const ClassMap& o) const { return batch == o.batch && height == o.height && width == o.width; }
  friend bool operator==(const ClassMap&, const ClassMap&) = default;
};

/// Hard decision for a probability map: roads where channel 0 exceeds 0.5,
/// otherwise class 1. Works for softmax and sigmoid heads alike.
template <Real T>
ClassMap classify(const Tensor<T>& probs) {
  if (probs.ndim() != 4) throw ShapeError("classify: expected [B,C,H,W]");
  const auto B = probs.dim(0), C = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
  ClassMap m(B, probs.dim(2), probs.dim(3));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) m.ids[b * HW + i] = probs[(b * C + kRoadChannel) * HW + i] > T(0.5) ? 0 : 1;
  return m;
}

/// One-hot [B,C,H,W] target from class ids.
template <Real T>
Tensor<T> one_hot(const ClassMap& m, std::size_t channels = 2) {
  const auto HW = m.height * m.width;
  Tensor<T> t(Shape{m.batch, channels, m.height, m.width}, T{0});
  for (std::size_t b = 0; b < m.batch; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      const auto c = m.ids[b * HW + i];
      if (c >= channels) throw ShapeError("one_hot: class id " + std::to_string(c) + " out of range");
      t[(b * channels + c) * HW + i] = T{1};
    }
  return t;
}

/// 100 * fraction of equal pixels.
inline double pixel_accuracy(const ClassMap& pred, const ClassMap& truth) {
  if (!pred.same_extent(truth)) throw ShapeError("pixel_accuracy: extent mismatch");
  if (pred.size() == 0) throw ShapeError("pixel_accuracy: empty maps");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) eq += pred.ids[i] == truth.ids[i];
  return 100.0 * static_cast<double>(eq) / static_cast<double>(pred.size());
}

/// Hard IoU of one class; 1.0 when the class is absent from both maps.
inline double class_iou(const ClassMap& pred, const ClassMap& truth, std::uint8_t cls = 0) {
  if (!pred.same_extent(truth)) throw ShapeError("class_iou: extent mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.ids[i] == cls, b = truth.ids[i] == cls;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace stseg
