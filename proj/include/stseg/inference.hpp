#pragma once

// Tiled whole-image inference for the FCN and the temporal fusion model.

#include <vector>

#include "stseg/convlstm.hpp"
#include "stseg/dataset.hpp"
#include "stseg/tiling.hpp"
#include "stseg/unet.hpp"

namespace stseg {

struct TileOptions {
  std::size_t tile = 2048;
  std::size_t overlap = 512;
};

/// PMap [classes,H,W] of one image [C,H,W], in eval mode.
template <Real T>
Tensor<T> fcn_pmap(const Tensor<T>& image, ParamStore<T>& fcn, const UNetConfig& cfg, const TileOptions& t = {}) {
  if (image.ndim() != 3) throw ShapeError("fcn_pmap: expected [C,H,W], got " + to_string(image.shape()));
  const auto g = tile_plan(image.dim(1), image.dim(2), t.tile, t.overlap);
  if (g.tile_h % cfg.divisor() || g.tile_w % cfg.divisor())
    throw ShapeError("tile " + std::to_string(g.tile_h) + "x" + std::to_string(g.tile_w) + " is not divisible by " +
                     std::to_string(cfg.divisor()) + " (2^depth)");
  NoGradGuard ng;
  const std::function<Tensor<T>(const Tensor<T>&)> run = [&](const Tensor<T>& crop) {
    const auto h = crop.dim(1), w = crop.dim(2);
    auto y = unet_forward(Var<T>(crop.reshaped(Shape{1, crop.dim(0), h, w})), fcn, cfg, Mode::eval).value();
    return y.reshaped(Shape{cfg.num_classes, h, w});
  };
  return tiled_apply(image, g, run);
}

/// Fused map [classes,H,W] from a sequence of PMaps, each [classes,H,W].
template <Real T>
Tensor<T> fused_pmap(const std::vector<Tensor<T>>& pmaps, ParamStore<T>& rnn, const ConvLstmConfig& cfg,
                     const TileOptions& t = {}) {
  if (pmaps.empty()) throw ShapeError("fused_pmap: empty sequence");
  const auto C = pmaps[0].dim(0), H = pmaps[0].dim(1), W = pmaps[0].dim(2);
  for (const auto& p : pmaps)
    if (p.shape() != pmaps[0].shape()) throw ShapeError("fused_pmap: sequence members differ in shape");
  const auto Tn = pmaps.size();
  Tensor<T> stacked(Shape{Tn * C, H, W});
  for (std::size_t k = 0; k < Tn; ++k) std::copy(pmaps[k].storage().begin(), pmaps[k].storage().end(), stacked.storage().begin() + k * C * H * W);
  NoGradGuard ng;
  const std::function<Tensor<T>(const Tensor<T>&)> run = [&](const Tensor<T>& crop) {
    const auto h = crop.dim(1), w = crop.dim(2);
    std::vector<Var<T>> seq;
    for (std::size_t k = 0; k < Tn; ++k)
      seq.emplace_back(Tensor<T>(Shape{1, C, h, w}, std::vector<T>(crop.storage().begin() + k * C * h * w,
                                                                   crop.storage().begin() + (k + 1) * C * h * w)));
    return temporal_forward(seq, rnn, cfg).value().reshaped(Shape{cfg.out_channels, h, w});
  };
  return tiled_apply(stacked, tile_plan(H, W, t.tile, t.overlap), run);
}

/// Road mask from a probability map: channel 0 above 0.5.
template <Real T>
Mask threshold(const Tensor<T>& pmap) {
  if (pmap.ndim() != 3) throw ShapeError("threshold: expected [C,H,W]");
  const auto H = pmap.dim(1), W = pmap.dim(2);
  Mask m(H, W);
  for (std::size_t i = 0; i < H * W; ++i) m.px[i] = pmap[kRoadChannel * H * W + i] > T(0.5);
  return m;
}

inline double mask_accuracy(const Mask& pred, const Mask& truth) {
  return pixel_accuracy(mask_classes(pred), mask_classes(truth));
}

/// Per-date road masks as colour channels: date 0 red, date 1 green, date 2 blue.
inline Image8 disagreement_composite(const std::vector<Mask>& dates) {
  if (dates.empty()) throw ShapeError("disagreement_composite: no masks");
  const auto H = dates[0].height, W = dates[0].width;
  Image8 im{H, W, 3, std::vector<std::uint8_t>(3 * H * W, 0)};
  for (std::size_t t = 0; t < std::min<std::size_t>(3, dates.size()); ++t) {
    if (dates[t].height != H || dates[t].width != W) throw ShapeError("disagreement_composite: extent mismatch");
    for (std::size_t i = 0; i < H * W; ++i) im.px[3 * i + t] = dates[t].px[i] ? 255 : 0;
  }
  return im;
}

/// Fraction of pixels on which the masks do not all agree.
inline double disagreement_rate(const std::vector<Mask>& masks) {
  if (masks.size() < 2) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < masks[0].px.size(); ++i) {
    bool differ = false;
    for (std::size_t k = 1; k < masks.size(); ++k) differ |= masks[k].px[i] != masks[0].px[i];
    n += differ;
  }
  return static_cast<double>(n) / static_cast<double>(masks[0].px.size());
}

}  // namespace stseg
