#pragma once

// Regular patch grids for training and overlapping tile grids for inference.

#include <cstdint>
#include <functional>
#include <vector>

#include "stseg/synth.hpp"

namespace stseg {

/// Origins k*stride along one axis; the last window is clamped to end at the
/// border (shifted, not shrunk). A window longer than the extent yields a
/// single origin at 0.
inline std::vector<std::size_t> axis_origins(std::size_t extent, std::size_t window, std::size_t stride) {
  if (stride == 0) throw ConfigError("grid stride must be positive");
  if (window >= extent) return {0};
  std::vector<std::size_t> o;
  for (std::size_t p = 0; p + window < extent; p += stride) o.push_back(p);
  if (o.back() + window < extent) o.push_back(extent - window);
  return o;
}

struct Origin {
  std::size_t row = 0, col = 0;
  friend bool operator==(const Origin&, const Origin&) = default;
};

inline std::vector<Origin> patch_origins(std::size_t H, std::size_t W, std::size_t patch, std::size_t stride) {
  if (H < patch || W < patch)
    throw ShapeError("image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the patch size " +
                     std::to_string(patch));
  std::vector<Origin> out;
  for (auto r : axis_origins(H, patch, stride))
    for (auto c : axis_origins(W, patch, stride)) out.push_back({r, c});
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& x, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w) {
  const auto n = x.ndim();
  const auto H = x.dim(n - 2), W = x.dim(n - 1);
  if (r0 + h > H || c0 + w > W) throw ShapeError("crop window outside the image");
  Shape s = x.shape();
  s[n - 2] = h;
  s[n - 1] = w;
  Tensor<T> y(s);
  for (std::size_t p = 0; p < x.size() / (H * W); ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) y[(p * h + i) * w + j] = x[(p * H + r0 + i) * W + c0 + j];
  return y;
}

inline Mask crop(const Mask& m, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w) {
  if (r0 + h > m.height || c0 + w > m.width) throw ShapeError("crop window outside the mask");
  Mask y(h, w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) y.at(i, j) = m.at(r0 + i, c0 + j);
  return y;
}

inline SequenceSample crop(const SequenceSample& s, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w) {
  SequenceSample out;
  for (const auto& img : s.images) out.images.push_back(crop(img, r0, c0, h, w));
  out.label = crop(s.label, r0, c0, h, w);
  out.dates = s.dates;
  out.draws = s.draws;
  return out;
}

inline std::vector<SequenceSample> extract_patches(const SequenceSample& s, std::size_t patch = 512,
                                                   std::size_t stride = 512) {
  std::vector<SequenceSample> out;
  for (const auto& o : patch_origins(s.height(), s.width(), patch, stride))
    out.push_back(crop(s, o.row, o.col, patch, patch));
  return out;
}

// ---------------------------------------------------------------------------
// Inference tiles

struct TileGrid {
  std::size_t height = 0, width = 0;        // image extent
  std::size_t tile_h = 0, tile_w = 0;       // per-axis tile extent
  std::size_t overlap = 0;
  std::vector<std::size_t> rows, cols;      // per-axis origins
  std::vector<Origin> origins;              // row-major product of rows x cols
};

inline TileGrid tile_plan(std::size_t H, std::size_t W, std::size_t tile = 2048, std::size_t overlap = 512) {
  if (tile == 0 || overlap >= tile) throw ConfigError("tile_plan: need tile > overlap >= 0");
  if (H == 0 || W == 0) throw ShapeError("tile_plan: empty image");
  TileGrid g{H, W, std::min(tile, H), std::min(tile, W), overlap, {}, {}, {}};
  g.rows = axis_origins(H, tile, tile - overlap);
  g.cols = axis_origins(W, tile, tile - overlap);
  for (auto r : g.rows)
    for (auto c : g.cols) g.origins.push_back({r, c});
  return g;
}

namespace detail {

// For each pixel along an axis, the index of the containing window whose
// centre is nearest; ties go to the earlier window.
inline std::vector<std::size_t> nearest_window(std::size_t extent, std::size_t window,
                                               const std::vector<std::size_t>& origins) {
  std::vector<std::size_t> pick(extent);
  for (std::size_t p = 0; p < extent; ++p) {
    std::int64_t best = -1;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < origins.size(); ++k) {
      if (p < origins[k] || p >= origins[k] + window) continue;
      // doubled coordinates keep pixel and window centres integral
      const auto d = std::llabs(static_cast<std::int64_t>(2 * p + 1) - static_cast<std::int64_t>(2 * origins[k] + window));
      if (best < 0 || d < best) {
        best = d;
        arg = k;
      }
    }
    pick[p] = arg;
  }
  return pick;
}

}  // namespace detail

enum class StitchRule { nearest_center, average };

/// Reassembles per-tile maps [C,tile_h,tile_w] (one per grid origin, in
/// grid order) into one [C,H,W] map.
template <Real T>
Tensor<T> stitch(const std::vector<Tensor<T>>& tiles, const TileGrid& g,
                 StitchRule rule = StitchRule::nearest_center) {
  if (tiles.size() != g.origins.size())
    throw ShapeError("stitch: expected " + std::to_string(g.origins.size()) + " tiles, got " +
                     std::to_string(tiles.size()));
  const auto C = tiles.front().dim(0);
  for (const auto& t : tiles)
    if (t.shape() != Shape{C, g.tile_h, g.tile_w})
      throw ShapeError("stitch: tile shape " + to_string(t.shape()) + " does not match the grid");
  const auto H = g.height, W = g.width, th = g.tile_h, tw = g.tile_w;
  Tensor<T> out(Shape{C, H, W});

  if (rule == StitchRule::nearest_center) {
    const auto pr = detail::nearest_window(H, th, g.rows), pc = detail::nearest_window(W, tw, g.cols);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const auto& tile = tiles[pr[i] * g.cols.size() + pc[j]];
          out[(c * H + i) * W + j] = tile[(c * th + i - g.rows[pr[i]]) * tw + j - g.cols[pc[j]]];
        }
    return out;
  }

  std::vector<T> count(H * W, T{0});
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    const auto [r0, c0] = g.origins[k];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < th; ++i)
        for (std::size_t j = 0; j < tw; ++j) out[(c * H + r0 + i) * W + c0 + j] += tiles[k][(c * th + i) * tw + j];
    for (std::size_t i = 0; i < th; ++i)
      for (std::size_t j = 0; j < tw; ++j) count[(r0 + i) * W + c0 + j] += T{1};
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) out[c * H * W + i] /= count[i];
  return out;
}

/// Runs fn over every tile of a [C,H,W] image and stitches the results.
template <Real T>
Tensor<T> tiled_apply(const Tensor<T>& image, const TileGrid& g, const std::function<Tensor<T>(const Tensor<T>&)>& fn,
                      StitchRule rule = StitchRule::nearest_center) {
  std::vector<Tensor<T>> outs;
  for (const auto& o : g.origins) outs.push_back(fn(crop(image, o.row, o.col, g.tile_h, g.tile_w)));
  return stitch(outs, g, rule);
}

}  // namespace stseg
