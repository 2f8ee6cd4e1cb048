#pragma once

// Synthetic multi-date scenes: a random road network rendered T times under
// day-dependent radiometry (gain, bias, gamma), sensor noise and cloud blobs.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stseg/raster.hpp"
#include "stseg/tensor.hpp"

namespace stseg {

struct Range {
  double min = 0, max = 0;
  double draw(std::mt19937_64& rng) const {
    return min == max ? min : std::uniform_real_distribution<double>(min, max)(rng);
  }
};

struct RadiometryJitter {
  Range gain{0.75, 1.25};
  Range bias{-0.08, 0.08};
  Range gamma{0.75, 1.35};
  double noise_sigma = 0.06;
  double max_cloud_fraction = 0.10;
  int max_clouds = 4;

  void validate() const {
    for (const auto* r : {&gain, &bias, &gamma})
      if (!(r->min <= r->max)) throw ConfigError("RadiometryJitter: range min exceeds max");
    if (gamma.min <= 0) throw ConfigError("RadiometryJitter: gamma must be positive");
    if (noise_sigma < 0) throw ConfigError("RadiometryJitter: noise sigma must be >= 0");
    if (max_cloud_fraction < 0 || max_cloud_fraction > 1 || max_clouds < 0)
      throw ConfigError("RadiometryJitter: bad cloud settings");
  }

  static RadiometryJitter none() { return {{1, 1}, {0, 0}, {1, 1}, 0.0, 0.0, 0}; }
  static RadiometryJitter mild() { return {{0.9, 1.1}, {-0.03, 0.03}, {0.9, 1.1}, 0.03, 0.05, 2}; }
  static RadiometryJitter strong() { return {{0.6, 1.4}, {-0.12, 0.12}, {0.65, 1.5}, 0.09, 0.10, 6}; }

  static RadiometryJitter preset(const std::string& name) {
    if (name == "default") return {};
    if (name == "none") return none();
    if (name == "mild") return mild();
    if (name == "strong") return strong();
    throw ConfigError("unknown jitter preset '" + name + "' (none, mild, default, strong)");
  }
};

/// What was actually drawn for one date.
struct DateDraw {
  double gain = 1, bias = 0, gamma = 1, cloud_fraction = 0;
};

struct SequenceSample {
  std::vector<Tensor<float>> images;  // T x [3,H,W], values in [0,1]
  Mask label;
  std::vector<std::string> dates;
  std::vector<DateDraw> draws;

  std::size_t length() const { return images.size(); }
  std::size_t height() const { return label.height; }
  std::size_t width() const { return label.width; }
};

struct SynthOptions {
  int road_radius = 3;
  // Radiometry and geometry use separate streams so that a scene can be
  // re-observed under an independent jitter draw. Defaults to the scene seed.
  std::optional<std::uint64_t> radiometry_seed;
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq s{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                  static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(s);
}

using Rgb = std::array<double, 3>;

inline VectorRoads random_road_network(std::size_t H, std::size_t W, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> turn(0, 0.25);
  const double h = static_cast<double>(H), w = static_cast<double>(W);
  const double step = std::max(h, w) / 8;
  VectorRoads v;
  const int n = 2 + static_cast<int>(u(rng) * 4);
  for (int k = 0; k < n; ++k) {
    // start on a border, head into the image
    Point p;
    double heading;
    switch (static_cast<int>(u(rng) * 4)) {
      case 0: p = {0, u(rng) * w}; heading = std::numbers::pi / 2; break;
      case 1: p = {h - 1, u(rng) * w}; heading = -std::numbers::pi / 2; break;
      case 2: p = {u(rng) * h, 0}; heading = 0; break;
      default: p = {u(rng) * h, w - 1}; heading = std::numbers::pi; break;
    }
    heading += (u(rng) - 0.5) * 1.2;
    Polyline line{p};
    for (int s = 0; s < 40; ++s) {
      heading += turn(rng);
      p = {p.row + step * std::sin(heading), p.col + step * std::cos(heading)};
      line.push_back(p);
      if (p.row < -step || p.col < -step || p.row > h + step || p.col > w + step) break;
    }
    v.polylines.push_back(std::move(line));
  }
  return v;
}

// Jitter-free reflectance: smooth land-cover background, road-coloured
// building blocks as distractors, then the roads.
inline std::vector<Rgb> render_reflectance(const Mask& roads, std::mt19937_64& rng) {
  const auto H = roads.height, W = roads.width;
  std::uniform_real_distribution<double> u(0, 1);
  const Rgb vegetation{0.22, 0.38, 0.18}, soil{0.52, 0.44, 0.32}, pavement{0.56, 0.55, 0.54};

  struct Bump {
    double r, c, s, wgt;
  };
  std::vector<Bump> bumps(6);
  for (auto& b : bumps) b = {u(rng) * H, u(rng) * W, (0.1 + 0.25 * u(rng)) * std::max(H, W), u(rng) * 2 - 1};
  std::vector<Rgb> img(H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      double z = 0;
      for (const auto& b : bumps) {
        const double dr = (r - b.r) / b.s, dc = (c - b.c) / b.s;
        z += b.wgt * std::exp(-0.5 * (dr * dr + dc * dc));
      }
      const double t = 1 / (1 + std::exp(-3 * z));
      for (int ch = 0; ch < 3; ++ch) img[r * W + c][ch] = t * soil[ch] + (1 - t) * vegetation[ch];
    }

  const int blocks = static_cast<int>(3 + u(rng) * 6);
  for (int k = 0; k < blocks; ++k) {
    const auto bh = static_cast<std::size_t>(4 + u(rng) * H / 10), bw = static_cast<std::size_t>(4 + u(rng) * W / 10);
    const auto r0 = static_cast<std::size_t>(u(rng) * (H - std::min(H, bh)));
    const auto c0 = static_cast<std::size_t>(u(rng) * (W - std::min(W, bw)));
    const double shade = 0.9 + 0.2 * u(rng);
    for (std::size_t r = r0; r < std::min(H, r0 + bh); ++r)
      for (std::size_t c = c0; c < std::min(W, c0 + bw); ++c)
        for (int ch = 0; ch < 3; ++ch) img[r * W + c][ch] = shade * pavement[ch];
  }

  const double road_shade = 0.95 + 0.1 * u(rng);
  for (std::size_t i = 0; i < H * W; ++i)
    if (roads.px[i])
      for (int ch = 0; ch < 3; ++ch) img[i][ch] = road_shade * pavement[ch];
  return img;
}

// Elliptical blobs covering at most max_fraction of the raster.
inline Mask cloud_cover(std::size_t H, std::size_t W, const RadiometryJitter& j, std::mt19937_64& rng) {
  Mask cover(H, W);
  if (j.max_clouds == 0 || j.max_cloud_fraction <= 0) return cover;
  std::uniform_real_distribution<double> u(0, 1);
  const int n = static_cast<int>(u(rng) * (j.max_clouds + 1));
  const std::size_t budget = static_cast<std::size_t>(j.max_cloud_fraction * H * W);
  for (int k = 0; k < n; ++k) {
    const double cr = u(rng) * H, cc = u(rng) * W;
    const double ar = (0.04 + 0.12 * u(rng)) * H, ac = (0.04 + 0.12 * u(rng)) * W, th = u(rng) * std::numbers::pi;
    Mask next = cover;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double dr = r - cr, dc = c - cc;
        const double a = dr * std::cos(th) + dc * std::sin(th), b = -dr * std::sin(th) + dc * std::cos(th);
        if ((a * a) / (ar * ar) + (b * b) / (ac * ac) <= 1) next.at(r, c) = 1;
      }
    if (next.count() <= budget) cover = std::move(next);
  }
  return cover;
}

}  // namespace detail

inline SequenceSample synth_scene(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t T,
                                  const RadiometryJitter& jitter = {}, const SynthOptions& opt = {}) {
  jitter.validate();
  if (H == 0 || W == 0) throw ConfigError("synth_scene: empty raster");
  if (T == 0) throw ConfigError("synth_scene: sequence length must be >= 1");

  auto geo = detail::stream(seed, 1);
  SequenceSample s;
  s.label = dilate(rasterize_roads(detail::random_road_network(H, W, geo), H, W), opt.road_radius);
  const auto reflectance = detail::render_reflectance(s.label, geo);

  auto rad = detail::stream(opt.radiometry_seed.value_or(seed), 2);
  std::normal_distribution<double> noise(0, 1);
  for (std::size_t t = 0; t < T; ++t) {
    DateDraw d{jitter.gain.draw(rad), jitter.bias.draw(rad), jitter.gamma.draw(rad), 0};
    const auto clouds = detail::cloud_cover(H, W, jitter, rad);
    d.cloud_fraction = static_cast<double>(clouds.count()) / static_cast<double>(H * W);
    Tensor<float> img(Shape{3, H, W});
    for (std::size_t i = 0; i < H * W; ++i)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = std::pow(std::clamp(d.gain * reflectance[i][ch] + d.bias, 0.0, 1.0), d.gamma);
        if (clouds.px[i]) v = 0.93;
        if (jitter.noise_sigma > 0) v += jitter.noise_sigma * noise(rad);
        img[ch * H * W + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    s.images.push_back(std::move(img));
    s.dates.push_back("t" + std::to_string(t));
    s.draws.push_back(d);
  }
  return s;
}

inline nlohmann::json jitter_to_json(const RadiometryJitter& j) {
  return {{"gain", {j.gain.min, j.gain.max}},
          {"bias", {j.bias.min, j.bias.max}},
          {"gamma", {j.gamma.min, j.gamma.max}},
          {"noise_sigma", j.noise_sigma},
          {"max_cloud_fraction", j.max_cloud_fraction},
          {"max_clouds", j.max_clouds}};
}

}  // namespace stseg
