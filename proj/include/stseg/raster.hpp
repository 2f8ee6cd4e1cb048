#pragma once

// Road vectors to binary label rasters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "stseg/error.hpp"

namespace stseg {

/// Binary raster, row-major, 1 = road.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), px(h * w, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return px[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return px[r * width + c]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(px.begin(), px.end(), 1)); }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct Point {
  double row = 0, col = 0;
};

using Polyline = std::vector<Point>;

struct VectorRoads {
  std::vector<Polyline> polylines;
};

namespace detail {

inline long round_coord(double v) { return std::lround(v); }

// Integer Bresenham between rounded endpoints; ties on the minor axis stay
// on the side of the start point. Out-of-raster pixels are dropped.
inline void draw_segment(Mask& m, Point a, Point b) {
  long r0 = round_coord(a.row), c0 = round_coord(a.col);
  const long r1 = round_coord(b.row), c1 = round_coord(b.col);
  const long dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
  const long sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
  auto plot = [&](long r, long c) {
    if (r >= 0 && c >= 0 && r < static_cast<long>(m.height) && c < static_cast<long>(m.width)) m.at(r, c) = 1;
  };
  const bool steep = dr > dc;
  const long major = steep ? dr : dc, minor = steep ? dc : dr;
  long err = 2 * minor - major;
  for (long k = 0; k <= major; ++k) {
    plot(r0, c0);
    if (err > 0) {
      (steep ? c0 : r0) += steep ? sc : sr;
      err -= 2 * major;
    }
    err += 2 * minor;
    (steep ? r0 : c0) += steep ? sr : sc;
  }
}

}  // namespace detail

inline Mask rasterize_roads(const VectorRoads& v, std::size_t height, std::size_t width) {
  Mask m(height, width);
  for (const auto& line : v.polylines) {
    if (line.size() < 2) throw ConfigError("rasterize_roads: polyline with fewer than 2 points");
    for (std::size_t i = 0; i + 1 < line.size(); ++i) detail::draw_segment(m, line[i], line[i + 1]);
  }
  return m;
}

/// Binary dilation by a (2r+1)x(2r+1) square, done as two 1-D passes.
inline Mask dilate(const Mask& m, int radius) {
  if (radius < 0) throw ConfigError("dilate: radius must be >= 0");
  if (radius == 0) return m;
  const long R = radius, H = static_cast<long>(m.height), W = static_cast<long>(m.width);
  Mask rows(m.height, m.width), out(m.height, m.width);
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      if (m.at(r, c))
        for (long cc = std::max(0L, c - R); cc <= std::min(W - 1, c + R); ++cc) rows.at(r, cc) = 1;
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      if (rows.at(r, c))
        for (long rr = std::max(0L, r - R); rr <= std::min(H - 1, r + R); ++rr) out.at(rr, c) = 1;
  return out;
}

/// Reads a GeoJSON FeatureCollection (or bare geometry) of LineString /
/// MultiLineString features whose coordinates are [x, y] = [col, row] pixels.
inline VectorRoads parse_geojson_roads(const nlohmann::json& j) {
  VectorRoads v;
  auto line = [&](const nlohmann::json& coords) {
    Polyline p;
    for (const auto& xy : coords) {
      if (!xy.is_array() || xy.size() < 2) throw FormatError("GeoJSON: coordinate must be [x, y]");
      p.push_back({xy[1].get<double>(), xy[0].get<double>()});
    }
    if (p.size() < 2) throw FormatError("GeoJSON: LineString needs at least 2 points");
    v.polylines.push_back(std::move(p));
  };
  auto geometry = [&](const nlohmann::json& g) {
    const auto type = g.at("type").get<std::string>();
    if (type == "LineString") line(g.at("coordinates"));
    else if (type == "MultiLineString")
      for (const auto& c : g.at("coordinates")) line(c);
    else throw FormatError("GeoJSON: unsupported geometry type " + type);
  };
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "FeatureCollection")
      for (const auto& f : j.at("features")) geometry(f.at("geometry"));
    else if (type == "Feature") geometry(j.at("geometry"));
    else geometry(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("GeoJSON: ") + e.what());
  }
  return v;
}

inline VectorRoads load_geojson_roads(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return parse_geojson_roads(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace stseg
