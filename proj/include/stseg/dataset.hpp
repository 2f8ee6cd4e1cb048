#pragma once

// On-disk dataset layout:
//   <root>/{train,val,test}/<scene_id>/img_t{0..T-1}.png   8-bit RGB
//                                      label.png          8-bit gray, 255 = road
//                                      meta.json          dates, jitter record, seed

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stseg/image_io.hpp"
#include "stseg/losses.hpp"
#include "stseg/synth.hpp"

namespace stseg {

namespace fs = std::filesystem;

inline constexpr std::array<const char*, 3> kSplits{"train", "val", "test"};

struct SceneRef {
  std::string split, id;
  fs::path dir;
};

inline std::string scene_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void write_scene(const fs::path& dir, const SequenceSample& s, std::uint64_t seed, const std::string& preset,
                        const RadiometryJitter& jitter) {
  fs::create_directories(dir);
  nlohmann::json draws = nlohmann::json::array();
  for (std::size_t t = 0; t < s.length(); ++t) {
    save_rgb_png(dir / ("img_t" + std::to_string(t) + ".png"), s.images[t]);
    const auto& d = s.draws[t];
    draws.push_back({{"date", s.dates[t]}, {"gain", d.gain}, {"bias", d.bias}, {"gamma", d.gamma},
                     {"cloud_fraction", d.cloud_fraction}});
  }
  save_mask_png(dir / "label.png", s.label);
  write_json(dir / "meta.json", {{"scene_id", dir.filename().string()},
                                 {"seed", seed},
                                 {"height", s.height()},
                                 {"width", s.width()},
                                 {"dates", s.dates},
                                 {"jitter", {{"preset", preset}, {"ranges", jitter_to_json(jitter)}, {"draws", draws}}}});
}

inline SequenceSample load_scene(const fs::path& dir) {
  const auto meta = read_json(dir / "meta.json");
  SequenceSample s;
  try {
    s.dates = meta.at("dates").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  if (s.dates.empty()) throw FormatError((dir / "meta.json").string() + ": no dates");
  s.label = load_mask_png(dir / "label.png");
  for (std::size_t t = 0; t < s.dates.size(); ++t) {
    auto img = load_rgb_png(dir / ("img_t" + std::to_string(t) + ".png"));
    if (img.dim(1) != s.label.height || img.dim(2) != s.label.width)
      throw ShapeError(dir.string() + ": image t" + std::to_string(t) + " does not match the label extent");
    s.images.push_back(std::move(img));
    s.draws.push_back({});
  }
  return s;
}

inline std::vector<SceneRef> list_scenes(const fs::path& root, const std::string& split) {
  std::vector<SceneRef> out;
  const auto d = root / split;
  if (!fs::is_directory(d)) return out;
  for (const auto& e : fs::directory_iterator(d))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) out.push_back({split, e.path().filename().string(), e.path()});
  std::sort(out.begin(), out.end(), [](const SceneRef& a, const SceneRef& b) { return a.id < b.id; });
  return out;
}

inline std::vector<SequenceSample> load_split(const fs::path& root, const std::string& split) {
  std::vector<SequenceSample> out;
  for (const auto& s : list_scenes(root, split)) out.push_back(load_scene(s.dir));
  return out;
}

struct SynthDatasetConfig {
  std::size_t scenes = 8;
  std::optional<std::size_t> val, test;  // default: N/8 each (at least 1 when N allows)
  std::size_t height = 256, width = 256, length = 3;
  std::uint64_t seed = 0;
  std::string preset = "default";
  int road_radius = 3;

  std::array<std::size_t, 3> split_counts() const {
    const std::size_t share = std::max<std::size_t>(1, scenes / 8);
    const std::size_t v = val.value_or(scenes >= 2 ? share : 0);
    const std::size_t t = test.value_or(scenes >= 3 ? share : 0);
    if (v + t >= scenes) throw ConfigError("synth: validation + test scenes leave no training scenes");
    return {scenes - v - t, v, t};
  }
};

/// Deterministic per-scene seed.
inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  auto rng = detail::stream(seed, 1000 + index);
  return rng();
}

inline std::array<std::size_t, 3> synth_dataset(const fs::path& root, const SynthDatasetConfig& cfg) {
  const auto jitter = RadiometryJitter::preset(cfg.preset);
  const auto counts = cfg.split_counts();
  std::size_t index = 0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < counts[s]; ++k, ++index) {
      const auto seed = scene_seed(cfg.seed, index);
      const auto sample = synth_scene(seed, cfg.height, cfg.width, cfg.length, jitter, {cfg.road_radius, {}});
      write_scene(root / kSplits[s] / scene_name(index), sample, seed, cfg.preset, jitter);
    }
  return counts;
}

/// Road mask -> class ids (road = 0, background = 1).
inline ClassMap mask_classes(const Mask& m) {
  ClassMap c(1, m.height, m.width);
  for (std::size_t i = 0; i < m.px.size(); ++i) c.ids[i] = m.px[i] ? 0 : 1;
  return c;
}

/// Per-channel mean and standard deviation over every image of every scene.
inline std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const std::vector<SequenceSample>& scenes) {
  std::array<double, 3> sum{}, sq{};
  double n = 0;
  for (const auto& s : scenes)
    for (const auto& img : s.images) {
      const auto HW = img.dim(1) * img.dim(2);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const double v = img[c * HW + i];
          sum[c] += v;
          sq[c] += v * v;
        }
      n += static_cast<double>(HW);
    }
  if (n == 0) throw ConfigError("channel_stats: no images");
  std::array<double, 3> mean{}, sd{};
  for (std::size_t c = 0; c < 3; ++c) {
    mean[c] = sum[c] / n;
    sd[c] = std::sqrt(std::max(sq[c] / n - mean[c] * mean[c], 1e-12));
  }
  return {mean, sd};
}

}  // namespace stseg
