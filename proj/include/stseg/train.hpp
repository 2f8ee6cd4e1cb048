#pragma once

// Two-stage training: the FCN on single dated images, then the ConvLSTM head
// on PMap sequences produced by the frozen FCN.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "stseg/augment.hpp"
#include "stseg/inference.hpp"
#include "stseg/losses.hpp"
#include "stseg/optim.hpp"

namespace stseg {

using ojson = nlohmann::ordered_json;

enum class Stage { fcn, rnn };

inline Stage parse_stage(const std::string& s) {
  if (s == "fcn") return Stage::fcn;
  if (s == "rnn") return Stage::rnn;
  throw ConfigError("unknown stage '" + s + "' (fcn or rnn)");
}
inline const char* stage_name(Stage s) { return s == Stage::fcn ? "fcn" : "rnn"; }

struct TrainConfig {
  Stage stage = Stage::fcn;
  LrSchedule schedule;
  std::size_t batches_per_epoch = 8;
  std::size_t batch_size = 4;
  std::size_t patch = 0;  // square training crop; 0 = whole scene
  std::uint64_t seed = 0;
  LossConfig loss;
  std::string cross_entropy = "auto";  // categorical | binary | auto (binary for the sigmoid rnn head)
  std::size_t sequence_length = 3;
  bool augment = true;
  double clip_norm = 5.0;  // rnn stage only
  AdamConfig adam;
  UNetConfig unet;
  ConvLstmConfig rnn;
  TileOptions eval_tiles;
};

// ---------------------------------------------------------------------------
// JSON

inline ojson to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels}, {"base_filters", c.base_filters}, {"depth", c.depth},
          {"num_classes", c.num_classes}, {"decoder_convs", c.decoder_convs}};
}

inline ojson to_json(const ConvLstmConfig& c) {
  return {{"input_channels", c.input_channels},
          {"hidden", c.hidden},
          {"kernel", c.kernel},
          {"layers", c.layers},
          {"out_channels", c.out_channels},
          {"peephole", c.peephole == Peephole::per_channel ? "per-channel" : "per-element"},
          {"peephole_height", c.peephole_height},
          {"peephole_width", c.peephole_width},
          {"output_peephole", c.output_peephole == OutputPeephole::previous_cell ? "previous" : "current"},
          {"project_between_layers", c.project_between_layers}};
}

inline ojson to_json(const TrainConfig& c) {
  return {{"stage", stage_name(c.stage)},
          {"schedule", c.schedule.str()},
          {"batches_per_epoch", c.batches_per_epoch},
          {"batch_size", c.batch_size},
          {"patch", c.patch},
          {"seed", c.seed},
          {"alpha", c.loss.alpha},
          {"epsilon", c.loss.epsilon},
          {"cross_entropy", c.cross_entropy},
          {"sequence_length", c.sequence_length},
          {"augment", c.augment},
          {"clip_norm", c.clip_norm},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
          {"unet", to_json(c.unet)},
          {"rnn", to_json(c.rnn)},
          {"eval_tile", c.eval_tiles.tile},
          {"eval_overlap", c.eval_tiles.overlap}};
}

namespace detail {

template <class F>
void with_keys(const nlohmann::json& j, const std::string& what, F&& apply) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (!apply(key, value)) throw ConfigError(what + ": unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(what + ": bad value for '" + key + "': " + e.what());
    }
  }
}

}  // namespace detail

inline void apply_json(UNetConfig& c, const nlohmann::json& j) {
  detail::with_keys(j, "unet", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "in_channels") c.in_channels = v.get<std::size_t>();
    else if (k == "base_filters") c.base_filters = v.get<std::size_t>();
    else if (k == "depth") c.depth = v.get<std::size_t>();
    else if (k == "num_classes") c.num_classes = v.get<std::size_t>();
    else if (k == "decoder_convs") c.decoder_convs = v.get<std::size_t>();
    else return false;
    return true;
  });
  c.validate();
}

inline void apply_json(ConvLstmConfig& c, const nlohmann::json& j) {
  detail::with_keys(j, "rnn", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "input_channels") c.input_channels = v.get<std::size_t>();
    else if (k == "hidden") c.hidden = v.get<std::size_t>();
    else if (k == "kernel") c.kernel = v.get<std::size_t>();
    else if (k == "layers") c.layers = v.get<std::size_t>();
    else if (k == "out_channels") c.out_channels = v.get<std::size_t>();
    else if (k == "peephole_height") c.peephole_height = v.get<std::size_t>();
    else if (k == "peephole_width") c.peephole_width = v.get<std::size_t>();
    else if (k == "project_between_layers") c.project_between_layers = v.get<bool>();
    else if (k == "peephole") {
      const auto s = v.get<std::string>();
      if (s == "per-channel") c.peephole = Peephole::per_channel;
      else if (s == "per-element") c.peephole = Peephole::per_element;
      else throw ConfigError("rnn: peephole must be per-channel or per-element");
    } else if (k == "output_peephole") {
      const auto s = v.get<std::string>();
      if (s == "previous") c.output_peephole = OutputPeephole::previous_cell;
      else if (s == "current") c.output_peephole = OutputPeephole::current_cell;
      else throw ConfigError("rnn: output_peephole must be previous or current");
    } else return false;
    return true;
  });
  c.validate();
}

inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  detail::with_keys(j, "config", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "stage") c.stage = parse_stage(v.get<std::string>());
    else if (k == "schedule") c.schedule = LrSchedule::parse(v.get<std::string>());
    else if (k == "batches_per_epoch") c.batches_per_epoch = v.get<std::size_t>();
    else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "patch") c.patch = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "alpha") c.loss.alpha = v.get<double>();
    else if (k == "epsilon") c.loss.epsilon = v.get<double>();
    else if (k == "cross_entropy") c.cross_entropy = v.get<std::string>();
    else if (k == "sequence_length") c.sequence_length = v.get<std::size_t>();
    else if (k == "augment") c.augment = v.get<bool>();
    else if (k == "clip_norm") c.clip_norm = v.get<double>();
    else if (k == "eval_tile") c.eval_tiles.tile = v.get<std::size_t>();
    else if (k == "eval_overlap") c.eval_tiles.overlap = v.get<std::size_t>();
    else if (k == "unet") apply_json(c.unet, v);
    else if (k == "rnn") apply_json(c.rnn, v);
    else if (k == "adam") {
      detail::with_keys(v, "adam", [&](const std::string& a, const nlohmann::json& x) {
        if (a == "beta1") c.adam.beta1 = x.get<double>();
        else if (a == "beta2") c.adam.beta2 = x.get<double>();
        else if (a == "epsilon") c.adam.epsilon = x.get<double>();
        else return false;
        return true;
      });
    } else return false;
    return true;
  });
}

inline void validate(const TrainConfig& c) {
  c.loss.validate();
  if (c.cross_entropy != "auto" && c.cross_entropy != "categorical" && c.cross_entropy != "binary")
    throw ConfigError("cross_entropy must be auto, categorical or binary");
  c.unet.validate();
  c.rnn.validate();
  if (c.batches_per_epoch == 0 || c.batch_size == 0) throw ConfigError("batches per epoch and batch size must be >= 1");
  if (c.sequence_length == 0) throw ConfigError("sequence length must be >= 1");
  if (c.clip_norm <= 0) throw ConfigError("clip norm must be positive");
}

/// FNV-1a over the canonical JSON dump.
inline std::string config_hash(const ojson& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Metrics, logs, checkpoints

struct EpochMetrics {
  int epoch = 0;
  double lr = 0, loss = 0, H = 0, J = 0, acc_train = 0, acc_val = 0;

  ojson json() const {
    return {{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"H", H}, {"J", J}, {"acc_train", acc_train}, {"acc_val", acc_val}};
  }
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double best_acc_val = -1;
};

/// Where a run writes. An empty dir keeps everything in memory.
struct RunSink {
  std::filesystem::path dir;
  std::ostream* echo = nullptr;

  void begin() const {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "log.jsonl", std::ios::trunc);
  }

  void log(const EpochMetrics& m) const {
    const auto line = m.json().dump();
    if (echo) *echo << line << std::endl;
    if (dir.empty()) return;
    std::ofstream out(dir / "log.jsonl", std::ios::app);
    out << line << '\n';
    if (!out) throw IoError("cannot append to " + (dir / "log.jsonl").string());
  }
};

inline std::filesystem::path sidecar_path(std::filesystem::path ckpt) { return ckpt.replace_extension(".json"); }

template <Real T>
void save_model(const std::filesystem::path& path, const ParamStore<T>& store, Stage kind, const TrainConfig& cfg,
                const EpochMetrics& m, const ojson& extra = ojson::object()) {
  save_checkpoint(path, store);
  const auto train = to_json(cfg);
  ojson side{{"kind", stage_name(kind)},
             {"model", kind == Stage::fcn ? to_json(cfg.unet) : to_json(cfg.rnn)},
             {"config_hash", config_hash(train)},
             {"epoch", m.epoch},
             {"metrics", m.json()},
             {"train_config", train}};
  for (const auto& [k, v] : extra.items()) side[k] = v;
  write_atomically(sidecar_path(path), [&](std::ostream& os) { os << side.dump(2) << '\n'; });
}

struct ModelInfo {
  Stage kind = Stage::fcn;
  UNetConfig unet;
  ConvLstmConfig rnn;
  nlohmann::json sidecar;
};

inline ModelInfo read_model_info(const std::filesystem::path& ckpt) {
  const auto side = sidecar_path(ckpt);
  if (!std::filesystem::exists(side)) throw IoError("checkpoint sidecar " + side.string() + " not found");
  ModelInfo info;
  info.sidecar = read_json(side);
  try {
    info.kind = parse_stage(info.sidecar.at("kind").get<std::string>());
    if (info.kind == Stage::fcn) apply_json(info.unet, info.sidecar.at("model"));
    else apply_json(info.rnn, info.sidecar.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side.string() + ": " + e.what());
  }
  return info;
}

template <Real T>
ParamStore<T> load_fcn(const std::filesystem::path& ckpt, UNetConfig* cfg_out = nullptr) {
  const auto info = read_model_info(ckpt);
  if (info.kind != Stage::fcn) throw ConfigError(ckpt.string() + " is not an FCN checkpoint");
  auto store = unet_init<T>(info.unet, 0);
  load_checkpoint(ckpt, store);
  if (cfg_out) *cfg_out = info.unet;
  return store;
}

template <Real T>
ParamStore<T> load_rnn(const std::filesystem::path& ckpt, ConvLstmConfig* cfg_out = nullptr) {
  const auto info = read_model_info(ckpt);
  if (info.kind != Stage::rnn) throw ConfigError(ckpt.string() + " is not an RNN checkpoint");
  auto store = convlstm_init<T>(info.rnn, 0);
  load_checkpoint(ckpt, store);
  if (cfg_out) *cfg_out = info.rnn;
  return store;
}

inline std::string file_hash(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount())
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<Tensor<float>> x;  // one [B,C,p,p] per time step (a single one for the FCN)
  Tensor<float> target;          // one-hot [B,2,p,p]
};

namespace detail {

struct CropPick {
  std::size_t scene, r0, c0, h, w;
  int op;
};

template <class Scenes>
CropPick pick_crop(const Scenes& scenes, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto k = std::uniform_int_distribution<std::size_t>(0, scenes.size() - 1)(rng);
  const auto H = scenes[k].label.height, W = scenes[k].label.width;
  const auto ph = cfg.patch ? cfg.patch : H, pw = cfg.patch ? cfg.patch : W;
  if (ph > H || pw > W) throw ShapeError("training patch is larger than a scene");
  const auto r0 = std::uniform_int_distribution<std::size_t>(0, H - ph)(rng);
  const auto c0 = std::uniform_int_distribution<std::size_t>(0, W - pw)(rng);
  int op = 0;
  if (cfg.augment) {
    op = std::uniform_int_distribution<int>(0, kDihedralOps - 1)(rng);
    if (ph != pw && op % 2) op ^= 1;  // no quarter turns on rectangles
  }
  return {k, r0, c0, ph, pw, op};
}

inline void put(Tensor<float>& dst, std::size_t b, const Tensor<float>& src) {
  std::copy(src.storage().begin(), src.storage().end(), dst.storage().begin() + b * src.size());
}

inline Tensor<float> one_hot_mask(const Mask& m) {
  Tensor<float> t(Shape{2, m.height, m.width}, 0.f);
  const auto HW = m.height * m.width;
  for (std::size_t i = 0; i < HW; ++i) t[(m.px[i] ? 0 : 1) * HW + i] = 1.f;
  return t;
}

}  // namespace detail

/// B random (scene, date, crop, dihedral op) draws of single images.
inline Batch draw_fcn_batch(const std::vector<SequenceSample>& scenes, const TrainConfig& cfg, std::mt19937_64& rng) {
  Batch batch;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const auto p = detail::pick_crop(scenes, cfg, rng);
    const auto& s = scenes[p.scene];
    const auto t = std::uniform_int_distribution<std::size_t>(0, s.length() - 1)(rng);
    const auto img = augment(crop(s.images[t], p.r0, p.c0, p.h, p.w), p.op);
    const auto lab = augment(crop(s.label, p.r0, p.c0, p.h, p.w), p.op);
    if (b == 0) {
      batch.x.emplace_back(Shape{cfg.batch_size, img.dim(0), img.dim(1), img.dim(2)});
      batch.target = Tensor<float>(Shape{cfg.batch_size, 2, lab.height, lab.width});
    }
    detail::put(batch.x[0], b, img);
    detail::put(batch.target, b, detail::one_hot_mask(lab));
  }
  return batch;
}

/// PMaps of every date of one scene, with its label.
struct PmapScene {
  std::string id;
  std::vector<Tensor<float>> pmaps;  // T x [2,H,W]
  Mask label;
};

inline Batch draw_rnn_batch(const std::vector<PmapScene>& scenes, const TrainConfig& cfg, std::mt19937_64& rng) {
  Batch batch;
  const auto T = cfg.sequence_length;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const auto p = detail::pick_crop(scenes, cfg, rng);
    const auto& s = scenes[p.scene];
    if (s.pmaps.size() < T)
      throw ConfigError("scene " + s.id + " has " + std::to_string(s.pmaps.size()) + " dates, sequence length is " +
                        std::to_string(T));
    const auto lab = augment(crop(s.label, p.r0, p.c0, p.h, p.w), p.op);
    if (b == 0) {
      for (std::size_t t = 0; t < T; ++t) batch.x.emplace_back(Shape{cfg.batch_size, 2, lab.height, lab.width});
      batch.target = Tensor<float>(Shape{cfg.batch_size, 2, lab.height, lab.width});
    }
    for (std::size_t t = 0; t < T; ++t) detail::put(batch.x[t], b, augment(crop(s.pmaps[t], p.r0, p.c0, p.h, p.w), p.op));
    detail::put(batch.target, b, detail::one_hot_mask(lab));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Pooled pixel accuracy of the FCN over every date of every scene.
inline double evaluate_fcn(const std::vector<SequenceSample>& scenes, ParamStore<float>& fcn, const UNetConfig& cfg,
                           const TileOptions& tiles) {
  double acc = 0;
  std::size_t n = 0;
  for (const auto& s : scenes)
    for (const auto& img : s.images) {
      acc += mask_accuracy(threshold(fcn_pmap(img, fcn, cfg, tiles)), s.label);
      ++n;
    }
  return n ? acc / static_cast<double>(n) : 0.0;
}

inline double evaluate_rnn(const std::vector<PmapScene>& scenes, ParamStore<float>& rnn, const ConvLstmConfig& cfg,
                           std::size_t T, const TileOptions& tiles) {
  double acc = 0;
  for (const auto& s : scenes) {
    const std::vector<Tensor<float>> seq(s.pmaps.begin(), s.pmaps.begin() + std::min(T, s.pmaps.size()));
    acc += mask_accuracy(threshold(fused_pmap(seq, rnn, cfg, tiles)), s.label);
  }
  return scenes.empty() ? 0.0 : acc / static_cast<double>(scenes.size());
}

inline std::vector<PmapScene> pmap_scenes(const std::vector<SequenceSample>& scenes, ParamStore<float>& fcn,
                                          const UNetConfig& cfg, const TileOptions& tiles,
                                          const std::vector<std::string>& ids = {}) {
  std::vector<PmapScene> out;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    PmapScene p{k < ids.size() ? ids[k] : scene_name(k), {}, scenes[k].label};
    for (const auto& img : scenes[k].images) p.pmaps.push_back(fcn_pmap(img, fcn, cfg, tiles));
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

namespace detail {

template <class Step, class Eval, class Save>
TrainResult run_schedule(const TrainConfig& cfg, const RunSink& sink, Step&& step, Eval&& evaluate, Save&& save) {
  TrainResult res;
  sink.begin();
  for (int epoch = 1; epoch <= cfg.schedule.total_epochs(); ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cfg.schedule.lr(epoch);
    for (std::size_t b = 0; b < cfg.batches_per_epoch; ++b) {
      const auto [loss, H, J, acc] = step(m.lr);
      if (!std::isfinite(loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      m.loss += loss;
      m.H += H;
      m.J += J;
      m.acc_train += acc;
    }
    const double nb = static_cast<double>(cfg.batches_per_epoch);
    m.loss /= nb;
    m.H /= nb;
    m.J /= nb;
    m.acc_train /= nb;
    m.acc_val = evaluate();
    sink.log(m);
    res.epochs.push_back(m);
    const bool best = m.acc_val > res.best_acc_val;
    if (best) {
      res.best_acc_val = m.acc_val;
      res.best_epoch = epoch;
    }
    save(m, best);
  }
  return res;
}

inline LossConfig stage_loss(const TrainConfig& c, Stage stage) {
  auto l = c.loss;
  l.binary = c.cross_entropy == "binary" || (c.cross_entropy == "auto" && stage == Stage::rnn);
  return l;
}

struct StepStats {
  double loss, H, J, acc;
};

inline StepStats optimise(ParamStore<float>& store, AdamState<float>& adam, const Var<float>& pred,
                          const Tensor<float>& target, const LossConfig& loss_cfg, double lr,
                          std::optional<double> clip) {
  const auto probs = pred.value();
  auto terms = joint_loss(pred, target, loss_cfg);
  const double loss = terms.loss.value().item();
  if (std::isfinite(loss)) {
    backward(terms.loss);
    if (clip) clip_grad_norm(store, *clip);
    adam_step(store, adam, lr);
  }
  const auto truth = classify(target);
  return {loss, terms.cross_entropy, terms.iou, pixel_accuracy(classify(probs), truth)};
}

}  // namespace detail

/// Trains a fresh FCN. Input normalisation comes from the training images.
inline TrainResult train_fcn(const std::vector<SequenceSample>& train, const std::vector<SequenceSample>& val,
                             const TrainConfig& cfg, const RunSink& sink, ParamStore<float>* out = nullptr) {
  validate(cfg);
  if (train.empty() || val.empty()) throw ConfigError("training needs at least one train and one val scene");
  const auto p = cfg.patch ? cfg.patch : std::min(train[0].height(), train[0].width());
  if (p % cfg.unet.divisor())
    throw ShapeError("training patch " + std::to_string(p) + " is not divisible by 2^depth = " +
                     std::to_string(cfg.unet.divisor()));

  auto fcn = unet_init<float>(cfg.unet, cfg.seed);
  const auto [mean, sd] = channel_stats(train);
  for (std::size_t c = 0; c < 3 && c < cfg.unet.in_channels; ++c) {
    fcn.buffer("input.mean")[c] = static_cast<float>(mean[c]);
    fcn.buffer("input.std")[c] = static_cast<float>(sd[c]);
  }
  AdamState<float> adam(fcn, cfg.adam);
  auto rng = detail::stream(cfg.seed, 77);

  auto res = detail::run_schedule(
      cfg, sink,
      [&](double lr) {
        const auto batch = draw_fcn_batch(train, cfg, rng);
        fcn.zero_grad();
        const auto pred = unet_forward(Var<float>(batch.x[0]), fcn, cfg.unet, Mode::train);
        const auto s = detail::optimise(fcn, adam, pred, batch.target, detail::stage_loss(cfg, Stage::fcn), lr, std::nullopt);
        return std::tuple{s.loss, s.H, s.J, s.acc};
      },
      [&] { return evaluate_fcn(val, fcn, cfg.unet, cfg.eval_tiles); },
      [&](const EpochMetrics& m, bool best) {
        if (sink.dir.empty()) {
          if (best && out) *out = fcn.cast<float>();
          return;
        }
        save_model(sink.dir / "fcn_last.sttc", fcn, Stage::fcn, cfg, m);
        if (best) save_model(sink.dir / "fcn_best.sttc", fcn, Stage::fcn, cfg, m);
      });
  if (out && !sink.dir.empty()) {
    *out = unet_init<float>(cfg.unet, 0);
    load_checkpoint(sink.dir / "fcn_best.sttc", *out);
  }
  return res;
}

/// Trains a fresh ConvLSTM head on PMap sequences of a frozen FCN.
inline TrainResult train_rnn(const std::vector<PmapScene>& train, const std::vector<PmapScene>& val,
                             const TrainConfig& cfg, const RunSink& sink, ParamStore<float>* out = nullptr,
                             const ojson& provenance = ojson::object()) {
  validate(cfg);
  if (train.empty() || val.empty()) throw ConfigError("training needs at least one train and one val scene");
  if (cfg.rnn.input_channels != train[0].pmaps.at(0).dim(0))
    throw ConfigError("rnn input_channels does not match the PMap channel count");
  auto rnn = convlstm_init<float>(cfg.rnn, cfg.seed);
  AdamState<float> adam(rnn, cfg.adam);
  auto rng = detail::stream(cfg.seed, 78);

  auto res = detail::run_schedule(
      cfg, sink,
      [&](double lr) {
        const auto batch = draw_rnn_batch(train, cfg, rng);
        rnn.zero_grad();
        std::vector<Var<float>> seq;
        for (const auto& x : batch.x) seq.emplace_back(x);
        const auto pred = temporal_forward(seq, rnn, cfg.rnn);
        const auto s = detail::optimise(rnn, adam, pred, batch.target, detail::stage_loss(cfg, Stage::rnn), lr, cfg.clip_norm);
        return std::tuple{s.loss, s.H, s.J, s.acc};
      },
      [&] { return evaluate_rnn(val, rnn, cfg.rnn, cfg.sequence_length, cfg.eval_tiles); },
      [&](const EpochMetrics& m, bool best) {
        if (sink.dir.empty()) {
          if (best && out) *out = rnn.cast<float>();
          return;
        }
        save_model(sink.dir / "rnn_last.sttc", rnn, Stage::rnn, cfg, m, provenance);
        if (best) save_model(sink.dir / "rnn_best.sttc", rnn, Stage::rnn, cfg, m, provenance);
      });
  if (out && !sink.dir.empty()) {
    *out = convlstm_init<float>(cfg.rnn, 0);
    load_checkpoint(sink.dir / "rnn_best.sttc", *out);
  }
  return res;
}

// ---------------------------------------------------------------------------
// PMap cache: <cache>/<split>/<scene_id>/pmap_t{i}.stt, each [2,H,W] float32

inline void write_pmap_cache(const std::filesystem::path& cache, const std::string& split,
                             const std::vector<PmapScene>& scenes) {
  for (const auto& s : scenes) {
    const auto dir = cache / split / s.id;
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < s.pmaps.size(); ++t) {
      const auto path = dir / ("pmap_t" + std::to_string(t) + ".stt");
      write_atomically(path, [&](std::ostream& os) { write_stt(os, s.pmaps[t]); });
    }
  }
}

/// Runs the FCN over every scene of every split and caches the PMaps.
inline void generate_pmap_sequences(ParamStore<float>& fcn, const UNetConfig& cfg, const std::filesystem::path& data,
                                    const std::filesystem::path& cache, const TileOptions& tiles) {
  for (const char* split : kSplits) {
    std::vector<SequenceSample> scenes;
    std::vector<std::string> ids;
    for (const auto& ref : list_scenes(data, split)) {
      scenes.push_back(load_scene(ref.dir));
      ids.push_back(ref.id);
    }
    write_pmap_cache(cache, split, pmap_scenes(scenes, fcn, cfg, tiles, ids));
  }
}

/// Cached PMaps of one split, with labels from the dataset.
inline std::vector<PmapScene> load_pmap_cache(const std::filesystem::path& cache, const std::filesystem::path& data,
                                              const std::string& split) {
  std::vector<PmapScene> out;
  for (const auto& ref : list_scenes(data, split)) {
    const auto meta = read_json(ref.dir / "meta.json");
    const auto T = meta.at("dates").size();
    PmapScene p{ref.id, {}, load_mask_png(ref.dir / "label.png")};
    for (std::size_t t = 0; t < T; ++t) {
      const auto path = cache / split / ref.id / ("pmap_t" + std::to_string(t) + ".stt");
      if (!std::filesystem::exists(path)) throw IoError("PMap cache is incomplete: missing " + path.string());
      p.pmaps.push_back(load_stt<float>(path.string()));
      if (p.pmaps.back().ndim() != 3 || p.pmaps.back().dim(1) != p.label.height || p.pmaps.back().dim(2) != p.label.width)
        throw ShapeError(path.string() + " does not match the scene extent");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace stseg
