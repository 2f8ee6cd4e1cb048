#pragma once

// The stseg command line: synth, train, predict, eval, gradcheck.
// Exit codes: 0 success, 1 user error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "stseg/gradcheck.hpp"
#include "stseg/train.hpp"

#ifndef STSEG_BUILD_ID
#define STSEG_BUILD_ID "unknown"
#endif

namespace stseg {

enum ExitCode : int { kExitOk = 0, kExitUser = 1, kExitNumeric = 2 };

namespace cli {

namespace fs = std::filesystem;

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Applies STSEG_THREADS to Eigen and OpenMP. Unset leaves the defaults.
inline void apply_thread_env() {
  const char* env = std::getenv("STSEG_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end || n < 1 || n > 4096) throw ConfigError(std::string("STSEG_THREADS must be a positive integer, got '") + env + "'");
  Eigen::setNbThreads(static_cast<int>(n));
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

inline std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    const auto h = std::stoul(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const auto rest = s.substr(x + 1);
    const auto w = std::stoul(rest, &used);
    if (used != rest.size() || h == 0 || w == 0) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw ConfigError("--size must look like HxW, got '" + s + "'");
  }
}

/// Exclusive claim on a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw IoError("run directory " + dir.string() + " is locked by another process (" + path_.string() + ")");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

struct Manifest {
  ojson record;

  Manifest(const std::string& command, const std::vector<std::string>& argv) {
    record["command"] = command;
    record["argv"] = argv;
    record["build_id"] = STSEG_BUILD_ID;
    record["started"] = utc_now();
  }

  void append_to(const fs::path& dir) {
    record["finished"] = utc_now();
    std::ofstream out(dir / "manifest.jsonl", std::ios::app);
    out << record.dump() << '\n';
    if (!out) throw IoError("cannot append to " + (dir / "manifest.jsonl").string());
  }
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out, size = "256x256", preset = "default";
  std::size_t scenes = 8, seq = 3;
  std::optional<std::size_t> val, test;
  std::uint64_t seed = 0;
  int road_radius = 3;
  bool force = false;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const fs::path root(a.out);
  if (fs::exists(root) && !(fs::is_directory(root) && fs::is_empty(root))) {
    if (!a.force) throw ConfigError(root.string() + " already exists (use --force to overwrite)");
    fs::remove_all(root);
  }
  SynthDatasetConfig cfg;
  cfg.scenes = a.scenes;
  cfg.val = a.val;
  cfg.test = a.test;
  std::tie(cfg.height, cfg.width) = parse_size(a.size);
  cfg.length = a.seq;
  cfg.seed = a.seed;
  cfg.preset = a.preset;
  cfg.road_radius = a.road_radius;
  if (a.scenes == 0) throw ConfigError("--scenes must be >= 1");
  if (a.seq == 0) throw ConfigError("--seq must be >= 1");
  const auto counts = synth_dataset(root, cfg);
  out << ojson{{"scenes", a.scenes}, {"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}, {"out", root.string()}}.dump()
      << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string stage, data, run_dir, schedule, fcn_ckpt, config;
  double alpha = 0.7;
  std::uint64_t seed = 0;
  std::size_t batch_size = 0, batches_per_epoch = 0, patch = 0;
  // which optional flags were given
  bool has_alpha = false, has_schedule = false, has_seed = false, has_batch_size = false, has_batches = false,
       has_patch = false;
};

inline TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw IoError("config file " + a.config + " not found");
    apply_json(cfg, read_json(a.config));
  }
  cfg.stage = parse_stage(a.stage);
  if (a.has_alpha) cfg.loss.alpha = a.alpha;
  if (a.has_schedule) cfg.schedule = LrSchedule::parse(a.schedule);
  if (a.has_seed) cfg.seed = a.seed;
  if (a.has_batch_size) cfg.batch_size = a.batch_size;
  if (a.has_batches) cfg.batches_per_epoch = a.batches_per_epoch;
  if (a.has_patch) cfg.patch = a.patch;
  validate(cfg);
  return cfg;
}

inline std::vector<SequenceSample> require_split(const fs::path& data, const std::string& split) {
  if (!fs::is_directory(data / split)) throw IoError("dataset " + data.string() + " has no " + split + "/ directory");
  auto scenes = load_split(data, split);
  if (scenes.empty()) throw ConfigError("dataset " + data.string() + " has no " + split + " scenes");
  return scenes;
}

inline int cmd_train(const TrainArgs& a, Manifest& manifest, std::ostream& out) {
  const auto cfg = resolve_train_config(a);
  const fs::path data(a.data), run(a.run_dir);
  if (!fs::is_directory(data)) throw IoError("dataset directory " + data.string() + " not found");
  if (cfg.stage == Stage::rnn && a.fcn_ckpt.empty()) throw ConfigError("--stage rnn requires --fcn-ckpt");
  if (!a.fcn_ckpt.empty() && !fs::exists(a.fcn_ckpt)) throw IoError("--fcn-ckpt " + a.fcn_ckpt + " not found");

  RunLock lock(run);
  manifest.record["config"] = to_json(cfg);
  manifest.record["seed"] = cfg.seed;
  manifest.record["inputs"] = {{"data", data.string()}};
  const RunSink sink{run, &out};

  if (cfg.stage == Stage::fcn) {
    const auto train = require_split(data, "train"), val = require_split(data, "val");
    const auto res = train_fcn(train, val, cfg, sink);
    manifest.record["outputs"] = {{"best", (run / "fcn_best.sttc").string()},
                                  {"last", (run / "fcn_last.sttc").string()},
                                  {"log", (run / "log.jsonl").string()},
                                  {"best_epoch", res.best_epoch}};
    return kExitOk;
  }

  UNetConfig ucfg;
  auto fcn = load_fcn<float>(a.fcn_ckpt, &ucfg);
  if (cfg.rnn.input_channels != ucfg.num_classes)
    throw ConfigError("rnn input_channels (" + std::to_string(cfg.rnn.input_channels) + ") must equal the FCN class count (" +
                      std::to_string(ucfg.num_classes) + ")");
  const auto fcn_hash = file_hash(a.fcn_ckpt);
  const auto cache = run / "cache";
  generate_pmap_sequences(fcn, ucfg, data, cache, cfg.eval_tiles);
  const auto train = load_pmap_cache(cache, data, "train"), val = load_pmap_cache(cache, data, "val");
  if (train.empty() || val.empty()) throw ConfigError("dataset needs at least one train and one val scene");
  const ojson prov{{"fcn_checkpoint", a.fcn_ckpt}, {"fcn_hash", fcn_hash}};
  const auto res = train_rnn(train, val, cfg, sink, nullptr, prov);
  if (file_hash(a.fcn_ckpt) != fcn_hash) throw Error("FCN checkpoint changed during RNN training");
  manifest.record["inputs"]["fcn_checkpoint"] = a.fcn_ckpt;
  manifest.record["outputs"] = {{"best", (run / "rnn_best.sttc").string()},
                                {"last", (run / "rnn_last.sttc").string()},
                                {"cache", cache.string()},
                                {"log", (run / "log.jsonl").string()},
                                {"best_epoch", res.best_epoch}};
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string ckpt_fcn, ckpt_rnn, out;
  std::vector<std::string> images;
  std::size_t tile = 2048, overlap = 512;
};

inline int cmd_predict(const PredictArgs& a, Manifest& manifest, std::ostream& out) {
  if (a.images.empty()) throw ConfigError("--images needs at least one PNG");
  if (a.ckpt_rnn.empty() && a.images.size() != 1)
    throw ConfigError("FCN-only prediction takes exactly one image; pass --ckpt-rnn for a sequence");
  const TileOptions tiles{a.tile, a.overlap};
  std::vector<Tensor<float>> imgs;
  for (const auto& p : a.images) {
    if (!fs::exists(p)) throw IoError("image " + p + " not found");
    imgs.push_back(load_rgb_png(p));
    if (imgs.back().shape() != imgs.front().shape())
      throw ShapeError("image " + p + " is " + std::to_string(imgs.back().dim(1)) + "x" + std::to_string(imgs.back().dim(2)) +
                       ", expected " + std::to_string(imgs.front().dim(1)) + "x" + std::to_string(imgs.front().dim(2)));
  }

  UNetConfig ucfg;
  auto fcn = load_fcn<float>(a.ckpt_fcn, &ucfg);
  std::vector<Tensor<float>> pmaps;
  std::vector<Mask> dated;
  for (const auto& img : imgs) {
    pmaps.push_back(fcn_pmap(img, fcn, ucfg, tiles));
    dated.push_back(threshold(pmaps.back()));
  }
  Tensor<float> result = pmaps.front();
  if (!a.ckpt_rnn.empty()) {
    ConvLstmConfig rcfg;
    auto rnn = load_rnn<float>(a.ckpt_rnn, &rcfg);
    if (rcfg.input_channels != ucfg.num_classes) throw ConfigError("RNN checkpoint does not match the FCN class count");
    result = fused_pmap(pmaps, rnn, rcfg, tiles);
  }
  if (!result.all_finite()) throw NumericError("prediction contains non-finite values");

  const fs::path dir(a.out);
  RunLock lock(dir);
  write_atomically(dir / "pmap.stt", [&](std::ostream& os) { write_stt(os, result); });
  const auto mask = threshold(result);
  save_mask_png(dir / "mask.png", mask);
  ojson outputs{{"pmap", (dir / "pmap.stt").string()}, {"mask", (dir / "mask.png").string()}};
  if (dated.size() > 1) {
    write_png(dir / "composite.png", disagreement_composite(dated));
    outputs["composite"] = (dir / "composite.png").string();
  }
  manifest.record["inputs"] = {{"images", a.images}, {"ckpt_fcn", a.ckpt_fcn}, {"ckpt_rnn", a.ckpt_rnn}};
  manifest.record["config"] = {{"tile", a.tile}, {"overlap", a.overlap}};
  manifest.record["outputs"] = outputs;
  ojson report{{"height", mask.height}, {"width", mask.width}, {"dates", imgs.size()}, {"fused", !a.ckpt_rnn.empty()},
               {"road_fraction", static_cast<double>(mask.count()) / static_cast<double>(mask.px.size())}};
  if (dated.size() > 1) report["date_disagreement"] = disagreement_rate(dated);
  out << report.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int cmd_eval(const std::string& pred, const std::string& truth, std::ostream& out) {
  for (const auto& p : {pred, truth})
    if (!fs::exists(p)) throw IoError(p + " not found");
  const auto a = load_mask_png(pred), b = load_mask_png(truth);
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("extent mismatch: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  const auto pa = mask_classes(a), pb = mask_classes(b);
  out << ojson{{"accuracy", pixel_accuracy(pa, pb)}, {"iou", class_iou(pa, pb, 0)}}.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int cmd_gradcheck(const std::string& module, const std::string& dtype, const std::vector<std::string>& faults,
                         std::ostream& out, std::ostream& err) {
  if (dtype != "f64") throw ConfigError("gradcheck runs in f64 only (got --dtype " + dtype + ")");
  struct Restore {
    std::set<std::string> saved = injected_faults();
    ~Restore() { injected_faults() = saved; }
  } restore;
  for (const auto& f : faults) injected_faults().insert(f);

  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck(module);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-7s %-18s rel_err=%.3e tol=%.0e probed=%zu %s", r.module.c_str(), r.op.c_str(),
                  r.rel_err, r.tolerance, r.probed, r.passed() ? "PASS" : "FAIL");
    out << line << '\n';
    if (!r.passed()) failed.push_back(r.op);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << results.size() - failed.size() << '/' << results.size() << " checks passed in " << std::fixed
      << std::setprecision(1) << secs << " s" << std::defaultfloat << '\n';
  if (failed.empty()) return kExitOk;
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
  err << "gradcheck failed: " << names << '\n';
  return kExitNumeric;
}

}  // namespace cli

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli;
  CLI::App app{"Road segmentation from satellite image time series (U-Net + ConvLSTM)", "stseg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-date road dataset");
  synth->add_option("--out", sa.out, "Dataset root")->required();
  synth->add_option("--scenes", sa.scenes, "Number of scenes over all splits")->capture_default_str();
  synth->add_option("--size", sa.size, "Scene extent HxW")->capture_default_str();
  synth->add_option("--seq", sa.seq, "Dates per scene")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Master seed")->capture_default_str();
  synth->add_option("--jitter-preset", sa.preset, "Radiometric jitter: default, none, mild, strong")->capture_default_str();
  synth->add_option("--road-radius", sa.road_radius, "Dilation radius of the road raster (px)")->capture_default_str();
  synth->add_option("--val", sa.val, "Validation scenes (default N/8)");
  synth->add_option("--test", sa.test, "Test scenes (default N/8)");
  synth->add_flag("--force", sa.force, "Replace an existing output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the FCN or the ConvLSTM fusion stage");
  train->add_option("--stage", ta.stage, "fcn or rnn")->required()->check(CLI::IsMember({"fcn", "rnn"}));
  train->add_option("--data", ta.data, "Dataset root")->required();
  train->add_option("--run-dir", ta.run_dir, "Output directory for checkpoints and logs")->required();
  auto* o_alpha = train->add_option("--alpha", ta.alpha, "Cross-entropy weight in the joint loss");
  auto* o_sched = train->add_option("--schedule", ta.schedule, "Learning-rate stages, e.g. 10:0.1,10:0.01,10:0.001");
  auto* o_seed = train->add_option("--seed", ta.seed, "Training seed");
  auto* o_bs = train->add_option("--batch-size", ta.batch_size, "Samples per mini-batch");
  auto* o_bpe = train->add_option("--batches-per-epoch", ta.batches_per_epoch, "Mini-batches per epoch");
  auto* o_patch = train->add_option("--patch", ta.patch, "Square training crop (0 = whole scene)");
  train->add_option("--fcn-ckpt", ta.fcn_ckpt, "Frozen FCN checkpoint (rnn stage)");
  train->add_option("--config", ta.config, "JSON config; flags take precedence");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Predict a road map from one image or a date sequence");
  predict->add_option("--ckpt-fcn", pa.ckpt_fcn, "FCN checkpoint")->required();
  predict->add_option("--ckpt-rnn", pa.ckpt_rnn, "ConvLSTM checkpoint (enables fusion)");
  predict->add_option("--images", pa.images, "Comma-separated PNGs, one per date")->required()->delimiter(',');
  predict->add_option("--tile", pa.tile, "Tile size")->capture_default_str();
  predict->add_option("--overlap", pa.overlap, "Tile overlap")->capture_default_str();
  predict->add_option("--out", pa.out, "Output directory")->required();

  std::string pred, truth;
  auto* eval = app.add_subcommand("eval", "Pixel accuracy and road IoU of a predicted mask");
  eval->add_option("--pred", pred, "Predicted mask PNG")->required();
  eval->add_option("--truth", truth, "Reference mask PNG")->required();

  std::string module = "all", dtype = "f64";
  std::vector<std::string> faults;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  grad->add_option("--module", module, "all, tensor, nn, loss, unet or rnn")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "tensor", "nn", "loss", "unet", "rnn"}));
  grad->add_option("--dtype", dtype, "Arithmetic precision")->capture_default_str();
  grad->add_option("--inject-fault", faults, "Corrupt the backward pass of an op (harness self-test)")
      ->group("Testing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  std::vector<std::string> args(argv, argv + argc);
  std::optional<Manifest> manifest;
  std::filesystem::path run_dir;
  auto finish = [&](int rc, const std::string& error) {
    if (!manifest || run_dir.empty() || !std::filesystem::is_directory(run_dir)) return rc;
    manifest->record["exit_code"] = rc;
    if (!error.empty()) manifest->record["error"] = error;
    try {
      manifest->append_to(run_dir);
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return rc == kExitOk ? static_cast<int>(kExitUser) : rc;
    }
    return rc;
  };
  try {
    apply_thread_env();
    if (*synth) return cmd_synth(sa, out);
    if (*eval) return cmd_eval(pred, truth, out);
    if (*grad) return cmd_gradcheck(module, dtype, faults, out, err);
    if (*train) {
      ta.has_alpha = o_alpha->count() > 0;
      ta.has_schedule = o_sched->count() > 0;
      ta.has_seed = o_seed->count() > 0;
      ta.has_batch_size = o_bs->count() > 0;
      ta.has_batches = o_bpe->count() > 0;
      ta.has_patch = o_patch->count() > 0;
      manifest.emplace("train", args);
      run_dir = ta.run_dir;
      return finish(cmd_train(ta, *manifest, out), "");
    }
    manifest.emplace("predict", args);
    run_dir = pa.out;
    return finish(cmd_predict(pa, *manifest, out), "");
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return finish(kExitNumeric, e.what());
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return finish(kExitUser, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return finish(kExitUser, e.what());
  }
}

}  // namespace stseg
