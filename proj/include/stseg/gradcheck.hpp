#pragma once

// Finite-difference verification of every differentiable op and of the two
// full networks, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "stseg/convlstm.hpp"
#include "stseg/losses.hpp"
#include "stseg/unet.hpp"

namespace stseg {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kCompositeTolerance = 1e-3;

struct GradCheckResult {
  std::string module, op;
  double rel_err = 0;
  double tolerance = kOpTolerance;
  std::size_t probed = 0;  // scalar inputs perturbed

  bool passed() const { return std::isfinite(rel_err) && rel_err < tolerance; }
};

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> m{"tensor", "nn", "loss", "unet", "rnn"};
  return m;
}

namespace gc {

using TD = Tensor<double>;
using VD = Var<double>;

/// Leaves plus a scalar objective over their current values.
struct Problem {
  std::vector<VD> leaves;
  std::function<VD()> objective;
  double step = 1e-5;
  // one error over all leaves together rather than the worst leaf
  bool pooled = false;
};

struct ErrAcc {
  double num = 0, na = 0, nb = 0;

  void add(const TD& a, const TD& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - b[i]) * (a[i] - b[i]);
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
  }
  double rel() const { return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12}); }
};

/// Worst relative error over all leaves, and the number of probed scalars.
inline std::pair<double, std::size_t> probe(Problem& p) {
  for (auto& l : p.leaves) l.zero_grad();
  backward(p.objective());
  double worst = 0;
  std::size_t n = 0;
  ErrAcc all;
  for (auto& leaf : p.leaves) {
    const TD analytic = leaf.grad();
    auto& x = leaf.mutable_value();
    TD numeric(x.shape());
    NoGradGuard ng;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + p.step;
      const double up = p.objective().value().item();
      x[i] = saved - p.step;
      const double down = p.objective().value().item();
      x[i] = saved;
      numeric[i] = (up - down) / (2 * p.step);
    }
    ErrAcc one;
    one.add(analytic, numeric);
    all.add(analytic, numeric);
    const double e = one.rel();
    if (!(e <= worst) && !std::isnan(worst)) worst = e;
    n += x.size();
  }
  return {p.pooled ? all.rel() : worst, n};
}

class Suite {
 public:
  Suite(std::string module, std::uint64_t seed) : module_(std::move(module)), rng_(seed) {}

  TD uniform(Shape s, double lo = -1, double hi = 1) {
    TD t(std::move(s));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.storage()) v = d(rng_);
    return t;
  }

  /// Values bounded away from zero, for ops with a kink there.
  TD off_zero(Shape s, double gap = 0.05) {
    auto t = uniform(std::move(s));
    for (auto& v : t.storage()) v = std::copysign(gap + std::abs(v), v);
    return t;
  }

  /// Distinct values at least 1/size apart, for max selection.
  TD spread(Shape s) {
    TD t(std::move(s));
    std::vector<std::size_t> perm(t.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng_);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 2.0 * static_cast<double>(perm[i]) / t.size() - 1.0;
    return t;
  }

  TD one_hot(std::size_t B, std::size_t C, std::size_t H, std::size_t W) {
    TD t(Shape{B, C, H, W});
    std::uniform_int_distribution<std::size_t> d(0, C - 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H * W; ++i) t[(b * C + d(rng_)) * H * W + i] = 1;
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

  /// Checks op(leaves...) contracted with a fixed random weight tensor.
  void op(const std::string& name, std::vector<TD> inputs, std::function<VD(const std::vector<VD>&)> f,
          double tol = kOpTolerance, double step = 1e-5) {
    Problem p;
    for (auto& t : inputs) p.leaves.emplace_back(std::move(t), true);
    TD w;
    {
      NoGradGuard ng;
      w = uniform(f(p.leaves).shape());
    }
    p.objective = [&p, f, w] { return weighted_sum(f(p.leaves), w); };
    p.step = step;
    record(name, p, tol);
  }

  /// Checks a scalar objective directly.
  void scalar(const std::string& name, std::vector<TD> inputs, std::function<VD(const std::vector<VD>&)> f,
              double tol = kOpTolerance, double step = 1e-5) {
    Problem p;
    for (auto& t : inputs) p.leaves.emplace_back(std::move(t), true);
    p.objective = [&p, f] { return f(p.leaves); };
    p.step = step;
    record(name, p, tol);
  }

  void record(const std::string& name, Problem& p, double tol) {
    const auto [err, n] = probe(p);
    auto it = std::find_if(results_.begin(), results_.end(), [&](const auto& r) { return r.op == name; });
    if (it == results_.end()) {
      results_.push_back({module_, name, err, tol, n});
    } else {
      it->rel_err = std::isnan(err) ? err : std::max(it->rel_err, err);
      it->probed += n;
    }
  }

  std::vector<GradCheckResult>& results() { return results_; }

 private:
  std::string module_;
  std::mt19937_64 rng_;
  std::vector<GradCheckResult> results_;
};

inline void tensor_suite(Suite& s) {
  const Shape x{2, 3, 4, 5};
  for (int rep = 0; rep < 3; ++rep) {
    s.op("add", {s.uniform(x), s.uniform(x)}, [](const auto& v) { return add(v[0], v[1]); });
    s.op("add", {s.uniform(x), s.uniform(Shape{3})}, [](const auto& v) { return add(v[0], v[1]); });
    s.op("sub", {s.uniform(x), s.uniform(Shape{3, 4, 5})}, [](const auto& v) { return sub(v[0], v[1]); });
    s.op("mul", {s.uniform(x), s.uniform(x)}, [](const auto& v) { return mul(v[0], v[1]); });
    s.op("mul", {s.uniform(x), s.uniform(Shape{3})}, [](const auto& v) { return mul(v[0], v[1]); });
    s.op("affine", {s.uniform(x)}, [](const auto& v) { return affine(v[0], -1.7, 0.3); });
    s.op("sigmoid", {s.uniform(x, -4, 4)}, [](const auto& v) { return sigmoid(v[0]); });
    s.op("tanh", {s.uniform(x, -3, 3)}, [](const auto& v) { return stseg::tanh(v[0]); });
    s.op("relu", {s.off_zero(x)}, [](const auto& v) { return relu(v[0]); });
    s.op("log", {s.uniform(x, 0.2, 3)}, [](const auto& v) { return stseg::log(v[0]); });
    s.scalar("sum", {s.uniform(x)}, [](const auto& v) { return sum(mul(v[0], v[0])); });
    s.scalar("mean", {s.uniform(x)}, [](const auto& v) { return mean(mul(v[0], v[0])); });
  }
}

inline void nn_suite(Suite& s) {
  struct Geo {
    std::size_t cin, cout, k, stride, pad, h, w;
  };
  for (const Geo g : {Geo{2, 3, 3, 1, 1, 6, 5}, Geo{3, 2, 3, 2, 0, 7, 7}, Geo{3, 4, 1, 1, 0, 4, 4}, Geo{1, 2, 5, 1, 2, 6, 6},
                      Geo{2, 2, 3, 2, 1, 5, 6}})
    s.op("conv2d", {s.uniform(Shape{2, g.cin, g.h, g.w}), s.uniform(Shape{g.cout, g.cin, g.k, g.k}), s.uniform(Shape{g.cout})},
         [g](const auto& v) { return conv2d(v[0], v[1], v[2], g.stride, g.pad); });
  for (const Geo g : {Geo{3, 2, 2, 2, 0, 3, 4}, Geo{2, 3, 3, 2, 1, 3, 3}, Geo{2, 2, 3, 1, 1, 4, 4}})
    s.op("conv_transpose2d",
         {s.uniform(Shape{2, g.cin, g.h, g.w}), s.uniform(Shape{g.cout, g.cin, g.k, g.k}), s.uniform(Shape{g.cout})},
         [g](const auto& v) { return conv_transpose2d(v[0], v[1], v[2], g.stride, g.pad); });
  for (int rep = 0; rep < 3; ++rep) {
    s.op("maxpool2x2", {s.spread(Shape{2, 3, 6, 4})}, [](const auto& v) { return maxpool2x2(v[0]); });
    s.op("batchnorm2d", {s.uniform(Shape{3, 2, 4, 3}), s.uniform(Shape{2}, 0.5, 1.5), s.uniform(Shape{2})},
         [](const auto& v) {
           TD rm(Shape{2}), rv(Shape{2}, 1.0);
           BatchNormParams<double> p{v[1], v[2], &rm, &rv};
           return batchnorm2d(v[0], p);
         });
    auto rm = std::make_shared<TD>(s.uniform(Shape{2}));
    auto rv = std::make_shared<TD>(s.uniform(Shape{2}, 0.5, 2));
    s.op("batchnorm2d_eval", {s.uniform(Shape{2, 2, 3, 3}), s.uniform(Shape{2}, 0.5, 1.5), s.uniform(Shape{2})},
         [rm, rv](const auto& v) {
           BatchNormParams<double> p{v[1], v[2], rm.get(), rv.get()};
           p.train = false;
           return batchnorm2d(v[0], p);
         });
    s.op("concat_channels", {s.uniform(Shape{2, 3, 3, 2}), s.uniform(Shape{2, 1, 3, 2})},
         [](const auto& v) { return concat_channels(v[0], v[1]); });
    s.op("slice_channels", {s.uniform(Shape{2, 5, 3, 2})}, [](const auto& v) { return slice_channels(v[0], 1, 3); });
    s.op("stack_leading", {s.uniform(Shape{2, 3, 3}), s.uniform(Shape{1, 3, 3}), s.uniform(Shape{3, 3, 3})},
         [](const auto& v) { return stack_leading(std::vector<VD>{v[0], v[1], v[2]}); });
    s.op("softmax_channels", {s.uniform(Shape{2, 3, 3, 4}, -3, 3)}, [](const auto& v) { return softmax_channels(v[0]); });
  }
}

inline void loss_suite(Suite& s) {
  for (int rep = 0; rep < 3; ++rep) {
    const auto y = s.one_hot(2, 2, 4, 5);
    s.scalar("cross_entropy", {s.uniform(Shape{2, 2, 4, 5}, 0.05, 0.95)},
             [y](const auto& v) { return cross_entropy(v[0], y); });
    s.scalar("binary_cross_entropy", {s.uniform(Shape{2, 2, 4, 5}, 0.05, 0.95)},
             [y](const auto& v) { return binary_cross_entropy(v[0], y); });
    s.scalar("soft_iou", {s.uniform(Shape{2, 2, 4, 5}, 0.0, 1.0)}, [y](const auto& v) { return soft_iou(v[0], y); });
    for (double alpha : {0.0, 0.7, 1.0})
      s.scalar("joint_loss", {s.uniform(Shape{2, 2, 4, 5}, -2, 2)}, [y, alpha](const auto& v) {
        return joint_loss(softmax_channels(v[0]), y, LossConfig{alpha, 1e-7}).loss;
      });
    s.scalar("joint_loss_binary", {s.uniform(Shape{2, 2, 4, 5}, -2, 2)}, [y](const auto& v) {
      return joint_loss(sigmoid(v[0]), y, LossConfig{0.7, 1e-7, true}).loss;
    });
  }
}

/// Every trainable parameter of a small U-Net, in both modes.
inline void unet_suite(Suite& s) {
  UNetConfig cfg;
  cfg.base_filters = 2;
  cfg.depth = 2;
  for (const Mode mode : {Mode::eval, Mode::train}) {
    auto store = unet_init<double>(cfg, 5);
    for (auto& e : store.entries()) {
      if (e.name.ends_with("running_mean")) e.var.mutable_value() = s.uniform(e.var.shape(), -0.2, 0.2);
      if (e.name.ends_with("running_var")) e.var.mutable_value() = s.uniform(e.var.shape(), 0.5, 1.5);
    }
    const VD x(s.uniform(Shape{2, 3, 8, 8}));
    const auto w = s.uniform(Shape{2, 2, 8, 8});
    Problem p;
    for (auto& e : store.entries())
      if (e.trainable) p.leaves.push_back(e.var);
    p.objective = [&] { return weighted_sum(unet_forward(x, store, cfg, mode), w); };
    // smaller step on the batch-statistics path
    p.step = mode == Mode::train ? 1e-7 : 1e-5;
    p.pooled = true;
    s.record(mode == Mode::train ? "unet_train" : "unet_eval", p, kCompositeTolerance);
  }
}

inline void rnn_suite(Suite& s) {
  for (const auto peek : {OutputPeephole::previous_cell, OutputPeephole::current_cell}) {
    const CellOptions opt{peek};
    for (int rep = 0; rep < 2; ++rep) {
      auto x = s.uniform(Shape{2, 2, 3, 3});
      auto h = s.uniform(Shape{2, 3, 3, 3}, -0.5, 0.5);
      auto c = s.uniform(Shape{2, 3, 3, 3});
      std::vector<TD> in{x, h, c};
      for (int g = 0; g < 4; ++g) in.push_back(s.uniform(Shape{3, 2, 3, 3}, -0.5, 0.5));
      for (int g = 0; g < 4; ++g) in.push_back(s.uniform(Shape{3, 3, 3, 3}, -0.3, 0.3));
      for (int g = 0; g < 7; ++g) in.push_back(s.uniform(Shape{3}, -0.5, 0.5));
      const auto w = s.uniform(Shape{2, 3, 3, 3});
      const auto wc = s.uniform(Shape{2, 3, 3, 3});
      s.scalar("convlstm_cell", in, [opt, w, wc](const auto& v) {
        const ConvLstmParams<double> p{v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12],
                                       v[13], v[14], v[15], v[16], v[17]};
        const auto st = convlstm_cell(v[0], ConvLstmState<double>{v[1], v[2]}, p, opt);
        return add(weighted_sum(st.h, w), weighted_sum(st.c, wc));
      });
    }

    ConvLstmConfig cfg{2, 3, 3, 2, 2};
    cfg.output_peephole = peek;
    auto store = convlstm_init<double>(cfg, 11);
    for (auto& e : store.entries())
      if (e.name.find("W_c") != std::string::npos) e.var.mutable_value() = s.uniform(e.var.shape(), -0.5, 0.5);
    std::vector<VD> seq;
    for (int t = 0; t < 3; ++t) seq.emplace_back(s.uniform(Shape{1, 2, 5, 5}));
    const auto w = s.uniform(Shape{1, 2, 5, 5});
    Problem p;
    for (auto& e : store.entries()) p.leaves.push_back(e.var);
    p.objective = [&] { return weighted_sum(temporal_forward(seq, store, cfg, opt), w); };
    p.pooled = true;
    s.record("convlstm_bptt", p, kCompositeTolerance);
  }
}

}  // namespace gc

/// Runs the named module ("all" for every module).
inline std::vector<GradCheckResult> run_gradcheck(const std::string& module = "all", std::uint64_t seed = 0) {
  const auto& mods = gradcheck_modules();
  if (module != "all" && std::find(mods.begin(), mods.end(), module) == mods.end())
    throw ConfigError("unknown gradcheck module '" + module + "' (all, tensor, nn, loss, unet, rnn)");
  std::vector<GradCheckResult> out;
  for (std::size_t k = 0; k < mods.size(); ++k) {
    const auto& m = mods[k];
    if (module != "all" && module != m) continue;
    gc::Suite s(m, seed * 31 + k);
    if (m == "tensor") gc::tensor_suite(s);
    else if (m == "nn") gc::nn_suite(s);
    else if (m == "loss") gc::loss_suite(s);
    else if (m == "unet") gc::unet_suite(s);
    else gc::rnn_suite(s);
    out.insert(out.end(), s.results().begin(), s.results().end());
  }
  return out;
}

}  // namespace stseg
