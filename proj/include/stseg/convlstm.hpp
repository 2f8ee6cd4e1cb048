#pragma once

// Peephole convolutional LSTM and the stacked temporal fusion model.
//
// Cell update, with * a same-padded convolution and . a Hadamard product:
//   i_t = sig(W_xi*x_t + W_hi*h_{t-1} + W_ci.c_{t-1} + b_i)
//   f_t = sig(W_xf*x_t + W_hf*h_{t-1} + W_cf.c_{t-1} + b_f)
//   c_t = f_t.c_{t-1} + i_t.tanh(W_xc*x_t + W_hc*h_{t-1} + b_c)
//   o_t = sig(W_xo*x_t + W_ho*h_{t-1} + W_co.c_{t-1 or t} + b_o)
//   h_t = o_t.tanh(c_t)
// The four input kernels (and the four hidden kernels) are stacked so that
// each step needs one convolution over x_t and one over h_{t-1}.
//
// Parameter names: rnn.l{i}.{W_xi,W_xf,W_xc,W_xo,W_hi,W_hf,W_hc,W_ho,
// W_ci,W_cf,W_co,b_i,b_f,b_c,b_o}, rnn.proj{i}.{weight,bias} (optional),
// rnn.head.{weight,bias}.

#include <random>
#include <string>
#include <vector>

#include "stseg/nn.hpp"
#include "stseg/param_store.hpp"

namespace stseg {

enum class Peephole { per_channel, per_element };

// Which cell state the output gate peeks at.
enum class OutputPeephole { previous_cell, current_cell };

struct ConvLstmConfig {
  std::size_t input_channels = 2;  // d = l_c
  std::size_t hidden = 32;         // r
  std::size_t kernel = 3;          // k
  std::size_t layers = 2;
  std::size_t out_channels = 2;    // l_c of the fused map
  Peephole peephole = Peephole::per_channel;
  std::size_t peephole_height = 0, peephole_width = 0;  // per_element only
  OutputPeephole output_peephole = OutputPeephole::previous_cell;
  // Insert a 1x1 projection back to out_channels between stacked layers.
  bool project_between_layers = false;

  void validate() const {
    if (kernel % 2 == 0) throw ConfigError("ConvLstmConfig: kernel must be odd");
    if (hidden < 1) throw ConfigError("ConvLstmConfig: hidden filters must be >= 1");
    if (layers < 1) throw ConfigError("ConvLstmConfig: layers must be >= 1");
    if (input_channels < 1 || out_channels < 1) throw ConfigError("ConvLstmConfig: channel counts must be >= 1");
    if (peephole == Peephole::per_element && (peephole_height == 0 || peephole_width == 0))
      throw ConfigError("ConvLstmConfig: per-element peepholes need a fixed spatial size");
  }

  std::size_t layer_input(std::size_t layer) const {
    if (layer == 0) return input_channels;
    return project_between_layers ? out_channels : hidden;
  }
};

template <Real T>
struct ConvLstmState {
  Var<T> h;  // [B,r,H,W]
  Var<T> c;  // [B,r,H,W]

  static ConvLstmState zeros(std::size_t batch, std::size_t hidden, std::size_t height, std::size_t width) {
    const Shape s{batch, hidden, height, width};
    return {Var<T>(Tensor<T>(s, T{0})), Var<T>(Tensor<T>(s, T{0}))};
  }
};

/// Weights of one cell, views into a ParamStore.
template <Real T>
struct ConvLstmParams {
  Var<T> W_xi, W_xf, W_xc, W_xo;
  Var<T> W_hi, W_hf, W_hc, W_ho;
  Var<T> W_ci, W_cf, W_co;
  Var<T> b_i, b_f, b_c, b_o;

  static ConvLstmParams from_store(ParamStore<T>& s, const std::string& prefix) {
    auto g = [&](const char* n) { return s.get(prefix + "." + n); };
    return {g("W_xi"), g("W_xf"), g("W_xc"), g("W_xo"), g("W_hi"), g("W_hf"), g("W_hc"), g("W_ho"),
            g("W_ci"), g("W_cf"), g("W_co"), g("b_i"),  g("b_f"),  g("b_c"),  g("b_o")};
  }
};

struct CellOptions {
  OutputPeephole output_peephole = OutputPeephole::previous_cell;
  // Probe mode: pins f_t = 1 and i_t = 0 so that c_t must equal c_{t-1}.
  bool conserve_memory = false;
};

/// Gate activations of the last cell step, exposed for structural checks.
template <Real T>
struct CellGates {
  Tensor<T> i, f, o;
};

template <Real T>
ConvLstmState<T> convlstm_cell(const Var<T>& x, const ConvLstmState<T>& state, const ConvLstmParams<T>& p,
                               const CellOptions& opt = {}, CellGates<T>* gates = nullptr) {
  if (x.shape().size() != 4) throw ShapeError("convlstm_cell: x must be [B,d,H,W]");
  const auto r = p.b_i.dim(0);
  const auto k = p.W_xi.dim(2);
  const Shape hs{x.dim(0), r, x.dim(2), x.dim(3)};
  if (state.h.shape() != hs || state.c.shape() != hs)
    throw ShapeError("convlstm_cell: state shape " + to_string(state.h.shape()) + " does not match " + to_string(hs));
  if (x.dim(1) != p.W_xi.dim(1))
    throw ShapeError("convlstm_cell: input has " + std::to_string(x.dim(1)) + " channels, cell expects " +
                     std::to_string(p.W_xi.dim(1)));
  if (!state.h.value().all_finite() || !state.c.value().all_finite())
    throw NumericError("convlstm_cell: non-finite value in recurrent state");

  auto pre = conv2d(x, stack_leading<T>({p.W_xi, p.W_xf, p.W_xc, p.W_xo}),
                    stack_leading<T>({p.b_i, p.b_f, p.b_c, p.b_o}), 1, k / 2);
  // A zero hidden state with no bias contributes exactly zero; skip the conv.
  const auto& hv = state.h.value().storage();
  const bool h_zero = !state.h.requires_grad() && std::all_of(hv.begin(), hv.end(), [](T v) { return v == T{0}; });
  if (!h_zero)
    pre = add(pre, conv2d(state.h, stack_leading<T>({p.W_hi, p.W_hf, p.W_hc, p.W_ho}),
                          Var<T>(Tensor<T>(Shape{4 * r}, T{0})), 1, k / 2));

  const auto& c_prev = state.c;
  Var<T> i, f;
  if (opt.conserve_memory) {
    i = Var<T>(Tensor<T>(hs, T{0}));
    f = Var<T>(Tensor<T>(hs, T{1}));
  } else {
    i = sigmoid(add(slice_channels(pre, 0, r), mul(c_prev, p.W_ci)));
    f = sigmoid(add(slice_channels(pre, r, r), mul(c_prev, p.W_cf)));
  }
  auto c = add(mul(f, c_prev), mul(i, tanh(slice_channels(pre, 2 * r, r))));
  const auto& peek = opt.output_peephole == OutputPeephole::current_cell ? c : c_prev;
  auto o = sigmoid(add(slice_channels(pre, 3 * r, r), mul(peek, p.W_co)));
  auto h = mul(o, tanh(c));
  if (gates) *gates = {i.value(), f.value(), o.value()};
  return {h, c};
}

template <Real T>
ParamStore<T> convlstm_init(const ConvLstmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> s;
  const auto r = cfg.hidden, k = cfg.kernel;
  const Shape peep = cfg.peephole == Peephole::per_channel ? Shape{r} : Shape{r, cfg.peephole_height, cfg.peephole_width};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto d = cfg.layer_input(l);
    const auto p = "rnn.l" + std::to_string(l) + ".";
    for (const char* g : {"W_xi", "W_xf", "W_xc", "W_xo"}) s.add(p + g, he_normal<T>(Shape{r, d, k, k}, d * k * k, rng));
    for (const char* g : {"W_hi", "W_hf", "W_hc", "W_ho"}) s.add(p + g, he_normal<T>(Shape{r, r, k, k}, r * k * k, rng));
    for (const char* g : {"W_ci", "W_cf", "W_co"}) s.add(p + g, Tensor<T>(peep, T{0}));
    s.add(p + "b_i", Tensor<T>(Shape{r}, T{0}));
    s.add(p + "b_f", Tensor<T>(Shape{r}, T{1}));
    s.add(p + "b_c", Tensor<T>(Shape{r}, T{0}));
    s.add(p + "b_o", Tensor<T>(Shape{r}, T{0}));
    if (cfg.project_between_layers && l + 1 < cfg.layers) {
      const auto q = "rnn.proj" + std::to_string(l);
      s.add(q + ".weight", he_normal<T>(Shape{cfg.out_channels, r, 1, 1}, r, rng));
      s.add(q + ".bias", Tensor<T>(Shape{cfg.out_channels}, T{0}));
    }
  }
  s.add("rnn.head.weight", he_normal<T>(Shape{cfg.out_channels, r, 1, 1}, r, rng));
  s.add("rnn.head.bias", Tensor<T>(Shape{cfg.out_channels}, T{0}));
  return s;
}

/// Fuses a sequence of PMaps x_1..x_T (each [B,d,H,W]) into one map
/// [B,out_channels,H,W] with values in (0,1): stacked ConvLSTM layers from
/// zero state, then a 1x1 conv on the last hidden state and a sigmoid.
template <Real T>
Var<T> temporal_forward(const std::vector<Var<T>>& seq, ParamStore<T>& s, const ConvLstmConfig& cfg,
                        const CellOptions& opt = {}) {
  cfg.validate();
  if (seq.empty()) throw ShapeError("temporal_forward: empty sequence");
  for (const auto& x : seq) {
    if (x.shape().size() != 4 || x.shape() != seq[0].shape())
      throw ShapeError("temporal_forward: sequence items must share one [B,d,H,W] shape");
    if (x.dim(1) != cfg.input_channels)
      throw ShapeError("temporal_forward: input has " + std::to_string(x.dim(1)) + " channels, model expects " +
                       std::to_string(cfg.input_channels));
  }
  const auto B = seq[0].dim(0), H = seq[0].dim(2), W = seq[0].dim(3);
  if (cfg.peephole == Peephole::per_element && (H != cfg.peephole_height || W != cfg.peephole_width))
    throw ShapeError("temporal_forward: per-element peepholes fix the input size");

  std::vector<Var<T>> inputs = seq;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto p = ConvLstmParams<T>::from_store(s, "rnn.l" + std::to_string(l));
    auto state = ConvLstmState<T>::zeros(B, cfg.hidden, H, W);
    std::vector<Var<T>> outputs;
    outputs.reserve(inputs.size());
    for (const auto& x : inputs) {
      state = convlstm_cell(x, state, p, opt);
      outputs.push_back(state.h);
    }
    if (cfg.project_between_layers && l + 1 < cfg.layers) {
      const auto q = "rnn.proj" + std::to_string(l);
      for (auto& o : outputs) o = conv2d(o, s.get(q + ".weight"), s.get(q + ".bias"));
    }
    inputs = std::move(outputs);
  }
  return sigmoid(conv2d(inputs.back(), s.get("rnn.head.weight"), s.get("rnn.head.bias")));
}

/// Overload for a packed [B,T,d,H,W] tensor.
template <Real T>
Var<T> temporal_forward(const Tensor<T>& packed, ParamStore<T>& s, const ConvLstmConfig& cfg,
                        const CellOptions& opt = {}) {
  if (packed.ndim() != 5) throw ShapeError("temporal_forward: expected [B,T,d,H,W], got " + to_string(packed.shape()));
  const auto B = packed.dim(0), Tn = packed.dim(1), C = packed.dim(2), HW = packed.dim(3) * packed.dim(4);
  std::vector<Var<T>> seq;
  for (std::size_t t = 0; t < Tn; ++t) {
    Tensor<T> x(Shape{B, C, packed.dim(3), packed.dim(4)});
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(packed.data().data() + (b * Tn + t) * C * HW, C * HW, x.data().data() + b * C * HW);
    seq.emplace_back(std::move(x));
  }
  return temporal_forward(seq, s, cfg, opt);
}

template <Real T>
void convlstm_check_params(const ParamStore<T>& s, const ConvLstmConfig& cfg) {
  const auto ref = convlstm_init<T>(cfg, 0);
  if (ref.size() != s.size()) throw ConfigError("parameter store does not match the ConvLSTM configuration");
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& a = ref.entries()[i];
    const auto& b = s.entries()[i];
    if (a.name != b.name || a.var.shape() != b.var.shape())
      throw ConfigError("parameter " + b.name + " does not match the ConvLSTM configuration (expected " + a.name +
                        " " + to_string(a.var.shape()) + ")");
  }
}

}  // namespace stseg
