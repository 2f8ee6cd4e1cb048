#pragma once

// Half-width U-Net with batch normalization that maps an RGB image to a
// per-pixel class probability map (PMap) of the same spatial size.
//
// Parameter naming (also the checkpoint layout):
//   input.mean, input.std                    [in]        buffers
//   enc{i}.conv{j}.{weight,bias}             i < depth, j in {0,1}
//   enc{i}.bn{j}.{gamma,beta,running_mean,running_var}
//   bottleneck.conv{j}.*, bottleneck.bn{j}.*
//   dec{i}.up.{weight,bias}                  transposed conv, 2x2 stride 2
//   dec{i}.conv{j}.*, dec{i}.bn{j}.*         j < decoder_convs
//   head.{weight,bias}                       1x1 conv to num_classes

#include <random>
#include <string>

#include "stseg/nn.hpp"
#include "stseg/param_store.hpp"

namespace stseg {

enum class Mode { train, eval };

struct UNetConfig {
  std::size_t in_channels = 3;
  std::size_t base_filters = 32;
  std::size_t depth = 4;
  std::size_t num_classes = 2;
  // The expanding path uses a single 3x3 conv per level; 2 restores the classic U-Net.
  std::size_t decoder_convs = 1;

  void validate() const {
    if (in_channels < 1) throw ConfigError("UNetConfig: in_channels must be >= 1");
    if (base_filters < 1) throw ConfigError("UNetConfig: base_filters must be >= 1");
    if (num_classes < 2) throw ConfigError("UNetConfig: num_classes must be >= 2");
    if (decoder_convs < 1) throw ConfigError("UNetConfig: decoder_convs must be >= 1");
  }

  std::size_t filters(std::size_t level) const { return base_filters << level; }
  std::size_t divisor() const { return std::size_t{1} << depth; }
};

namespace detail {

template <Real T>
void add_conv(ParamStore<T>& s, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              std::mt19937_64& rng) {
  s.add(prefix + ".weight", he_normal<T>(Shape{cout, cin, k, k}, cin * k * k, rng));
  s.add(prefix + ".bias", Tensor<T>(Shape{cout}, T{0}));
}

template <Real T>
void add_bn(ParamStore<T>& s, const std::string& prefix, std::size_t c) {
  s.add(prefix + ".gamma", Tensor<T>(Shape{c}, T{1}));
  s.add(prefix + ".beta", Tensor<T>(Shape{c}, T{0}));
  s.add(prefix + ".running_mean", Tensor<T>(Shape{c}, T{0}), false);
  s.add(prefix + ".running_var", Tensor<T>(Shape{c}, T{1}), false);
}

template <Real T>
Var<T> conv_bn_relu(const Var<T>& x, ParamStore<T>& s, const std::string& conv, const std::string& bn, Mode mode) {
  auto y = conv2d(x, s.get(conv + ".weight"), s.get(conv + ".bias"), 1, s.get(conv + ".weight").dim(2) / 2);
  BatchNormParams<T> p;
  p.gamma = s.get(bn + ".gamma");
  p.beta = s.get(bn + ".beta");
  p.running_mean = &s.buffer(bn + ".running_mean");
  p.running_var = &s.buffer(bn + ".running_var");
  p.train = mode == Mode::train;
  return relu(batchnorm2d(y, p));
}

}  // namespace detail

template <Real T>
ParamStore<T> unet_init(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> s;
  s.add("input.mean", Tensor<T>(Shape{cfg.in_channels}, T{0}), false);
  s.add("input.std", Tensor<T>(Shape{cfg.in_channels}, T{1}), false);
  std::size_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto f = cfg.filters(i);
    for (std::size_t j = 0; j < 2; ++j) {
      const auto p = "enc" + std::to_string(i);
      detail::add_conv(s, p + ".conv" + std::to_string(j), j == 0 ? cin : f, f, 3, rng);
      detail::add_bn(s, p + ".bn" + std::to_string(j), f);
    }
    cin = f;
  }
  const auto fb = cfg.filters(cfg.depth);
  for (std::size_t j = 0; j < 2; ++j) {
    detail::add_conv(s, "bottleneck.conv" + std::to_string(j), j == 0 ? cin : fb, fb, 3, rng);
    detail::add_bn(s, "bottleneck.bn" + std::to_string(j), fb);
  }
  for (std::size_t i = cfg.depth; i-- > 0;) {
    const auto f = cfg.filters(i);
    const auto p = "dec" + std::to_string(i);
    // 2x2 stride-2 stamp: each output pixel sees one input pixel per channel
    s.add(p + ".up.weight", he_normal<T>(Shape{f, 2 * f, 2, 2}, 2 * f, rng));
    s.add(p + ".up.bias", Tensor<T>(Shape{f}, T{0}));
    for (std::size_t j = 0; j < cfg.decoder_convs; ++j) {
      detail::add_conv(s, p + ".conv" + std::to_string(j), j == 0 ? 2 * f : f, f, 3, rng);
      detail::add_bn(s, p + ".bn" + std::to_string(j), f);
    }
  }
  detail::add_conv(s, "head", cfg.base_filters, cfg.num_classes, 1, rng);
  return s;
}

/// Runs the network on x [B,in,H,W]; returns softmax probabilities
/// [B,num_classes,H,W]. When `bottleneck` is given it receives the lowest
/// resolution feature map.
template <Real T>
Var<T> unet_forward(const Var<T>& x, ParamStore<T>& s, const UNetConfig& cfg, Mode mode,
                    Var<T>* bottleneck = nullptr) {
  cfg.validate();
  if (x.shape().size() != 4) throw ShapeError("unet_forward: expected [B,C,H,W], got " + to_string(x.shape()));
  if (x.dim(1) != cfg.in_channels)
    throw ShapeError("unet_forward: input has " + std::to_string(x.dim(1)) + " channels, model expects " +
                     std::to_string(cfg.in_channels));
  if (x.dim(2) % cfg.divisor() != 0 || x.dim(3) % cfg.divisor() != 0)
    throw ShapeError("unet_forward: extents " + to_string(x.shape()) + " not divisible by " +
                     std::to_string(cfg.divisor()));

  const auto& mean = s.get("input.mean").value();
  Tensor<T> inv_std = s.get("input.std").value();
  for (auto& v : inv_std.storage()) v = T{1} / v;
  auto h = mul(sub(x, Var<T>(mean)), Var<T>(std::move(inv_std)));

  std::vector<Var<T>> skips;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto p = "enc" + std::to_string(i);
    h = detail::conv_bn_relu(h, s, p + ".conv0", p + ".bn0", mode);
    h = detail::conv_bn_relu(h, s, p + ".conv1", p + ".bn1", mode);
    skips.push_back(h);
    h = maxpool2x2(h);
  }
  h = detail::conv_bn_relu(h, s, "bottleneck.conv0", "bottleneck.bn0", mode);
  h = detail::conv_bn_relu(h, s, "bottleneck.conv1", "bottleneck.bn1", mode);
  if (bottleneck) *bottleneck = h;
  for (std::size_t i = cfg.depth; i-- > 0;) {
    const auto p = "dec" + std::to_string(i);
    h = conv_transpose2d(h, s.get(p + ".up.weight"), s.get(p + ".up.bias"), 2, 0);
    h = concat_channels(h, skips[i]);
    for (std::size_t j = 0; j < cfg.decoder_convs; ++j)
      h = detail::conv_bn_relu(h, s, p + ".conv" + std::to_string(j), p + ".bn" + std::to_string(j), mode);
  }
  return softmax_channels(conv2d(h, s.get("head.weight"), s.get("head.bias")));
}

/// Checks that a store matches the layout unet_init would produce for cfg.
template <Real T>
void unet_check_params(const ParamStore<T>& s, const UNetConfig& cfg) {
  const auto ref = unet_init<T>(cfg, 0);
  if (ref.size() != s.size()) throw ConfigError("parameter store does not match the U-Net configuration");
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& a = ref.entries()[i];
    const auto& b = s.entries()[i];
    if (a.name != b.name || a.var.shape() != b.var.shape())
      throw ConfigError("parameter " + b.name + " does not match the U-Net configuration (expected " + a.name + " " +
                        to_string(a.var.shape()) + ")");
  }
}

}  // namespace stseg
