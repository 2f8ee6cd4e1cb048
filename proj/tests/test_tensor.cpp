#include <gtest/gtest.h>

#include <sstream>

#include "stseg/autodiff.hpp"
#include "support/grad_probe.hpp"

using namespace stseg;
using TD = Tensor<double>;
using VD = Var<double>;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(TD(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(TD(Shape{2, 0}), ShapeError);
  EXPECT_EQ(TD(Shape{2, 3, 4}).size(), 24u);
}

TEST(Tensor, SttRoundTripAndLayout) {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  std::stringstream ss;
  write_stt(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 4 + 2 * 4 + 1 + 6 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "STT1");
  EXPECT_EQ(bytes[4], 2);   // ndim, little-endian
  EXPECT_EQ(bytes[8], 2);   // first extent
  EXPECT_EQ(bytes[12], 3);  // second extent
  EXPECT_EQ(bytes[16], 0);  // dtype f32
  float first;
  std::memcpy(&first, bytes.data() + 17, 4);
  EXPECT_EQ(first, 1.0f);
  EXPECT_EQ(read_stt<float>(ss), t);

  std::stringstream s64;
  write_stt(s64, t.cast<double>());
  EXPECT_EQ(s64.str()[16], 1);
  EXPECT_EQ(read_stt<float>(s64), t);
}

TEST(Tensor, SttRejectsGarbage) {
  std::stringstream ss("STTX\0\0\0\0");
  EXPECT_THROW(read_stt<float>(ss), FormatError);
  std::stringstream trunc(std::string("STT1\x01\0\0\0\x04\0\0\0\0", 13));
  EXPECT_THROW(read_stt<float>(trunc), FormatError);
}

TEST(Elementwise, HadamardExamples) {
  VD a(TD(Shape{2}, {1, 2}));
  VD b(TD(Shape{2}, {3, 4}));
  EXPECT_EQ(mul(a, b).value(), TD(Shape{2}, {3, 8}));
  VD ones(TD(Shape{2}, 1.0));
  EXPECT_EQ(mul(a, ones).value(), a.value());
}

TEST(Elementwise, HadamardGradientIsOtherFactor) {
  std::mt19937_64 rng(1);
  auto a = oracle::random_tensor(Shape{2, 3, 4}, rng);
  auto b = oracle::random_tensor(Shape{2, 3, 4}, rng);
  VD va(a, true), vb(b, true);
  backward(sum(mul(va, vb)));
  EXPECT_EQ(va.grad(), b);
  auto numeric = oracle::finite_diff(
      [&](const TD& x) {
        double s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * b[i];
        return s;
      },
      a);
  EXPECT_LT(oracle::rel_err(va.grad(), numeric), 1e-4);
}

TEST(Elementwise, ChannelBroadcastAndErrors) {
  VD x(TD(Shape{1, 2, 2, 2}, 1.0));
  VD bias(TD(Shape{2}, {10, 20}));
  auto y = add(x, bias);
  EXPECT_EQ(y.value().at(0, 0, 1, 1), 11);
  EXPECT_EQ(y.value().at(0, 1, 0, 0), 21);
  EXPECT_THROW(add(x, VD(TD(Shape{3}))), ShapeError);
  EXPECT_THROW(mul(x, VD(TD(Shape{2, 2}))), ShapeError);
}

TEST(Activations, FixedPoints) {
  VD z(TD(Shape{1}, 0.0));
  EXPECT_EQ(sigmoid(z).value()[0], 0.5);
  EXPECT_EQ(tanh(z).value()[0], 0.0);
  EXPECT_EQ(relu(z).value()[0], 0.0);
}

TEST(Activations, SigmoidStableForLargeNegative) {
  Var<float> x(Tensor<float>(Shape{3}, {-80.f, -200.f, -1e4f}), true);
  auto y = sigmoid(x);
  backward(sum(y));
  for (std::size_t i = 0; i < 3; ++i) {
    const float v = y.value()[i];
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.f);
    EXPECT_LT(v, 1e-30f);
    // 64-bit reference: sigma(-80) ~ 1.8e-35
    const double ref = std::exp(static_cast<double>(x.value()[i])) / (1 + std::exp(static_cast<double>(x.value()[i])));
    EXPECT_NEAR(v, ref, 1e-38);
    EXPECT_TRUE(std::isfinite(x.grad()[i]));
    EXPECT_LT(x.grad()[i], 1e-30f);
  }
}

TEST(Activations, ReluKinkHasZeroDerivative) {
  VD x(TD(Shape{3}, {-1, 0, 2}), true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad(), TD(Shape{3}, {0, 0, 1}));
}

TEST(Backward, LinearAndQuadratic) {
  std::mt19937_64 rng(2);
  auto t = oracle::random_tensor(Shape{3, 2, 5}, rng);
  VD x(t, true);
  backward(sum(x));
  EXPECT_EQ(x.grad(), TD(t.shape(), 1.0));

  VD y(t, true);
  backward(sum(mul(y, y)));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(y.grad()[i], 2 * t[i]);
}

TEST(Backward, ErrorContract) {
  VD x(TD(Shape{4}, 1.0), true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
  auto loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, UnreachableLeafHoldsZero) {
  VD x(TD(Shape{2}, 3.0), true);
  VD unused(TD(Shape{2}, 5.0), true);
  backward(sum(x));
  EXPECT_EQ(unused.grad(), TD(Shape{2}, 0.0));
}

TEST(Backward, AccumulatesAcrossConsumersExactly) {
  std::mt19937_64 rng(3);
  auto t = oracle::random_tensor(Shape{2, 3, 2, 2}, rng);
  const auto w = oracle::random_tensor(t.shape(), rng);
  // each branch contributes one term, so the sum is order-independent
  auto f = [&](const VD& x) { return sum(mul(x, VD(w))); };
  auto g = [](const VD& x) { return sum(tanh(x)); };
  VD a(t, true), b(t, true), c(t, true);
  backward(f(a));
  backward(g(b));
  backward(add(f(c), g(c)));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(c.grad()[i], a.grad()[i] + b.grad()[i]);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  VD x(TD(Shape{2}, 1.0), true);
  NoGradGuard ng;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Backward, ForwardIsDeterministic) {
  std::mt19937_64 rng(4);
  auto t = oracle::random_tensor(Shape{1, 2, 4, 4}, rng);
  auto run = [&] { return tanh(mul(sigmoid(VD(t)), VD(t))).value(); };
  EXPECT_EQ(run(), run());
}

// Property: every elementwise op agrees with central differences on random
// small tensors.
TEST(Backward, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = oracle::random_tensor(Shape{2, 3, 2, 2}, rng);
    auto b = oracle::random_tensor(Shape{2, 3, 2, 2}, rng);
    auto c = oracle::random_tensor(Shape{3}, rng);
    auto pos = oracle::random_tensor(Shape{2, 3, 2, 2}, rng, 0.5, 2.0);
    // keep relu probes away from the kink
    for (auto& v : a.storage())
      if (std::abs(v) < 1e-3) v = 0.1;
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return add(v[0], v[1]); }, {a, b}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return sub(v[0], v[1]); }, {a, b}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return mul(v[0], v[1]); }, {a, b}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return mul(v[0], v[1]); }, {a, c}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return sub(v[0], v[1]); }, {a, c}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return sigmoid(v[0]); }, {a}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return tanh(v[0]); }, {a}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return relu(v[0]); }, {a}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return log(v[0]); }, {pos}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return affine(v[0], -2.5, 0.3); }, {a}), 1e-4);
    EXPECT_LT(oracle::probe_gradients([](auto& v) { return mean(mul(v[0], v[0])); }, {a}), 1e-4);
  }
}
