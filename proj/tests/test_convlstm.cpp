#include <gtest/gtest.h>

#include "stseg/convlstm.hpp"
#include "support/grad_probe.hpp"

using namespace stseg;
using TD = Tensor<double>;
using VD = Var<double>;

namespace {

ParamStore<double> zero_cell(std::size_t d, std::size_t r, std::size_t k) {
  ConvLstmConfig cfg{d, r, k, 1, 1};
  auto s = convlstm_init<double>(cfg, 0);
  for (auto& e : s.entries()) e.var.mutable_value().fill(0);
  return s;
}

void zero_recurrence(ParamStore<double>& s) {
  for (auto& e : s.entries()) {
    const auto& n = e.name;
    const auto tail = n.substr(n.rfind('.') + 1);
    if (tail.rfind("W_h", 0) == 0 || tail.rfind("W_c", 0) == 0) e.var.mutable_value().fill(0);
  }
}

}  // namespace

TEST(ConvLstm, ZeroParametersGiveHalfGatesAndZeroState) {
  auto s = zero_cell(2, 3, 3);
  const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
  std::mt19937_64 rng(1);
  VD x(oracle::random_tensor(Shape{1, 2, 5, 5}, rng));
  CellGates<double> g;
  auto st = convlstm_cell(x, ConvLstmState<double>::zeros(1, 3, 5, 5), p, {}, &g);
  for (const auto* t : {&g.i, &g.f, &g.o})
    for (double v : t->storage()) EXPECT_EQ(v, 0.5);
  for (double v : st.c.value().storage()) EXPECT_EQ(v, 0.0);
  for (double v : st.h.value().storage()) EXPECT_EQ(v, 0.0);
}

// A 1x1 kernel on a 1x1 map with one hidden unit collapses to the scalar recurrence.
TEST(ConvLstm, MatchesScalarRecurrence) {
  for (bool peek_current : {false, true})
    for (std::size_t steps : {3u, 5u}) {
      std::mt19937_64 rng(steps + 10 * peek_current);
      std::normal_distribution<double> n(0, 0.8);
      oracle::ScalarLstm ref{n(rng), n(rng), n(rng), n(rng), n(rng), n(rng), n(rng), n(rng),
                             n(rng), n(rng), n(rng), n(rng), n(rng), n(rng), n(rng), peek_current};
      auto s = zero_cell(1, 1, 1);
      const double vals[] = {ref.wxi, ref.wxf, ref.wxc, ref.wxo, ref.whi, ref.whf, ref.whc, ref.who,
                             ref.wci, ref.wcf, ref.wco, ref.bi,  ref.bf,  ref.bc,  ref.bo};
      const char* names[] = {"W_xi", "W_xf", "W_xc", "W_xo", "W_hi", "W_hf", "W_hc", "W_ho",
                             "W_ci", "W_cf", "W_co", "b_i",  "b_f",  "b_c",  "b_o"};
      for (int i = 0; i < 15; ++i) s.get(std::string("rnn.l0.") + names[i]).mutable_value().fill(vals[i]);
      const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
      CellOptions opt;
      opt.output_peephole = peek_current ? OutputPeephole::current_cell : OutputPeephole::previous_cell;

      auto st = ConvLstmState<double>::zeros(1, 1, 1, 1);
      double h = 0, c = 0;
      for (std::size_t t = 0; t < steps; ++t) {
        const double x = n(rng);
        st = convlstm_cell(VD(TD(Shape{1, 1, 1, 1}, x)), st, p, opt);
        ref.step(x, h, c);
        EXPECT_NEAR(st.h.value().item(), h, 1e-12);
        EXPECT_NEAR(st.c.value().item(), c, 1e-12);
      }
    }
}

TEST(ConvLstm, OutputPeepholeVariantsDiffer) {
  ConvLstmConfig cfg{1, 2, 1, 1, 1};
  auto s = convlstm_init<double>(cfg, 4);
  s.get("rnn.l0.W_co").mutable_value().fill(1.5);
  const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
  VD x(TD(Shape{1, 1, 1, 1}, 0.7));
  auto st = ConvLstmState<double>::zeros(1, 2, 1, 1);
  auto a = convlstm_cell(x, st, p, {OutputPeephole::previous_cell});
  auto b = convlstm_cell(x, st, p, {OutputPeephole::current_cell});
  EXPECT_EQ(a.c.value(), b.c.value());
  EXPECT_NE(a.h.value(), b.h.value());
}

TEST(ConvLstm, HiddenStateShape) {
  ConvLstmConfig cfg;  // d=2, r=32, k=3
  auto s = convlstm_init<float>(cfg, 0);
  const auto p = ConvLstmParams<float>::from_store(s, "rnn.l0");
  NoGradGuard ng;
  Var<float> x(Tensor<float>(Shape{1, 2, 64, 64}, 0.5f));
  auto st = convlstm_cell(x, ConvLstmState<float>::zeros(1, 32, 64, 64), p);
  EXPECT_EQ(st.h.shape(), (Shape{1, 32, 64, 64}));
  EXPECT_EQ(st.c.shape(), (Shape{1, 32, 64, 64}));
}

TEST(ConvLstm, GatesStayInUnitInterval) {
  ConvLstmConfig cfg{2, 4, 3, 1, 2};
  auto s = convlstm_init<double>(cfg, 2);
  const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
  std::mt19937_64 rng(2);
  auto st = ConvLstmState<double>::zeros(2, 4, 6, 6);
  for (int t = 0; t < 4; ++t) {
    CellGates<double> g;
    st = convlstm_cell(VD(oracle::random_tensor(Shape{2, 2, 6, 6}, rng)), st, p, {}, &g);
    for (const auto* gate : {&g.i, &g.f, &g.o})
      for (double v : gate->storage()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
  }
}

TEST(ConvLstm, ConservationProbeKeepsCellState) {
  ConvLstmConfig cfg{2, 3, 3, 1, 2};
  auto s = convlstm_init<double>(cfg, 6);
  const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
  std::mt19937_64 rng(6);
  ConvLstmState<double> st{VD(oracle::random_tensor(Shape{1, 3, 4, 4}, rng)),
                           VD(oracle::random_tensor(Shape{1, 3, 4, 4}, rng))};
  CellOptions opt;
  opt.conserve_memory = true;
  const auto c0 = st.c.value();
  for (int t = 0; t < 3; ++t) st = convlstm_cell(VD(oracle::random_tensor(Shape{1, 2, 4, 4}, rng)), st, p, opt);
  EXPECT_EQ(st.c.value(), c0);
}

TEST(ConvLstm, RejectsBadInputs) {
  ConvLstmConfig cfg{2, 3, 3, 2, 2};
  auto s = convlstm_init<double>(cfg, 0);
  EXPECT_THROW(temporal_forward<double>(std::vector<VD>{}, s, cfg), ShapeError);
  EXPECT_THROW(temporal_forward<double>({VD(TD(Shape{1, 3, 4, 4}))}, s, cfg), ShapeError);
  EXPECT_THROW(temporal_forward<double>({VD(TD(Shape{1, 2, 4, 4})), VD(TD(Shape{1, 2, 4, 5}))}, s, cfg), ShapeError);

  const auto p = ConvLstmParams<double>::from_store(s, "rnn.l0");
  auto st = ConvLstmState<double>::zeros(1, 3, 4, 4);
  TD bad(Shape{1, 3, 4, 4}, 0.0);
  bad[5] = std::numeric_limits<double>::quiet_NaN();
  st.c = VD(bad);
  EXPECT_THROW(convlstm_cell(VD(TD(Shape{1, 2, 4, 4})), st, p), NumericError);

  ConvLstmConfig even = cfg;
  even.kernel = 2;
  EXPECT_THROW(convlstm_init<double>(even, 0), ConfigError);
  ConvLstmConfig wider = cfg;
  wider.hidden = 4;
  EXPECT_THROW(convlstm_check_params(s, wider), ConfigError);
}

TEST(ConvLstm, InitConventions) {
  ConvLstmConfig cfg;
  auto a = convlstm_init<float>(cfg, 3);
  EXPECT_TRUE(a == convlstm_init<float>(cfg, 3));
  EXPECT_FALSE(a == convlstm_init<float>(cfg, 4));
  for (std::size_t l = 0; l < 2; ++l) {
    const auto p = "rnn.l" + std::to_string(l) + ".";
    EXPECT_EQ(a.get(p + "b_f").value(), Tensor<float>(Shape{32}, 1.f));
    EXPECT_EQ(a.get(p + "b_i").value(), Tensor<float>(Shape{32}, 0.f));
    EXPECT_EQ(a.get(p + "W_ci").value(), Tensor<float>(Shape{32}, 0.f));
  }
  EXPECT_EQ(a.get("rnn.l1.W_xi").shape(), (Shape{32, 32, 3, 3}));
}

TEST(ConvLstm, ParameterCountMatchesLayerTally) {
  // totals from tests/oracles/param_tally.py
  EXPECT_EQ(convlstm_init<float>(ConvLstmConfig{}, 0).trainable_count(), 113410u);
  EXPECT_EQ(convlstm_init<float>(ConvLstmConfig{2, 4, 3, 2, 2}, 0).trainable_count(), 2082u);
}

TEST(TemporalFusion, SingleStepEqualsOneCellAndHead) {
  ConvLstmConfig cfg{2, 4, 3, 1, 2};
  auto s = convlstm_init<double>(cfg, 12);
  std::mt19937_64 rng(12);
  VD x(oracle::random_tensor(Shape{1, 2, 6, 6}, rng));
  const auto fused = temporal_forward<double>({x}, s, cfg).value();
  const auto st = convlstm_cell(x, ConvLstmState<double>::zeros(1, 4, 6, 6),
                                ConvLstmParams<double>::from_store(s, "rnn.l0"));
  const auto ref = sigmoid(conv2d(st.h, s.get("rnn.head.weight"), s.get("rnn.head.bias"))).value();
  EXPECT_EQ(fused, ref);
}

TEST(TemporalFusion, IdenticalFramesInAnyOrderWithoutRecurrence) {
  ConvLstmConfig cfg{2, 4, 3, 2, 2};
  auto s = convlstm_init<double>(cfg, 13);
  zero_recurrence(s);
  std::mt19937_64 rng(13);
  const auto m = oracle::random_tensor(Shape{1, 2, 8, 8}, rng);
  VD a(m), b(m), c(m);
  const auto abc = temporal_forward<double>({a, b, c}, s, cfg).value();
  EXPECT_EQ(temporal_forward<double>({c, a, b}, s, cfg).value(), abc);
  EXPECT_EQ(temporal_forward<double>({b, c, a}, s, cfg).value(), abc);
}

TEST(TemporalFusion, OrderMattersWithRecurrence) {
  ConvLstmConfig cfg{2, 4, 3, 2, 2};
  auto s = convlstm_init<double>(cfg, 14);
  std::mt19937_64 rng(14);
  VD a(oracle::random_tensor(Shape{1, 2, 8, 8}, rng)), b(oracle::random_tensor(Shape{1, 2, 8, 8}, rng));
  EXPECT_GT(oracle::max_abs_diff(temporal_forward<double>({a, b}, s, cfg).value(),
                                 temporal_forward<double>({b, a}, s, cfg).value()),
            1e-6);
}

TEST(TemporalFusion, PackedInputMatchesSequence) {
  ConvLstmConfig cfg{2, 3, 3, 2, 2};
  auto s = convlstm_init<double>(cfg, 15);
  std::mt19937_64 rng(15);
  const auto packed = oracle::random_tensor(Shape{2, 3, 2, 5, 5}, rng);
  std::vector<VD> seq;
  for (std::size_t t = 0; t < 3; ++t) {
    TD x(Shape{2, 2, 5, 5});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 50; ++i) x[b * 50 + i] = packed[(b * 3 + t) * 50 + i];
    seq.emplace_back(x);
  }
  const auto y = temporal_forward(packed, s, cfg).value();
  EXPECT_EQ(y, temporal_forward(seq, s, cfg).value());
  EXPECT_EQ(y.shape(), (Shape{2, 2, 5, 5}));
  for (double v : y.storage()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(TemporalFusion, PeepholeAndProjectionVariants) {
  ConvLstmConfig el{2, 3, 3, 2, 2};
  el.peephole = Peephole::per_element;
  el.peephole_height = el.peephole_width = 6;
  auto s = convlstm_init<double>(el, 16);
  EXPECT_EQ(s.get("rnn.l0.W_co").shape(), (Shape{3, 6, 6}));
  std::mt19937_64 rng(16);
  VD x(oracle::random_tensor(Shape{1, 2, 6, 6}, rng));
  EXPECT_EQ(temporal_forward<double>({x, x}, s, el).shape(), (Shape{1, 2, 6, 6}));
  EXPECT_THROW(temporal_forward<double>({VD(TD(Shape{1, 2, 8, 8}))}, s, el), ShapeError);

  ConvLstmConfig pr{2, 3, 3, 2, 2};
  pr.project_between_layers = true;
  auto sp = convlstm_init<double>(pr, 16);
  EXPECT_EQ(sp.get("rnn.l1.W_xi").shape(), (Shape{3, 2, 3, 3}));
  EXPECT_TRUE(sp.contains("rnn.proj0.weight"));
  EXPECT_EQ(temporal_forward<double>({x, x}, sp, pr).shape(), (Shape{1, 2, 6, 6}));
}

// Backpropagation through time over the full stacked model, every parameter.
TEST(TemporalFusion, GradientOfEveryParameterMatchesFiniteDifferences) {
  for (auto peek : {OutputPeephole::previous_cell, OutputPeephole::current_cell}) {
    ConvLstmConfig cfg{2, 4, 3, 2, 2};
    cfg.output_peephole = peek;
    auto s = convlstm_init<double>(cfg, 17);
    std::mt19937_64 rng(17);
    // peepholes start at zero; move them off so their gradients are exercised
    for (auto& e : s.entries())
      if (e.name.find("W_c") != std::string::npos) e.var.mutable_value() = oracle::random_tensor(e.var.shape(), rng, -0.5, 0.5);
    std::vector<TD> frames;
    for (int t = 0; t < 3; ++t) frames.push_back(oracle::random_tensor(Shape{1, 2, 8, 8}, rng));
    const auto w = oracle::random_tensor(Shape{1, 2, 8, 8}, rng);
    const CellOptions opt{peek};
    auto run = [&] {
      std::vector<VD> seq(frames.begin(), frames.end());
      return weighted_sum(temporal_forward(seq, s, cfg, opt), w);
    };

    s.zero_grad();
    backward(run());
    std::size_t probed = 0;
    for (auto& e : s.entries()) {
      const auto analytic = e.var.grad();
      auto& value = e.var.mutable_value();
      const auto numeric = oracle::finite_diff(
          [&](const TD& probe) {
            const TD saved = value;
            value = probe;
            NoGradGuard ng;
            const double out = run().value().item();
            value = saved;
            return out;
          },
          value);
      EXPECT_LT(oracle::rel_err(analytic, numeric), 1e-3) << e.name;
      probed += value.size();
    }
    EXPECT_EQ(probed, 2082u);
  }
}
