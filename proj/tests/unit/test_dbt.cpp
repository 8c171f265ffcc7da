#include <doctest.h>

#include <cmath>

#include "cases.hpp"
#include "dmae/dbt.hpp"

using namespace dmae;
using dmae::testing::TestRng;
using dmae::testing::random_tensor;

namespace {

struct Eval {
  Graph<double> g;
  ForwardContext<double> ctx{g, false, false, false, nullptr};
  explicit Eval(bool warmup = false) { ctx.warmup = warmup; }
};

}  // namespace

TEST_CASE("single-candidate bank is a static kernel") {
  TestRng rng(1);
  DynamicKernelBank<double> bank("b", 2, 3, 3, 1, 10, 4.0, rng);
  for (int trial = 0; trial < 3; ++trial) {
    Eval e;
    const auto k = e.g.value(bank.aggregate(e.ctx, e.g.constant(random_tensor({2, 3, 10}, rng, -5, 5))));
    const auto& c = bank.candidates.value;
    REQUIRE(k.size() == c.size());
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(k[i] == c[i]);
  }
}

TEST_CASE("warm-up kernel is the candidate mean") {
  TestRng rng(2);
  DynamicKernelBank<double> bank("b", 2, 2, 3, 4, 8, 4.0, rng);
  Eval e(true);
  const auto k = e.g.value(bank.aggregate(e.ctx, e.g.constant(random_tensor({3, 2, 8}, rng))));
  const auto& c = bank.candidates.value;
  const std::size_t per = c.size() / 4;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t j = 0; j < per; ++j) {
      const double mean = (c[j] + c[per + j] + c[2 * per + j] + c[3 * per + j]) / 4.0;
      CHECK(k[b * per + j] == doctest::Approx(mean).epsilon(1e-14));
    }
  }
}

TEST_CASE("rigged attention mixes candidates 0.3 and 0.7") {
  TestRng rng(3);
  const double temperature = 4.0;
  DynamicKernelBank<double> bank("b", 2, 2, 3, 2, 6, temperature, rng);
  bank.proj_weight.value.zero();
  bank.proj_bias.value = Tensor<double>({2}, {temperature * std::log(0.3), temperature * std::log(0.7)});
  Eval e;
  const Var x = e.g.constant(random_tensor({1, 2, 6}, rng));
  const auto alpha = e.g.value(bank.weights(e.ctx, x));
  CHECK(alpha[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(alpha[1] == doctest::Approx(0.7).epsilon(1e-12));
  const auto k = e.g.value(bank.aggregate(e.ctx, x));
  const auto& c = bank.candidates.value;
  const std::size_t per = c.size() / 2;
  for (std::size_t j = 0; j < per; ++j) CHECK(k[j] == doctest::Approx(0.3 * c[j] + 0.7 * c[per + j]).epsilon(1e-12));
}

TEST_CASE("palindrome input gives mirrored branch activations") {
  TestRng rng(4);
  BidirectionalLayer<double> layer("l", 1, 3, 3, 2, 3, 9, 4.0, rng);
  layer.bwd.candidates.value = layer.fwd.candidates.value;
  layer.bwd.proj_weight.value = layer.fwd.proj_weight.value;
  layer.bwd.proj_bias.value = layer.fwd.proj_bias.value;
  const Tensor<double> x({1, 1, 9}, {0.3, -1.0, 2.0, 0.5, 1.5, 0.5, 2.0, -1.0, 0.3});
  Eval e;
  const auto f = e.g.value(layer.forward_branch(e.ctx, e.g.constant(x)));
  const auto b = e.g.value(layer.backward_branch(e.ctx, e.g.constant(x)));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t t = 0; t < 9; ++t) CHECK(f.at(0, c, t) == doctest::Approx(b.at(0, c, 8 - t)).epsilon(1e-12));
  }
}

TEST_CASE("unit with silenced layers passes its input through") {
  TestRng rng(5);
  DbtUnit<double> unit("u", 3, 3, 3, 1, 2, 7, 4.0, rng);
  std::vector<Parameter<double>*> params;
  unit.collect(params);
  for (auto* p : params) p->value.zero();
  const auto x = random_tensor({2, 3, 7}, rng);
  Eval e;
  CHECK(e.g.value(unit.forward(e.ctx, e.g.constant(x))) == x);

  DbtUnit<double> wide("w", 2, 2, 3, 1, 2, 7, 4.0, rng);
  CHECK_FALSE(wide.residual_weight.has_value());
  DbtUnit<double> proj("p", 2, 4, 3, 1, 2, 7, 4.0, rng);
  REQUIRE(proj.residual_weight.has_value());
  Eval f;
  const auto y = f.g.value(proj.forward(f.ctx, f.g.constant(random_tensor({2, 2, 7}, rng))));
  CHECK(y.shape() == Shape{2, 4, 7});
}

TEST_CASE("scale fusion against a scalar evaluation") {
  // h_s = 2, h_a = 2, T = 1, one sample.
  const double h[3][2] = {{0.5, -1.0}, {2.0, 0.25}, {-0.75, 1.5}};
  const double wg[2][2] = {{0.3, -0.2}, {0.1, 0.4}};
  const double wh[2][2] = {{-0.5, 0.6}, {0.2, 0.7}};
  const double v[2] = {1.3, -0.8};
  const double gamma = 2.0;
  double ref[2] = {0, 0};
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 2; ++c) ref[c] += h[i][c] / 3.0;
  }
  double e[3];
  for (int i = 0; i < 3; ++i) {
    e[i] = 0.0;
    for (int a = 0; a < 2; ++a) {
      double z = 0.0;
      for (int c = 0; c < 2; ++c) z += wg[c][a] * ref[c] + wh[c][a] * h[i][c];
      e[i] += v[a] * std::tanh(z);
    }
  }
  const double norm = std::exp(e[0] / gamma) + std::exp(e[1] / gamma) + std::exp(e[2] / gamma);
  double expected[2] = {0, 0};
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 2; ++c) expected[c] += std::exp(e[i] / gamma) / norm * h[i][c];
  }

  Graph<double> g;
  std::vector<Var> scales;
  for (int i = 0; i < 3; ++i) scales.push_back(g.constant(Tensor<double>({1, 2, 1}, {h[i][0], h[i][1]})));
  const auto y = ops::asf_fuse<double>(g, scales, g.constant(Tensor<double>({2, 2}, {0.3, -0.2, 0.1, 0.4})),
                                       g.constant(Tensor<double>({2, 2}, {-0.5, 0.6, 0.2, 0.7})),
                                       g.constant(Tensor<double>({2}, {1.3, -0.8})), gamma, false);
  CHECK(g.value(y)[0] == doctest::Approx(expected[0]).epsilon(1e-12));
  CHECK(g.value(y)[1] == doctest::Approx(expected[1]).epsilon(1e-12));

  Tensor<double> alpha;
  const auto mean = ops::asf_fuse<double>(g, scales, g.constant(Tensor<double>({2, 2}, 0.9)),
                                          g.constant(Tensor<double>({2, 2}, -0.4)),
                                          g.constant(Tensor<double>({2})), gamma, false, &alpha);
  for (int c = 0; c < 2; ++c) {
    CHECK(g.value(mean)[c] == doctest::Approx((h[0][c] + h[1][c] + h[2][c]) / 3.0).epsilon(1e-12));
  }
  for (double a : alpha.values()) CHECK(a == doctest::Approx(1.0 / 3.0));

  const std::vector<Var> same(3, scales[1]);
  const auto one = ops::asf_fuse<double>(g, same, g.constant(Tensor<double>({2, 2}, 0.9)),
                                         g.constant(Tensor<double>({2, 2}, -0.4)),
                                         g.constant(Tensor<double>({2}, {1.0, 2.0})), gamma, false);
  CHECK(g.value(one)[0] == doctest::Approx(h[1][0]).epsilon(1e-12));
  CHECK(g.value(one)[1] == doctest::Approx(h[1][1]).epsilon(1e-12));
}

TEST_CASE("block output shape with either fusion and repeatable evaluation") {
  TestRng rng(6);
  for (bool attention : {true, false}) {
    BlockShape shape;
    shape.in_channels = 3;
    shape.out_channels = 5;
    shape.length = 12;
    shape.groups = 2;
    shape.scale_attention = attention;
    DbtBlock<double> block("blk", shape, rng);
    const auto x = random_tensor({2, 3, 12}, rng);
    Eval a, b;
    const auto ya = a.g.value(block.forward(a.ctx, a.g.constant(x)));
    const auto yb = b.g.value(block.forward(b.ctx, b.g.constant(x)));
    CHECK(ya.shape() == Shape{2, 5, 12});
    CHECK(ya == yb);
  }
}
