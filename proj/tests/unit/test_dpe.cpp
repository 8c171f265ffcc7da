#include <doctest.h>

#include "cases.hpp"
#include "dmae/dpe.hpp"

using namespace dmae;
using dmae::testing::TestRng;
using dmae::testing::random_tensor;

namespace {

BlockShape embedding_shape(std::size_t n, std::size_t len) {
  BlockShape shape;
  shape.in_channels = shape.out_channels = n;
  shape.length = len;
  shape.groups = 2;
  shape.kernel_sizes = {2, 3, 3};
  return shape;
}

// Every block parameter zero and batch-norm shift `c`: each unit emits the
// constant after normalisation, and fusing three equal maps returns it.
void stub_constant(DynamicPositionalEmbedding<double>& dpe, double c) {
  std::vector<Parameter<double>*> params;
  dpe.collect(params);
  for (auto* p : params) p->value.zero();
  for (auto& beta : dpe.block.bn_beta) beta.value.fill(c);
}

}  // namespace

TEST_CASE("stubbed generator fills masked entries") {
  TestRng rng(1);
  DynamicPositionalEmbedding<double> dpe(embedding_shape(2, 3), 0.01, rng);
  stub_constant(dpe, 7.0);
  const Tensor<double> x({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor<double> sub({1, 2, 3}, {1, 0, 1, 0, 0, 1});
  Graph<double> g;
  ForwardContext<double> ctx{g, false, false, false, nullptr};
  const auto y = g.value(dpe.embed(ctx, g.constant(x), sub, sub, nullptr));
  const Tensor<double> expect({1, 2, 3}, {1, 7, 3, 7, 7, 6});
  REQUIRE(y.shape() == expect.shape());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("fully kept and fully masked windows") {
  TestRng rng(2);
  DynamicPositionalEmbedding<double> dpe(embedding_shape(3, 8), 0.01, rng);
  const auto x = random_tensor({2, 3, 8}, rng);
  const Tensor<double> ones(Shape{2, 3, 8}, 1.0), zeros(Shape{2, 3, 8});
  Graph<double> g;
  ForwardContext<double> ctx{g, false, false, false, nullptr};
  const auto noise = dpe.draw_noise(x.shape(), rng);
  CHECK(g.value(dpe.embed(ctx, g.constant(x), ones, ones, &noise)) == x);

  const auto generated = g.value(dpe.block.forward(ctx, g.constant(zeros)));
  CHECK(g.value(dpe.embed(ctx, g.constant(x), ones, zeros, nullptr)) == generated);
}

TEST_CASE("generated values vary with position") {
  TestRng rng(3);
  DynamicPositionalEmbedding<double> dpe(embedding_shape(2, 10), 0.01, rng);
  const auto x = random_tensor({1, 2, 10}, rng);
  const Tensor<double> zeros(Shape{1, 2, 10});
  Tensor<double> sub(Shape{1, 2, 10}, 1.0);
  sub.at(0, 0, 2) = sub.at(0, 0, 7) = sub.at(0, 1, 2) = 0.0;
  Graph<double> g;
  ForwardContext<double> ctx{g, false, false, false, nullptr};
  const auto y = g.value(dpe.embed(ctx, g.constant(x), sub, sub, nullptr));
  CHECK(y.at(0, 0, 2) != y.at(0, 0, 7));
  CHECK(y.at(0, 0, 2) != y.at(0, 1, 2));
}

TEST_CASE("hard-coded token") {
  const Tensor<double> x({1, 1, 4}, {1, 2, 3, 4});
  Graph<double> g;
  CHECK(g.value(hard_code_embedding(g, g.constant(x), Tensor<double>(Shape{1, 1, 4}, 1.0), 0.0)) == x);
  CHECK(g.value(hard_code_embedding(g, g.constant(x), Tensor<double>(Shape{1, 1, 4}), 0.0)) ==
        Tensor<double>(Shape{1, 1, 4}));
  CHECK(g.value(hard_code_embedding(g, g.constant(x), Tensor<double>({1, 1, 4}, {1, 0, 0, 1}), -1.0)) ==
        Tensor<double>({1, 1, 4}, {1, -1, -1, 4}));
}

TEST_CASE("a submask that exceeds the mask is rejected") {
  const Tensor<double> mask({1, 2}, {1, 0}), sub({1, 2}, {1, 1});
  try {
    check_submask(mask, sub);
    FAIL("expected a contract error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kContract);
  }
}
