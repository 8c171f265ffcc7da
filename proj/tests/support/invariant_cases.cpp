#include <array>
#include <cmath>

#include "cases.hpp"
#include "dmae/data.hpp"
#include "dmae/dbt.hpp"
#include "dmae/dpe.hpp"
#include "dmae/model.hpp"
#include "dmae/ops.hpp"
#include "dmae/train.hpp"

namespace dmae::testing {
namespace {

constexpr double kSumTolerance = 1e-10;

Tensor<double> submask_of(const Tensor<double>& mask, TestRng& rng, double drop) {
  std::bernoulli_distribution d(drop);
  Tensor<double> out = mask;
  for (auto& m : out.storage()) {
    if (m != 0.0 && d(rng)) m = 0.0;
  }
  return out;
}

void widen_projection(DynamicKernelBank<double>& bank, TestRng& rng) {
  bank.proj_weight.value = random_tensor(bank.proj_weight.value.shape(), rng, -2.0, 2.0);
  bank.proj_bias.value = random_tensor(bank.proj_bias.value.shape(), rng, -2.0, 2.0);
}

double loss_value(const ReconstructionPair<double>& base, const Tensor<double>& full,
                  const Tensor<double>& masked, const Tensor<double>& x, double m_r) {
  Graph<double> g;
  auto pair = base;
  pair.full = g.constant(full);
  pair.masked = g.constant(masked);
  return g.value(dmae_loss(g, pair, x, m_r))[0];
}

struct LossSetup {
  Tensor<double> x, full, masked;
  ReconstructionPair<double> pair;
  double m_r = 0.0;
};

LossSetup random_loss_setup(TestRng& rng) {
  LossSetup s;
  const Shape shape{random_size(rng, 1, 3), random_size(rng, 1, 3), random_size(rng, 2, 9)};
  s.m_r = std::uniform_real_distribution<double>(0.0, 0.95)(rng);
  s.x = random_tensor(shape, rng);
  s.full = random_tensor(shape, rng);
  s.masked = random_tensor(shape, rng);
  s.pair.mask = random_mask(shape, rng, 0.7);
  s.pair.submask = submask_of(s.pair.mask, rng, 0.4);
  return s;
}

// Sum of the trailing-axis entries of row `row` in a [rows, K] tensor.
double row_sum(const Tensor<double>& w, std::size_t row) {
  double s = 0.0;
  for (std::size_t k = 0; k < w.dim(1); ++k) s += w.at(row, k);
  return s;
}

}  // namespace

std::vector<InvariantCase> invariant_cases() {
  std::vector<InvariantCase> cases;

  cases.push_back({"random submask never exceeds the mask", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto mask = random_mask({random_size(rng, 1, 4), random_size(rng, 1, 6), random_size(rng, 1, 20)},
                                  rng, 0.6);
    const double ratio = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    const auto sub = data::random_submask(mask, ratio, rng);
    for (std::size_t i = 0; i < mask.size(); ++i) require(sub[i] <= mask[i], "submask exceeds mask");
  }});

  cases.push_back({"loss term weights sum to one", [](std::uint64_t seed) {
    TestRng rng(seed);
    const double m_r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto w = loss_weights(m_r);
    require(std::abs(w[0] + w[1] - 1.0) <= 1e-15, "weights do not sum to 1");
    require(std::abs(w[1] / w[0] - m_r) <= 1e-12, "weight ratio differs from m_r");
  }});

  cases.push_back({"loss ignores reconstructions outside its masks", [](std::uint64_t seed) {
    TestRng rng(seed);
    auto s = random_loss_setup(rng);
    const double before = loss_value(s.pair, s.full, s.masked, s.x, s.m_r);
    auto full = s.full, masked = s.masked;
    for (std::size_t i = 0; i < full.size(); ++i) {
      if (s.pair.mask[i] == 0.0) full[i] += 100.0;
      if (s.pair.mask[i] - s.pair.submask[i] == 0.0) masked[i] -= 50.0;
    }
    require(loss_value(s.pair, full, masked, s.x, s.m_r) == before, "loss changed");
  }});

  cases.push_back({"loss gradient vanishes outside its masks", [](std::uint64_t seed) {
    TestRng rng(seed);
    auto s = random_loss_setup(rng);
    Graph<double> g;
    auto pair = s.pair;
    pair.full = g.input(s.full);
    pair.masked = g.input(s.masked);
    g.backward(dmae_loss(g, pair, s.x, s.m_r));
    const auto& gf = g.grad(pair.full);
    const auto& gm = g.grad(pair.masked);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (s.pair.mask[i] == 0.0) require(gf[i] == 0.0, "full-path gradient at a missing entry");
      if (s.pair.mask[i] - s.pair.submask[i] == 0.0) {
        require(gm[i] == 0.0, "masked-path gradient at an entry not removed by masking");
      }
    }
  }});

  cases.push_back({"first loss term is degree-one homogeneous in its residuals", [](std::uint64_t seed) {
    TestRng rng(seed);
    auto s = random_loss_setup(rng);
    s.pair.submask = s.pair.mask;  // isolate the first term by zeroing the second
    s.full = s.x;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (s.pair.mask[i] != 0.0 && random_size(rng, 0, 1)) s.pair.submask[i] = 0.0;
    }
    auto doubled = s.masked;
    for (std::size_t i = 0; i < doubled.size(); ++i) doubled[i] = s.x[i] + 2.0 * (s.masked[i] - s.x[i]);
    auto grad_of = [&](const Tensor<double>& masked) {
      Graph<double> g;
      auto pair = s.pair;
      pair.full = g.constant(s.full);
      pair.masked = g.input(masked);
      const Var loss = dmae_loss(g, pair, s.x, s.m_r);
      g.backward(loss);
      return std::make_pair(g.value(loss)[0], g.grad(pair.masked));
    };
    const auto [l1, g1] = grad_of(s.masked);
    const auto [l2, g2] = grad_of(doubled);
    require(std::abs(l2 - 2.0 * l1) <= 1e-12 * std::max(1.0, l1), "first term did not double");
    require(max_abs_diff(g1, g2) <= 1e-12, "gradient of the first term changed with residual scale");
  }});

  cases.push_back({"imputation metrics ignore values outside their masks", [](std::uint64_t seed) {
    TestRng rng(seed);
    const Shape shape{random_size(rng, 1, 4), random_size(rng, 2, 10)};
    const auto x = random_tensor(shape, rng), recon = random_tensor(shape, rng);
    const auto mask = random_mask(shape, rng, 0.7), known = random_mask(shape, rng, 0.8);
    auto other = recon;
    for (std::size_t i = 0; i < other.size(); ++i) {
      if (mask[i] == 0.0) other[i] += 7.0;
    }
    require(observed_error(x, mask, recon) == observed_error(x, mask, other), "observed error changed");
    other = recon;
    for (std::size_t i = 0; i < other.size(); ++i) {
      if (mask[i] != 0.0 || known[i] == 0.0) other[i] -= 3.0;
    }
    require(missing_error(x, mask, known, recon) == missing_error(x, mask, known, other),
            "missing error changed");
  }});

  cases.push_back({"aggregated kernels are convex combinations of the candidates", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto cin = random_size(rng, 1, 3), len = random_size(rng, 3, 10), groups = random_size(rng, 2, 5);
    DynamicKernelBank<double> bank("bank", random_size(rng, 1, 3), cin, random_size(rng, 1, 5), groups,
                                   len, 1.5, rng);
    widen_projection(bank, rng);
    Graph<double> g;
    ForwardContext<double> ctx{g, false, false, false, nullptr};
    const auto kernels = g.value(bank.aggregate(ctx, g.constant(random_tensor({3, cin, len}, rng, -3, 3))));
    const auto& cand = bank.candidates.value;
    const std::size_t per = cand.size() / groups;
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t e = 0; e < per; ++e) {
        double lo = cand[e], hi = cand[e];
        for (std::size_t i = 1; i < groups; ++i) {
          lo = std::min(lo, cand[i * per + e]);
          hi = std::max(hi, cand[i * per + e]);
        }
        const double v = kernels[b * per + e];
        require(v >= lo - 1e-12 && v <= hi + 1e-12, "aggregated kernel entry outside candidate range");
      }
    }
  }});

  cases.push_back({"kernel and scale attention weights are normalised", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto len = random_size(rng, 3, 10), cin = random_size(rng, 1, 3);
    BlockShape shape;
    shape.in_channels = cin;
    shape.out_channels = random_size(rng, 2, 4);
    shape.kernel_sizes = {random_size(rng, 1, 3), random_size(rng, 2, 4), random_size(rng, 2, 5)};
    shape.dilation = random_size(rng, 1, 4);
    shape.groups = random_size(rng, 2, 5);
    shape.length = len;
    shape.attention_hidden = random_size(rng, 1, 4);
    DbtBlock<double> block("block", shape, rng);
    std::vector<Parameter<double>*> params;
    block.collect(params);
    for (auto* p : params) {
      if (p->name.ends_with(".attn_w") || p->name.ends_with(".v")) {
        p->value = random_tensor(p->value.shape(), rng, -2.0, 2.0);
      }
    }
    Graph<double> g;
    ForwardTrace<double> trace;
    ForwardContext<double> ctx{g, false, false, false, &trace};
    block.forward(ctx, g.constant(random_tensor({2, cin, len}, rng, -2, 2)));
    require(!trace.kernel_weights.empty() && !trace.scale_weights.empty(), "no attention recorded");
    for (const auto& [name, w] : trace.kernel_weights) {
      for (std::size_t b = 0; b < w.dim(0); ++b) {
        require(std::abs(row_sum(w, b) - 1.0) <= kSumTolerance, name + ": kernel weights do not sum to 1");
        for (std::size_t k = 0; k < w.dim(1); ++k) require(w.at(b, k) > 0.0, name + ": weight not positive");
      }
    }
    for (const auto& [name, w] : trace.scale_weights) {
      for (std::size_t b = 0; b < w.dim(0); ++b) {
        for (std::size_t t = 0; t < w.dim(2); ++t) {
          const double s = w.at(b, 0, t) + w.at(b, 1, t) + w.at(b, 2, t);
          require(std::abs(s - 1.0) <= kSumTolerance, name + ": scale weights do not sum to 1");
        }
      }
    }
  }});

  cases.push_back({"warm-up attention is exactly uniform", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto len = random_size(rng, 3, 8);
    BlockShape shape;
    shape.in_channels = 2;
    shape.out_channels = 3;
    shape.groups = random_size(rng, 2, 5);
    shape.length = len;
    shape.kernel_sizes = {2, 3, 4};
    DbtBlock<double> block("block", shape, rng);
    Graph<double> g;
    ForwardTrace<double> trace;
    ForwardContext<double> ctx{g, false, true, false, &trace};
    block.forward(ctx, g.constant(random_tensor({2, 2, len}, rng)));
    for (const auto& [name, w] : trace.kernel_weights) {
      for (double v : w.values()) require(v == 1.0 / static_cast<double>(shape.groups), name + " not uniform");
    }
    for (const auto& [name, w] : trace.scale_weights) {
      for (double v : w.values()) require(v == 1.0 / 3.0, name + " not uniform");
    }
  }});

  cases.push_back({"causal convolution output depends only on the past", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto cin = random_size(rng, 1, 3), k = random_size(rng, 1, 7), d = random_size(rng, 1, 4);
    const std::size_t len = 16;
    const auto x = random_tensor({1, cin, len}, rng);
    const auto w = random_tensor({random_size(rng, 1, 3), cin, k}, rng);
    const auto t0 = random_size(rng, 0, len - 1);
    auto conv = [&](const Tensor<double>& in, ops::Direction dir) {
      Graph<double> g;
      return g.value(ops::causal_conv(g, g.constant(in), g.constant(w), d, dir));
    };
    auto bumped = x;
    for (std::size_t i = 0; i < cin; ++i) bumped.at(0, i, t0) += 1.0;
    for (auto dir : {ops::Direction::kForward, ops::Direction::kBackward}) {
      const auto a = conv(x, dir), b = conv(bumped, dir);
      for (std::size_t o = 0; o < a.dim(1); ++o) {
        for (std::size_t t = 0; t < len; ++t) {
          const bool reachable = dir == ops::Direction::kForward ? t >= t0 : t <= t0;
          if (!reachable) require(a.at(0, o, t) == b.at(0, o, t), "output reached across the time boundary");
        }
      }
    }
  }});

  cases.push_back({"forward branch is causal and backward branch anti-causal", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto len = random_size(rng, 6, 14), cin = random_size(rng, 1, 3);
    BidirectionalLayer<double> layer("layer", cin, 2, random_size(rng, 2, 5), random_size(rng, 1, 3),
                                     random_size(rng, 1, 4), len, 2.0, rng);
    const auto x = random_tensor({1, cin, len}, rng);
    const auto t0 = random_size(rng, 1, len - 2);
    auto bumped = x;
    for (std::size_t i = 0; i < cin; ++i) bumped.at(0, i, t0) += 0.5;
    // With the attention fixed (warm-up), kernels no longer see window statistics.
    auto branch = [&](const Tensor<double>& in, bool forward) {
      Graph<double> g;
      ForwardContext<double> ctx{g, false, true, false, nullptr};
      const Var v = g.constant(in);
      return g.value(forward ? layer.forward_branch(ctx, v) : layer.backward_branch(ctx, v));
    };
    const auto fa = branch(x, true), fb = branch(bumped, true);
    const auto ba = branch(x, false), bb = branch(bumped, false);
    for (std::size_t o = 0; o < fa.dim(1); ++o) {
      for (std::size_t t = 0; t < len; ++t) {
        if (t < t0) require(fa.at(0, o, t) == fb.at(0, o, t), "forward branch saw the future");
        if (t > t0) require(ba.at(0, o, t) == bb.at(0, o, t), "backward branch saw the past");
      }
    }
  }});

  cases.push_back({"positional embedding keeps retained entries bit-for-bit", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto n = random_size(rng, 1, 3), len = random_size(rng, 3, 9);
    BlockShape shape;
    shape.in_channels = shape.out_channels = n;
    shape.kernel_sizes = {2, 3, 3};
    shape.groups = 2;
    shape.length = len;
    shape.attention_hidden = n;
    DynamicPositionalEmbedding<double> dpe(shape, 0.01, rng);
    const auto x = random_tensor({2, n, len}, rng);
    const auto mask = random_mask({2, n, len}, rng, 0.8);
    const auto sub = submask_of(mask, rng, 0.3);
    const bool training = random_size(rng, 0, 1) == 1;
    const auto noise = dpe.draw_noise(x.shape(), rng);
    Graph<double> g;
    ForwardContext<double> ctx{g, training, false, false, nullptr};
    const auto out = g.value(dpe.embed(ctx, g.constant(x), mask, sub, &noise));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (sub[i] == 0.0) continue;
      const double expected = training ? x[i] + noise[i] : x[i];
      require(out[i] == expected, "retained entry altered");
    }
  }});

  cases.push_back({"decoder maps each time step independently", [](std::uint64_t seed) {
    TestRng rng(seed);
    ModelConfig config;
    config.attributes = random_size(rng, 1, 3);
    config.length = random_size(rng, 3, 6);
    config.hidden = random_size(rng, 2, 4);
    config.kernel_sizes = {2, 2, 2};
    config.groups = 2;
    DmaeModel<double> model(config, seed);
    const auto f = random_tensor({1, config.hidden, config.length}, rng);
    const auto t0 = random_size(rng, 0, config.length - 1);
    auto bumped = f;
    for (std::size_t c = 0; c < config.hidden; ++c) bumped.at(0, c, t0) += 1.0;
    auto decode = [&](const Tensor<double>& in) {
      Graph<double> g;
      ForwardContext<double> ctx{g, false, false, false, nullptr};
      return g.value(model.decode(ctx, g.constant(in)));
    };
    const auto a = decode(f), b = decode(bumped);
    for (std::size_t i = 0; i < config.attributes; ++i) {
      for (std::size_t t = 0; t < config.length; ++t) {
        if (t != t0) require(a.at(0, i, t) == b.at(0, i, t), "decoder mixed time steps");
      }
    }
  }});

  cases.push_back({"tempered softmax is a positive distribution", [](std::uint64_t seed) {
    TestRng rng(seed);
    const auto k = random_size(rng, 1, 8);
    const auto scores = random_tensor({k}, rng, -20.0, 20.0);
    const double temp = std::uniform_real_distribution<double>(0.1, 10.0)(rng);
    const auto w = ops::softmax_tempered<double>(scores.values(), temp);
    double s = 0.0;
    for (double v : w) {
      require(v > 0.0, "non-positive weight");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-12, "weights do not sum to 1");
    const auto flat = ops::softmax_tempered<double>(scores.values(), 1e6);
    for (double v : flat) require(std::abs(v - 1.0 / static_cast<double>(k)) < 1e-5, "not near uniform");
  }});

  cases.push_back({"missing-value injection only removes entries", [](std::uint64_t seed) {
    TestRng rng(seed);
    data::MtsWindow w{random_tensor({random_size(rng, 1, 5), random_size(rng, 5, 40)}, rng), {}, 0};
    w.mask = random_mask(w.values.shape(), rng, 0.9);
    data::canonicalize(w);
    const auto pattern = static_cast<data::MissingPattern>(random_size(rng, 0, 2));
    const double ratio = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const auto out = data::inject_missing(w, ratio, pattern, rng, random_size(rng, 1, 6));
    for (std::size_t i = 0; i < w.values.size(); ++i) {
      require(out.mask[i] <= w.mask[i], "an entry was resurrected");
      if (out.mask[i] != 0.0) require(out.values[i] == w.values[i], "a surviving value changed");
      else require(out.values[i] == 0.0, "missing value not canonical");
    }
  }});

  return cases;
}

}  // namespace dmae::testing
