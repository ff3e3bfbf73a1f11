// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "dynsparse/optim.hpp"
#include "oracles.hpp"

using namespace dynsparse;

namespace {

Model tiny_model(std::size_t in, std::size_t out, std::size_t block_size,
                 double sparsity, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.layer_widths = {in, out};
  cfg.sparse_layers = {0};
  cfg.block_size = block_size;
  cfg.init_std = 0.5;
  Rng rng(seed);
  return init_model(cfg, sparsity, rng);
}

std::vector<LayerGrad> grads_like(const Model& m, Rng& rng) {
  std::vector<LayerGrad> g;
  for (const auto& l : m.layers) {
    LayerGrad lg;
    for (std::size_t i = 0; i < l.weight.values().size(); ++i) lg.weight.push_back(rng.normal());
    for (std::size_t i = 0; i < l.bias.size(); ++i) lg.bias.push_back(rng.normal());
    g.push_back(std::move(lg));
  }
  return g;
}

/// Textbook scalar AdamW with bias correction.
struct ScalarAdam {
  double w, m = 0, v = 0;
  int t = 0;
  void step(double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * (mh / (std::sqrt(vh) + eps) + wd * w);
  }
};

}  // namespace

TEST(LrSchedule, WarmupThenLinearDecay) {
  const LrSchedule s{1.0, 10, 110};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(s, 10), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 60), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(s, 110), 0.0);
  EXPECT_THROW(lr_at(s, 111), RangeError);
  EXPECT_THROW((LrSchedule{1.0, 110, 110}.validate()), ConfigError);
}

TEST(LrSchedule, PeakIsMaximumAndShapeIsMonotone) {
  const LrSchedule s{3e-3, 37, 1000};
  double prev = -1;
  for (std::uint64_t t = 0; t <= 37; ++t) {
    EXPECT_GT(lr_at(s, t), prev);
    prev = lr_at(s, t);
  }
  for (std::uint64_t t = 38; t <= 1000; ++t) {
    EXPECT_LT(lr_at(s, t), prev);
    prev = lr_at(s, t);
  }
}

TEST(ClipGradients, ScalesToThreshold) {
  std::vector<LayerGrad> g(1);
  g[0].weight = {3.0};
  g[0].bias = {4.0};
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(g[0].weight[0], 0.6);
  EXPECT_DOUBLE_EQ(g[0].bias[0], 0.8);
  EXPECT_DOUBLE_EQ(clip_gradients(g, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(g[0].weight[0], 0.6);
  g[0].bias[0] = NAN;
  EXPECT_THROW(clip_gradients(g, 1.0), DivergenceError);
}

TEST(AdamStep, SingleStepExample) {
  Model m = tiny_model(2, 2, 1, 0.0, 1);
  for (double& v : m.layers[0].weight.values()) v = 0.0;
  auto st = OptimState::zeros_like(m);
  std::vector<LayerGrad> g(1);
  g[0].weight.assign(4, 1.0);
  g[0].bias.assign(2, -1.0);
  AdamHyper h;
  h.weight_decay = 0;
  adam_step(m, g, st, h, 0.1);
  for (double v : m.layers[0].weight.values()) EXPECT_DOUBLE_EQ(v, -0.1 / (1 + 1e-6));
  for (double b : m.layers[0].bias) EXPECT_DOUBLE_EQ(b, 0.1 / (1 + 1e-6));
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamStep, MatchesScalarReference) {
  Model m = tiny_model(4, 4, 2, 0.5, 2);
  auto st = OptimState::zeros_like(m);
  const AdamHyper h;
  std::vector<ScalarAdam> ref_w, ref_b;
  for (double v : m.layers[0].weight.values()) ref_w.push_back({v});
  for (double v : m.layers[0].bias) ref_b.push_back({v});
  Rng rng(3);
  for (int t = 1; t <= 50; ++t) {
    const auto g = grads_like(m, rng);
    const double lr = 1e-2 / t;
    adam_step(m, g, st, h, lr);
    for (std::size_t i = 0; i < ref_w.size(); ++i) {
      ref_w[i].step(g[0].weight[i], lr, h.beta1, h.beta2, h.eps, h.weight_decay);
    }
    for (std::size_t i = 0; i < ref_b.size(); ++i) {
      ref_b[i].step(g[0].bias[i], lr, h.beta1, h.beta2, h.eps, 0.0);
    }
  }
  for (std::size_t i = 0; i < ref_w.size(); ++i) {
    EXPECT_NEAR(m.layers[0].weight.values()[i], ref_w[i].w, 1e-12);
  }
  for (std::size_t i = 0; i < ref_b.size(); ++i) {
    EXPECT_NEAR(m.layers[0].bias[i], ref_b[i].w, 1e-12);
  }
}

TEST(AdamStep, FrozenAndUntrainableParametersAreUntouched) {
  Model m = tiny_model(4, 4, 1, 0.0, 4);
  auto& layer = m.layers[0];
  layer.frozen.assign(layer.weight.values().size(), 0);
  layer.frozen[0] = layer.frozen[5] = 1;
  const Model before = m;
  auto st = OptimState::zeros_like(m);
  Rng rng(5);
  GroupLassoConfig lasso{0.5};
  adam_step(m, grads_like(m, rng), st, AdamHyper{}, 0.1, lasso);
  for (std::size_t i = 0; i < layer.frozen.size(); ++i) {
    if (layer.frozen[i]) {
      EXPECT_EQ(layer.weight.values()[i], before.layers[0].weight.values()[i]);
      EXPECT_EQ(st.layers[0].m_weight[i], 0.0);
    } else {
      EXPECT_NE(layer.weight.values()[i], before.layers[0].weight.values()[i]);
    }
  }
  layer.trainable = false;
  const Model snap = m;
  adam_step(m, grads_like(m, rng), st, AdamHyper{}, 0.1);
  EXPECT_EQ(m.layers[0].weight, snap.layers[0].weight);
  EXPECT_EQ(m.layers[0].bias, snap.layers[0].bias);
}

TEST(AdamStep, GroupLassoReplacesWeightDecayOnSparseLayers) {
  Model a = tiny_model(4, 4, 2, 0.0, 6);
  Model b = a;
  auto sa = OptimState::zeros_like(a);
  auto sb = OptimState::zeros_like(b);
  std::vector<LayerGrad> zero(1);
  zero[0].weight.assign(a.layers[0].weight.values().size(), 0.0);
  zero[0].bias.assign(4, 0.0);
  const GroupLassoConfig lasso{0.3, 0.02, 1e-6};
  AdamHyper h;
  h.weight_decay = 0.5;  // must be ignored
  adam_step(a, zero, sa, h, 0.1, lasso);

  std::vector<double> delta(b.layers[0].weight.values().size(), 0.0);
  group_lasso_adjust(delta, b.layers[0].weight, lasso, 0.1);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    EXPECT_NEAR(a.layers[0].weight.values()[i],
                b.layers[0].weight.values()[i] + delta[i], 1e-15);
  }
}

TEST(GroupLasso, WorkedExamples) {
  // One 1x1 block holding 3: shrink = 3 / sqrt(9) = 1.
  SparsityMask m1({1, 1}, 1, {{0, 0}});
  BlockSparseMatrix w1(m1, {3.0});
  std::vector<double> d1{0.0};
  group_lasso_adjust(d1, w1, {1.0, 1.0, 0.0}, 1.0);
  EXPECT_DOUBLE_EQ(d1[0], -1.0);

  // One 2x2 block [1, 2; 0, 2]: norm 3, factor sqrt(2).
  SparsityMask m2({2, 2}, 2, {{0, 0}});
  BlockSparseMatrix w2(m2, {1.0, 2.0, 0.0, 2.0});
  std::vector<double> d2(4, 0.0);
  group_lasso_adjust(d2, w2, {1.0, 1.0, 0.0}, 1.0);
  const double r2 = std::sqrt(2.0);
  EXPECT_DOUBLE_EQ(d2[0], -r2 / 3);
  EXPECT_DOUBLE_EQ(d2[1], -2 * r2 / 3);
  EXPECT_DOUBLE_EQ(d2[2], 0.0);
  EXPECT_DOUBLE_EQ(d2[3], -2 * r2 / 3);

  std::vector<double> none(4, 0.0);
  group_lasso_adjust(none, w2, {0.0}, 1.0);
  for (double v : none) EXPECT_EQ(v, 0.0);
  std::vector<double> wrong(3);
  EXPECT_THROW(group_lasso_adjust(wrong, w2, {1.0}, 1.0), DimensionError);
}

TEST(GroupLasso, ShrinkIsScaledPenaltyGradient) {
  Model m = tiny_model(8, 8, 2, 0.5, 7);
  auto& w = m.layers[0].weight;
  const GroupLassoConfig cfg{0.7, 0.02, 1e-6};
  const double lr = 0.3;
  std::vector<double> delta(w.values().size(), 0.0);
  group_lasso_adjust(delta, w, cfg, lr);
  const double pre = lr * cfg.lambda_group * cfg.w_std * std::sqrt(2.0);
  const double h = 1e-6;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double keep = w.values()[i];
    w.values()[i] = keep + h;
    const double up = group_lasso_penalty(w, cfg.eps);
    w.values()[i] = keep - h;
    const double down = group_lasso_penalty(w, cfg.eps);
    w.values()[i] = keep;
    EXPECT_NEAR(-pre * (up - down) / (2 * h), delta[i], 1e-9);
  }
}

TEST(ResetMoments, ZeroesOnlyNamedBlocks) {
  Model m = tiny_model(4, 4, 2, 0.0, 8);
  auto st = OptimState::zeros_like(m);
  Rng rng(9);
  adam_step(m, grads_like(m, rng), st, AdamHyper{}, 0.1);
  const Model before = m;
  const auto st_before = st;
  const std::vector<BlockCoord> target{{1, 0}};
  reset_moments(m, st, 0, target);
  const auto& mask = m.layers[0].weight.mask();
  for (std::size_t k = 0; k < mask.size(); ++k) {
    const bool hit = mask.blocks()[k] == BlockCoord{1, 0};
    for (std::size_t e = k * 4; e < k * 4 + 4; ++e) {
      if (hit) {
        EXPECT_EQ(m.layers[0].weight.values()[e], 0.0);
        EXPECT_EQ(st.layers[0].m_weight[e], 0.0);
        EXPECT_EQ(st.layers[0].v_weight[e], 0.0);
      } else {
        EXPECT_EQ(m.layers[0].weight.values()[e], before.layers[0].weight.values()[e]);
        EXPECT_EQ(st.layers[0].m_weight[e], st_before.layers[0].m_weight[e]);
      }
    }
  }
  auto sparse = tiny_model(4, 4, 2, 0.5, 10);
  auto sst = OptimState::zeros_like(sparse);
  const auto inactive = sparse.layers[0].weight.mask().complement();
  EXPECT_THROW(reset_moments(sparse, sst, 0, std::vector{inactive.front()}), MaskError);
}

TEST(RealignState, AgreesWithCoordinateMapOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Model m = tiny_model(8, 8, 2, 0.5, 100 + trial);
    auto st = OptimState::zeros_like(m);
    adam_step(m, grads_like(m, rng), st, AdamHyper{}, 0.1);
    auto& layer = m.layers[0];
    layer.frozen.assign(layer.weight.values().size(), 0);
    for (auto& f : layer.frozen) f = rng.uniform() < 0.3;

    using Entry = std::tuple<double, double, double, std::uint8_t>;
    std::map<std::pair<std::size_t, std::size_t>, Entry> oracle;
    const auto& om = layer.weight.mask();
    for (std::size_t k = 0; k < om.size(); ++k) {
      for (std::size_t e = 0; e < 4; ++e) {
        const std::size_t i = om.blocks()[k].row * 2 + e / 2;
        const std::size_t j = om.blocks()[k].col * 2 + e % 2;
        const std::size_t idx = k * 4 + e;
        oracle[{i, j}] = {layer.weight.values()[idx], st.layers[0].m_weight[idx],
                          st.layers[0].v_weight[idx], layer.frozen[idx]};
      }
    }
    const SparsityMask next = random_mask({8, 8}, 2, 0.5, rng);
    realign_state(m, st, 0, next);
    audit_alignment(m, st);
    ASSERT_EQ(layer.weight.mask(), next);
    for (std::size_t k = 0; k < next.size(); ++k) {
      for (std::size_t e = 0; e < 4; ++e) {
        const std::size_t i = next.blocks()[k].row * 2 + e / 2;
        const std::size_t j = next.blocks()[k].col * 2 + e % 2;
        const std::size_t idx = k * 4 + e;
        const auto it = oracle.find({i, j});
        const Entry want = it == oracle.end() ? Entry{0, 0, 0, 0} : it->second;
        EXPECT_EQ((Entry{layer.weight.values()[idx], st.layers[0].m_weight[idx],
                         st.layers[0].v_weight[idx], layer.frozen[idx]}),
                  want);
      }
    }
  }
}

TEST(AuditAlignment, DetectsMismatch) {
  Model m = tiny_model(4, 4, 2, 0.5, 12);
  auto st = OptimState::zeros_like(m);
  audit_alignment(m, st);
  st.layers[0].m_weight.pop_back();
  EXPECT_THROW(audit_alignment(m, st), MaskError);
}
