// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_OPTIM_HPP
#define DYNSPARSE_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace dynsparse {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  /// Decoupled (AdamW) weight decay on weight matrices. Biases are not decayed.
  double weight_decay = 0.01;
  /// Global L2 clipping threshold; nullopt disables clipping.
  std::optional<double> clip_global_norm = 1.0;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("AdamHyper: betas must lie in (0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("AdamHyper: eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("AdamHyper: weight_decay < 0");
    if (clip_global_norm && !(*clip_global_norm > 0.0)) {
      throw ConfigError("AdamHyper: clip_global_norm must be > 0");
    }
  }
};

/// Decoupled block-L2 shrinkage on sparse layers.
struct GroupLassoConfig {
  double lambda_group = 0.0;
  double w_std = 0.02;
  double eps = 1e-6;

  bool active() const noexcept { return lambda_group > 0.0; }

  void validate() const {
    if (lambda_group < 0.0 || w_std < 0.0 || eps < 0.0) {
      throw ConfigError("GroupLassoConfig: coefficients must be nonnegative");
    }
  }
};

/// Linear warmup from 0 to peak_lr, then linear decay to 0 at total_steps.
struct LrSchedule {
  double peak_lr = 1e-3;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("LrSchedule: peak_lr must be > 0");
    if (warmup_steps >= total_steps) {
      throw ConfigError("LrSchedule: warmup_steps must be < total_steps");
    }
  }
};

inline double lr_at(const LrSchedule& s, std::uint64_t step) {
  if (step > s.total_steps) {
    throw RangeError("lr_at: step " + std::to_string(step) + " beyond " +
                     std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  }
  return s.peak_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

/// Adam moments aligned entry-for-entry with each layer's weight values and
/// biases, plus the global step counter used for bias correction.
struct OptimState {
  struct LayerState {
    std::vector<double> m_weight, v_weight;
    std::vector<double> m_bias, v_bias;
  };
  std::vector<LayerState> layers;
  std::uint64_t step = 0;

  static OptimState zeros_like(const Model& model) {
    OptimState s;
    for (const auto& l : model.layers) {
      const std::size_t nw = l.weight.values().size();
      s.layers.push_back({std::vector<double>(nw), std::vector<double>(nw),
                          std::vector<double>(l.bias.size()),
                          std::vector<double>(l.bias.size())});
    }
    return s;
  }
};

/// Throws when any moment array is out of step with the model.
inline void audit_alignment(const Model& model, const OptimState& state) {
  if (state.layers.size() != model.layers.size()) {
    throw MaskError("audit: layer count mismatch");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& p = model.layers[l];
    const auto& s = state.layers[l];
    const std::size_t nw = p.weight.values().size();
    if (s.m_weight.size() != nw || s.v_weight.size() != nw ||
        s.m_bias.size() != p.bias.size() || s.v_bias.size() != p.bias.size() ||
        (!p.frozen.empty() && p.frozen.size() != nw)) {
      throw MaskError("audit: layer " + std::to_string(l) + " misaligned");
    }
    for (double v : s.v_weight) {
      if (v < 0.0) throw MaskError("audit: negative second moment");
    }
  }
}

/// Scales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm. Returns g. Dense side gradients are not part of the norm.
inline double clip_gradients(std::vector<LayerGrad>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.weight) sq += v * v;
    for (double v : g.bias) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw DivergenceError("clip_gradients: non-finite gradient");
  }
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.weight) v *= f;
      for (double& v : g.bias) v *= f;
    }
  }
  return norm;
}

/// Adds the decoupled Group Lasso term to an update `delta` of `w`:
///   delta_ij -= lr * lambda * w_std * sqrt(B) * w_ij / sqrt(sum_block w^2 + eps)
/// where the sum runs over the block holding (i, j).
inline void group_lasso_adjust(std::span<double> delta,
                               const BlockSparseMatrix& w,
                               const GroupLassoConfig& cfg, double lr) {
  if (delta.size() != w.values().size()) {
    throw DimensionError("group_lasso_adjust: update not aligned with weight");
  }
  if (cfg.lambda_group == 0.0) return;
  const std::size_t area = w.mask().block_area();
  const double pre = lr * cfg.lambda_group * cfg.w_std *
                     std::sqrt(static_cast<double>(w.block_size()));
  for (std::size_t k = 0; k < w.mask().size(); ++k) {
    const auto blk = w.block(k);
    double sq = 0.0;
    for (double v : blk) sq += v * v;
    const double inv = 1.0 / std::sqrt(sq + cfg.eps);
    for (std::size_t e = 0; e < area; ++e) {
      delta[k * area + e] -= pre * blk[e] * inv;
    }
  }
}

/// The penalty whose gradient group_lasso_adjust applies (up to the
/// lr * lambda * w_std * sqrt(B) prefactor): sum over blocks of
/// sqrt(sum w^2 + eps).
inline double group_lasso_penalty(const BlockSparseMatrix& w, double eps) {
  double total = 0.0;
  for (std::size_t k = 0; k < w.mask().size(); ++k) {
    double sq = 0.0;
    for (double v : w.block(k)) sq += v * v;
    total += std::sqrt(sq + eps);
  }
  return total;
}

/// One bias-corrected AdamW step over all trainable parameters.
///
/// Frozen values keep their parameter and moments untouched. On sparse layers
/// with Group Lasso active the weight decay is replaced by the Group Lasso
/// term, so the two never act on the same layer.
inline void adam_step(Model& model, const std::vector<LayerGrad>& grads,
                      OptimState& state, const AdamHyper& hyper, double lr,
                      const GroupLassoConfig& lasso = {}) {
  if (grads.size() != model.layers.size() ||
      state.layers.size() != model.layers.size()) {
    throw DimensionError("adam_step: gradients/state do not match the model");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);

  auto moment_update = [&](double g, double& m, double& v) {
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
    return (m / c1) / (std::sqrt(v / c2) + hyper.eps);
  };

  std::vector<double> delta;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Layer& layer = model.layers[l];
    if (!layer.trainable) continue;
    auto& st = state.layers[l];
    const auto& g = grads[l];
    auto w = layer.weight.values();
    if (g.weight.size() != w.size() || st.m_weight.size() != w.size()) {
      throw DimensionError("adam_step: layer " + std::to_string(l) +
                           " misaligned");
    }
    const bool lasso_here = layer.sparse && lasso.active();
    const double decay = lasso_here ? 0.0 : hyper.weight_decay;

    delta.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (layer.is_frozen(i)) continue;
      const double u = moment_update(g.weight[i], st.m_weight[i], st.v_weight[i]);
      delta[i] = -lr * (u + decay * w[i]);
    }
    if (lasso_here) {
      group_lasso_adjust(delta, layer.weight, lasso, lr);
      if (!layer.frozen.empty()) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          if (layer.frozen[i]) delta[i] = 0.0;
        }
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double next = w[i] + delta[i];
      if (!std::isfinite(next)) {
        throw DivergenceError("adam_step: non-finite weight in layer " +
                              std::to_string(l));
      }
      w[i] = next;
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      const double u = moment_update(g.bias[i], st.m_bias[i], st.v_bias[i]);
      const double next = layer.bias[i] - lr * u;
      if (!std::isfinite(next)) {
        throw DivergenceError("adam_step: non-finite bias in layer " +
                              std::to_string(l));
      }
      layer.bias[i] = next;
    }
  }
}

/// Zeroes weights and both moments on the given (active) blocks.
inline void reset_moments(Model& model, OptimState& state, std::size_t layer,
                          std::span<const BlockCoord> coords) {
  auto& w = model.layers.at(layer).weight;
  auto& st = state.layers.at(layer);
  const std::size_t area = w.mask().block_area();
  for (const BlockCoord c : coords) {
    const std::size_t k = w.mask().find(c);
    if (k == w.mask().size()) {
      throw MaskError("reset_moments: block (" + std::to_string(c.row) + "," +
                      std::to_string(c.col) + ") not in mask");
    }
    for (std::size_t e = k * area; e < (k + 1) * area; ++e) {
      w.values()[e] = 0.0;
      st.m_weight[e] = 0.0;
      st.v_weight[e] = 0.0;
    }
  }
}

/// Moves one layer's weights, moments and freeze flags onto `new_mask`.
/// Blocks present in both masks keep everything; dropped blocks vanish; new
/// blocks start at zero.
inline void realign_state(Model& model, OptimState& state, std::size_t layer,
                          const SparsityMask& new_mask) {
  Layer& p = model.layers.at(layer);
  auto& st = state.layers.at(layer);
  const SparsityMask& old_mask = p.weight.mask();
  if (old_mask.shape() != new_mask.shape() ||
      old_mask.block_size() != new_mask.block_size()) {
    throw MaskError("realign_state: masks differ in shape or block size");
  }
  const std::size_t area = new_mask.block_area();
  const std::size_t n = new_mask.size() * area;
  std::vector<double> values(n), m(n), v(n);
  std::vector<std::uint8_t> frozen(p.frozen.empty() ? 0 : n);

  const auto old_blocks = old_mask.blocks();
  const auto new_blocks = new_mask.blocks();
  std::size_t i = 0;
  for (std::size_t k = 0; k < new_blocks.size(); ++k) {
    while (i < old_blocks.size() && old_blocks[i] < new_blocks[k]) ++i;
    if (i < old_blocks.size() && old_blocks[i] == new_blocks[k]) {
      for (std::size_t e = 0; e < area; ++e) {
        values[k * area + e] = p.weight.values()[i * area + e];
        m[k * area + e] = st.m_weight[i * area + e];
        v[k * area + e] = st.v_weight[i * area + e];
        if (!frozen.empty()) frozen[k * area + e] = p.frozen[i * area + e];
      }
    }
  }
  p.weight = BlockSparseMatrix(new_mask, std::move(values));
  st.m_weight = std::move(m);
  st.v_weight = std::move(v);
  p.frozen = std::move(frozen);
}

}  // namespace dynsparse

#endif  // DYNSPARSE_OPTIM_HPP
