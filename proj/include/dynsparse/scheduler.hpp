// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_SCHEDULER_HPP
#define DYNSPARSE_SCHEDULER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace dynsparse {

enum class Realloc { random, gradient };

inline const char* to_string(Realloc r) noexcept {
  return r == Realloc::random ? "random" : "gradient";
}

struct DynSparseConfig {
  double sparsity = 0.9;
  /// Number of training segments n; updates happen on the n - 1 interior
  /// boundaries floor(j T / n), j = 1 .. n - 1.
  std::size_t updates = 40;
  double max_pruning_ratio = 0.5;
  std::size_t block_size = 1;
  BlockNorm norm = BlockNorm::l2;
  Realloc realloc = Realloc::random;
  std::uint64_t total_steps = 20000;

  void validate() const {
    if (!(sparsity >= 0.0 && sparsity < 1.0)) {
      throw ConfigError("DynSparseConfig: sparsity must lie in [0, 1)");
    }
    if (updates < 1) throw ConfigError("DynSparseConfig: updates must be >= 1");
    if (total_steps < updates) {
      throw ConfigError("DynSparseConfig: fewer steps than update segments");
    }
    if (!(max_pruning_ratio >= 0.0 && max_pruning_ratio <= 1.0)) {
      throw ConfigError("DynSparseConfig: max_pruning_ratio must lie in [0, 1]");
    }
    if (block_size == 0) throw ConfigError("DynSparseConfig: block_size >= 1");
  }
};

/// Steps after which sparsity update k = j - 1 is applied.
inline std::vector<std::uint64_t> update_steps(const DynSparseConfig& cfg) {
  std::vector<std::uint64_t> steps;
  for (std::size_t j = 1; j < cfg.updates; ++j) {
    steps.push_back(j * cfg.total_steps / cfg.updates);
  }
  return steps;
}

/// Cosine-decayed pruning ratio p_r * (1 + cos(pi k / n)) / 2.
inline double pruning_ratio_at(const DynSparseConfig& cfg, std::size_t k) {
  if (k >= cfg.updates) {
    throw RangeError("pruning_ratio_at: update index " + std::to_string(k) +
                     " >= " + std::to_string(cfg.updates));
  }
  const double phase = std::numbers::pi * static_cast<double>(k) /
                       static_cast<double>(cfg.updates);
  return cfg.max_pruning_ratio * 0.5 * (1.0 + std::cos(phase));
}

struct PruneResult {
  std::vector<BlockCoord> pruned;  // sorted
  SparsityMask surviving;
};

/// Removes the floor(ratio |active|) blocks with the smallest L^p norm. Equal
/// norms are broken by coordinate order, lower coordinate pruned first.
inline PruneResult prune_step(const BlockSparseMatrix& w, double ratio,
                              BlockNorm p) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw RangeError("prune_step: ratio must lie in [0, 1]");
  }
  const auto blocks = w.mask().blocks();
  const auto count = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(blocks.size())));
  if (count >= blocks.size()) {
    throw DegenerateSparsityError("prune_step: ratio " + std::to_string(ratio) +
                                  " would empty the mask");
  }
  if (count == 0) return {{}, w.mask()};

  std::vector<std::pair<double, std::size_t>> order(blocks.size());
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    order[k] = {block_norm(w.block(k), p), k};
  }
  // Block index order equals coordinate order, so pair comparison gives the
  // deterministic tie-break.
  std::partial_sort(order.begin(), order.begin() + count, order.end());

  std::vector<std::uint8_t> drop(blocks.size(), 0);
  for (std::size_t r = 0; r < count; ++r) drop[order[r].second] = 1;
  PruneResult out;
  std::vector<BlockCoord> keep;
  keep.reserve(blocks.size() - count);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    (drop[k] ? out.pruned : keep).push_back(blocks[k]);
  }
  out.surviving =
      SparsityMask(w.mask().shape(), w.mask().block_size(), std::move(keep));
  return out;
}

/// Uniform sample without replacement from the inactive blocks of `mask`.
inline std::vector<BlockCoord> grow_random(const SparsityMask& mask,
                                           std::size_t count, Rng& rng) {
  if (count == 0) return {};
  const auto pool = mask.complement();
  if (count > pool.size()) {
    throw DegenerateSparsityError("grow_random: " + std::to_string(count) +
                                  " requested, " + std::to_string(pool.size()) +
                                  " inactive");
  }
  std::vector<BlockCoord> out;
  out.reserve(count);
  for (std::size_t i : rng.sample(pool.size(), count)) out.push_back(pool[i]);
  std::sort(out.begin(), out.end());
  return out;
}

/// Inactive blocks with the largest L1 norm of the dense gradient. Ties go to
/// the lower coordinate.
inline std::vector<BlockCoord> grow_gradient(const SparsityMask& mask,
                                             std::size_t count,
                                             const DenseMatrix& dense_grad) {
  if (dense_grad.shape() != mask.shape()) {
    throw DimensionError("grow_gradient: gradient " +
                         to_string(dense_grad.shape()) + " vs mask " +
                         to_string(mask.shape()));
  }
  if (count == 0) return {};
  const auto pool = mask.complement();
  if (count > pool.size()) {
    throw DegenerateSparsityError("grow_gradient: " + std::to_string(count) +
                                  " requested, " + std::to_string(pool.size()) +
                                  " inactive");
  }
  const std::size_t bs = mask.block_size();
  std::vector<std::pair<double, std::size_t>> score(pool.size());
  for (std::size_t q = 0; q < pool.size(); ++q) {
    double acc = 0.0;
    for (std::size_t r = 0; r < bs; ++r) {
      for (std::size_t c = 0; c < bs; ++c) {
        acc += std::abs(dense_grad(pool[q].row * bs + r, pool[q].col * bs + c));
      }
    }
    score[q] = {-acc, q};
  }
  std::partial_sort(score.begin(), score.begin() + count, score.end());
  std::vector<BlockCoord> out;
  out.reserve(count);
  for (std::size_t r = 0; r < count; ++r) out.push_back(pool[score[r].second]);
  std::sort(out.begin(), out.end());
  return out;
}

struct LayerUpdate {
  std::size_t layer = 0;
  std::vector<BlockCoord> pruned;
  std::vector<BlockCoord> grown;
  /// |pruned here ∩ grown at the previous update|
  std::size_t pruned_were_new = 0;

  bool operator==(const LayerUpdate&) const = default;
};

struct UpdateRecord {
  std::size_t k = 0;
  std::uint64_t step = 0;
  double pruning_ratio = 0.0;
  std::vector<LayerUpdate> layers;

  bool operator==(const UpdateRecord&) const = default;
};

inline std::size_t sorted_intersection_size(std::span<const BlockCoord> a,
                                            std::span<const BlockCoord> b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

/// Sparsity update k on every sparse layer: prune by L^p norm with the cosine
/// ratio, grow the same number of blocks, and start the grown blocks with
/// zero weights and zero Adam moments.
///
/// Gradient re-allocation needs `grads` carrying dense weight gradients for
/// the sparse layers. `previous` is the record of update k - 1, if any.
inline UpdateRecord dynsparse_update(Model& model, OptimState& state,
                                     const DynSparseConfig& cfg, std::size_t k,
                                     Rng& rng,
                                     const std::vector<LayerGrad>* grads = nullptr,
                                     const UpdateRecord* previous = nullptr) {
  UpdateRecord rec;
  rec.k = k;
  rec.pruning_ratio = pruning_ratio_at(cfg, k);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Layer& layer = model.layers[l];
    if (!layer.sparse) continue;
    LayerUpdate lu;
    lu.layer = l;
    PruneResult pr = prune_step(layer.weight, rec.pruning_ratio, cfg.norm);
    if (!pr.pruned.empty()) {
      const std::size_t count = pr.pruned.size();
      if (cfg.realloc == Realloc::random) {
        lu.grown = grow_random(pr.surviving, count, rng);
      } else {
        if (!grads || l >= grads->size() || !(*grads)[l].dense_weight) {
          throw ConfigError(
              "dynsparse_update: gradient re-allocation needs dense gradients");
        }
        lu.grown = grow_gradient(pr.surviving, count, *(*grads)[l].dense_weight);
      }
      std::vector<BlockCoord> next(pr.surviving.blocks().begin(),
                                   pr.surviving.blocks().end());
      next.insert(next.end(), lu.grown.begin(), lu.grown.end());
      SparsityMask new_mask(layer.weight.mask().shape(),
                            layer.weight.mask().block_size(), std::move(next));
      realign_state(model, state, l, new_mask);
      reset_moments(model, state, l, lu.grown);
      lu.pruned = std::move(pr.pruned);
      if (previous) {
        for (const auto& pl : previous->layers) {
          if (pl.layer == l) {
            lu.pruned_were_new = sorted_intersection_size(lu.pruned, pl.grown);
          }
        }
      }
    }
    rec.layers.push_back(std::move(lu));
  }
  return rec;
}

}  // namespace dynsparse

#endif  // DYNSPARSE_SCHEDULER_HPP
