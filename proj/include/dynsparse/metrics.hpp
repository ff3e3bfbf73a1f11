// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_METRICS_HPP
#define DYNSPARSE_METRICS_HPP

#include <charconv>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "nn.hpp"
#include "scheduler.hpp"

namespace dynsparse {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

/// Union mask and activity counts of every sparse layer, sampled whenever the
/// masks may have changed (start of training and after each update).
class ExplorationState {
 public:
  struct LayerTrack {
    std::size_t block_rows = 0;
    std::size_t block_cols = 0;
    std::vector<std::uint8_t> ever_active;
    std::vector<std::uint32_t> active_count;
    std::size_t union_size = 0;
  };

  ExplorationState() = default;

  /// Tracks every sparse layer of `model` and takes the t = 0 sample.
  explicit ExplorationState(const Model& model) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      if (!model.layers[l].sparse) continue;
      const auto& mask = model.layers[l].weight.mask();
      LayerTrack t;
      t.block_rows = mask.block_rows();
      t.block_cols = mask.block_cols();
      t.ever_active.assign(mask.total_blocks(), 0);
      t.active_count.assign(mask.total_blocks(), 0);
      layers_.emplace(l, std::move(t));
    }
    observe(model);
  }

  void observe(const Model& model) {
    for (auto& [l, t] : layers_) {
      const auto& mask = model.layers.at(l).weight.mask();
      for (const BlockCoord c : mask.blocks()) {
        const std::size_t i = mask.linear(c);
        if (!t.ever_active[i]) {
          t.ever_active[i] = 1;
          ++t.union_size;
        }
        ++t.active_count[i];
      }
    }
    ++samples_;
  }

  std::size_t samples() const noexcept { return samples_; }

  std::vector<std::size_t> layer_ids() const {
    std::vector<std::size_t> ids;
    for (const auto& [l, t] : layers_) ids.push_back(l);
    return ids;
  }

  const LayerTrack& track(std::size_t layer) const {
    auto it = layers_.find(layer);
    if (it == layers_.end()) {
      throw RangeError("ExplorationState: layer " + std::to_string(layer) +
                       " is not tracked");
    }
    return it->second;
  }

 private:
  std::map<std::size_t, LayerTrack> layers_;
  std::size_t samples_ = 0;
};

/// Fraction of the dense weight grid that has been active at any sample.
inline double dof_explored(const ExplorationState& state, std::size_t layer) {
  const auto& t = state.track(layer);
  return static_cast<double>(t.union_size) /
         static_cast<double>(t.ever_active.size());
}

/// Per-block fraction of samples at which the block was active, row-major
/// over the block grid.
inline std::vector<double> activity_average(const ExplorationState& state,
                                            std::size_t layer) {
  const auto& t = state.track(layer);
  if (state.samples() == 0) {
    throw RangeError("activity_average: no samples taken");
  }
  std::vector<double> out(t.active_count.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(t.active_count[i]) /
             static_cast<double>(state.samples());
  }
  return out;
}

inline double layer_mean(std::span<const double> values) {
  if (values.empty()) throw RangeError("layer_mean: no layers");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

/// |pruned at k ∩ grown at k-1| / |pruned at k| for one layer; 0 when nothing
/// was pruned.
inline double removed_new_ratio(const LayerUpdate& now,
                                const LayerUpdate* before) {
  if (now.pruned.empty() || before == nullptr) return 0.0;
  return static_cast<double>(
             sorted_intersection_size(now.pruned, before->grown)) /
         static_cast<double>(now.pruned.size());
}

/// Layer mean of the per-layer removed-new ratios of two consecutive updates.
inline double removed_new_ratio(const UpdateRecord& record,
                                const UpdateRecord& previous) {
  if (record.layers.empty()) return 0.0;
  std::vector<double> per_layer;
  for (const auto& now : record.layers) {
    const LayerUpdate* before = nullptr;
    for (const auto& p : previous.layers) {
      if (p.layer == now.layer) before = &p;
    }
    per_layer.push_back(removed_new_ratio(now, before));
  }
  return layer_mean(per_layer);
}

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double dof_mean = 0.0;
  double removed_new_ratio = 0.0;
  double pruning_ratio = 0.0;
  double flops_cumulative = 0.0;
  std::vector<double> dof_per_layer;
};

class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::vector<std::size_t> layer_ids)
      : layer_ids_(std::move(layer_ids)) {}

  void append(MetricsRow row) {
    if (!rows_.empty() && row.step <= rows_.back().step) {
      throw RangeError("MetricsLog: steps must be strictly increasing");
    }
    if (row.dof_per_layer.size() != layer_ids_.size()) {
      throw DimensionError("MetricsLog: per-layer DOF count mismatch");
    }
    rows_.push_back(std::move(row));
  }

  const std::vector<MetricsRow>& rows() const noexcept { return rows_; }
  const std::vector<std::size_t>& layer_ids() const noexcept {
    return layer_ids_;
  }

  /// Fixed column order: step, loss, lr, dof_mean, removed_new_ratio,
  /// pruning_ratio, flops_cumulative, dof_layer<l>...
  void write_csv(std::ostream& os) const {
    os << "step,loss,lr,dof_mean,removed_new_ratio,pruning_ratio,"
          "flops_cumulative";
    for (std::size_t l : layer_ids_) os << ",dof_layer" << l;
    os << '\n';
    for (const auto& r : rows_) {
      os << r.step << ',' << format_double(r.loss) << ','
         << format_double(r.lr) << ',' << format_double(r.dof_mean) << ','
         << format_double(r.removed_new_ratio) << ','
         << format_double(r.pruning_ratio) << ','
         << format_double(r.flops_cumulative);
      for (double d : r.dof_per_layer) os << ',' << format_double(d);
      os << '\n';
    }
  }

 private:
  std::vector<std::size_t> layer_ids_;
  std::vector<MetricsRow> rows_;
};

}  // namespace dynsparse

#endif  // DYNSPARSE_METRICS_HPP
