// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_FLOPS_HPP
#define DYNSPARSE_FLOPS_HPP

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "metrics.hpp"
#include "nn.hpp"

namespace dynsparse {

/// One fully connected layer: [O, I] weight with density f, batch rows.
struct LayerFlopsSpec {
  double input_dim = 1;   // I
  double output_dim = 1;  // O
  double batch = 1;
  double density = 1.0;  // f = 1 - s
};

/// Forward SpMM cost 2 I batch O f. Half of it is multiplications.
inline double forward_flops(const LayerFlopsSpec& s) noexcept {
  return 2.0 * s.input_dim * s.batch * s.output_dim * s.density;
}

/// Forward, input-gradient and sparse outer product: 3 x 2 I batch O f.
inline double sparse_train_flops(const LayerFlopsSpec& s) noexcept {
  return 3.0 * forward_flops(s);
}

inline double dense_train_flops(double input_dim, double output_dim,
                                double batch) noexcept {
  return 6.0 * input_dim * batch * output_dim;
}

/// Weight-matrix training FLOPs per step, summed over layers. `densities`
/// has one entry per layer; dense layers should carry 1. Bias and activation
/// arithmetic is not counted.
inline double model_train_flops(const ModelConfig& cfg,
                                const std::vector<double>& densities,
                                double batch) {
  if (densities.size() != cfg.num_layers()) {
    throw DimensionError("model_train_flops: need one density per layer");
  }
  double total = 0.0;
  for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
    total += sparse_train_flops({static_cast<double>(cfg.layer_widths[l]),
                                 static_cast<double>(cfg.layer_widths[l + 1]),
                                 batch, densities[l]});
  }
  return total;
}

/// Per-step FLOPs of a model using the densities of its current masks.
inline double model_train_flops(const Model& model, double batch) {
  std::vector<double> f;
  for (const auto& l : model.layers) f.push_back(l.weight.mask().density());
  return model_train_flops(model.config, f, batch);
}

/// Largest per-FLOP slowdown sparse execution can afford while still training
/// faster than dense at equal task performance.
inline double epsilon_critical(double flops_dense, double flops_sparse) {
  if (!(flops_sparse > 0.0)) {
    throw RangeError("epsilon_critical: sparse FLOPs must be positive");
  }
  return flops_dense / flops_sparse;
}

// Learning-rate fits, natural logarithm throughout.

/// Optimal static-sparse learning rate vs. sparsity.
inline double lr_static_fit(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw RangeError("lr_static_fit: s in [0, 1)");
  return std::exp(1.969 * s * s + 0.2905 * s - 8.175);
}

/// Sparse learning rate from the dense optimum of the same model.
inline double lr_sparse_from_dense(double lr_dense, double s) {
  if (!(lr_dense > 0.0)) {
    throw RangeError("lr_sparse_from_dense: lr_dense must be > 0");
  }
  if (!(s >= 0.0 && s < 1.0)) {
    throw RangeError("lr_sparse_from_dense: s in [0, 1)");
  }
  return lr_dense * std::exp(1.969 * s * s + 0.2905 * s);
}

/// Dense learning rate vs. parameter count. Fitted on BERT-family sizes;
/// values far outside that range are pure extrapolation.
inline double lr_param_fit(double n_params) {
  if (!(n_params >= 1.0)) throw RangeError("lr_param_fit: N must be >= 1");
  return std::exp(-0.838 * std::log(n_params) + 6.13);
}

struct ParetoPoint {
  std::string label;
  double flops = 0.0;  // training FLOPs per step, weight matrices only
  double loss = 0.0;
  double sparsity = 0.0;
  std::size_t block_size = 1;
};

/// Sorted by FLOPs, then label.
inline std::vector<ParetoPoint> pareto_table(std::vector<ParetoPoint> points) {
  for (const auto& p : points) {
    if (!(p.flops > 0.0)) {
      throw RangeError("pareto_table: point '" + p.label + "' has no FLOPs");
    }
  }
  std::stable_sort(points.begin(), points.end(),
                   [](const ParetoPoint& a, const ParetoPoint& b) {
                     if (a.flops != b.flops) return a.flops < b.flops;
                     return a.label < b.label;
                   });
  return points;
}

/// Points not dominated in (FLOPs, loss); input must be sorted by FLOPs.
inline std::vector<ParetoPoint> pareto_front(
    const std::vector<ParetoPoint>& sorted) {
  std::vector<ParetoPoint> front;
  for (const auto& p : sorted) {
    if (front.empty() || p.loss < front.back().loss) front.push_back(p);
  }
  return front;
}

inline void write_pareto_csv(std::ostream& os,
                             const std::vector<ParetoPoint>& points) {
  os << "label,flops,loss,sparsity,block_size\n";
  for (const auto& p : points) {
    os << p.label << ',' << format_double(p.flops) << ','
       << format_double(p.loss) << ',' << format_double(p.sparsity) << ','
       << p.block_size << '\n';
  }
}

inline nlohmann::json pareto_json(const std::vector<ParetoPoint>& points) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : points) {
    rows.push_back({{"label", p.label},
                    {"flops", p.flops},
                    {"loss", p.loss},
                    {"sparsity", p.sparsity},
                    {"block_size", p.block_size}});
  }
  nlohmann::json front = nlohmann::json::array();
  for (const auto& p : pareto_front(points)) front.push_back(p.label);
  return {{"points", rows}, {"pareto_front", front}};
}

}  // namespace dynsparse

#endif  // DYNSPARSE_FLOPS_HPP
