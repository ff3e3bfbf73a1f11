// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_NN_HPP
#define DYNSPARSE_NN_HPP

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace dynsparse {

enum class Activation { relu, gelu };

inline const char* to_string(Activation a) noexcept {
  return a == Activation::relu ? "relu" : "gelu";
}

namespace detail {

inline double std_normal_cdf(double x) noexcept {
  return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0);
}

inline double std_normal_pdf(double x) noexcept {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

inline double activate(Activation a, double z) noexcept {
  if (a == Activation::relu) return z > 0.0 ? z : 0.0;
  return z * detail::std_normal_cdf(z);
}

inline double activate_grad(Activation a, double z) noexcept {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  return detail::std_normal_cdf(z) + z * detail::std_normal_pdf(z);
}

/// Truncated normal N(0, std^2) restricted to [-2 std, 2 std], by rejection.
inline double truncated_normal(Rng& rng, double std) {
  double z;
  do {
    z = rng.normal();
  } while (std::abs(z) > 2.0);
  return std * z;
}

/// Standard deviation of the +-2 sigma truncated normal above.
inline double truncated_normal_std(double std) noexcept {
  const double mass = detail::std_normal_cdf(2.0) - detail::std_normal_cdf(-2.0);
  return std * std::sqrt(1.0 - 4.0 * detail::std_normal_pdf(2.0) / mass);
}

struct ModelConfig {
  /// input, hidden..., output
  std::vector<std::size_t> layer_widths;
  /// Indices of weight matrices that carry a sparse mask. Layer l maps
  /// layer_widths[l] -> layer_widths[l + 1].
  std::vector<std::size_t> sparse_layers;
  Activation activation = Activation::relu;
  double init_std = 0.02;
  std::size_t block_size = 1;

  std::size_t num_layers() const noexcept {
    return layer_widths.empty() ? 0 : layer_widths.size() - 1;
  }

  bool is_sparse(std::size_t layer) const noexcept {
    return std::find(sparse_layers.begin(), sparse_layers.end(), layer) !=
           sparse_layers.end();
  }

  Shape weight_shape(std::size_t layer) const noexcept {
    return {layer_widths[layer + 1], layer_widths[layer]};
  }

  void validate() const {
    if (layer_widths.size() < 2) {
      throw ConfigError("ModelConfig: need at least input and output widths");
    }
    for (std::size_t w : layer_widths) {
      if (w == 0) throw ConfigError("ModelConfig: zero layer width");
    }
    if (!(init_std > 0.0)) throw ConfigError("ModelConfig: init_std must be > 0");
    if (block_size == 0) throw ConfigError("ModelConfig: block_size must be >= 1");
    for (std::size_t l : sparse_layers) {
      if (l >= num_layers()) {
        throw ConfigError("ModelConfig: sparse layer " + std::to_string(l) +
                          " out of range");
      }
      SparsityMask::check_divisible(weight_shape(l), block_size);
    }
  }
};

struct Layer {
  BlockSparseMatrix weight;
  std::vector<double> bias;
  bool sparse = false;
  /// Layer-wide trainability flag.
  bool trainable = true;
  /// Optional per-value freeze flags aligned with weight.values(); empty means
  /// nothing frozen. Used by the freeze and zero/untrained ablations.
  std::vector<std::uint8_t> frozen;

  bool is_frozen(std::size_t idx) const noexcept {
    return !trainable || (!frozen.empty() && frozen[idx] != 0);
  }
};

struct Model {
  ModelConfig config;
  std::vector<Layer> layers;

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.values().size() + l.bias.size();
    return n;
  }
};

/// Block size used for the full masks of dense layers. Any block size gives
/// the same accumulation order, so a larger one only saves loop overhead.
inline std::size_t dense_block_size(Shape shape) noexcept {
  std::size_t g = std::gcd(shape.rows, shape.cols);
  for (std::size_t b : {16u, 8u, 4u, 2u}) {
    if (g % b == 0) return b;
  }
  return 1;
}

/// Fills `weight` with truncated-normal draws taken in dense row-major (i, j)
/// order, keeping the ones on the mask. Matching seeds therefore give matching
/// values on shared coordinates whatever the mask or block size.
inline void init_weight_values(BlockSparseMatrix& weight, double std, Rng& rng) {
  const std::size_t bs = weight.block_size();
  const auto& mask = weight.mask();
  for (std::size_t i = 0; i < weight.shape().rows; ++i) {
    for (std::size_t j = 0; j < weight.shape().cols; ++j) {
      const double v = truncated_normal(rng, std);
      const std::size_t k = mask.find({static_cast<std::uint32_t>(i / bs),
                                       static_cast<std::uint32_t>(j / bs)});
      if (k != mask.size()) weight.block(k)[(i % bs) * bs + (j % bs)] = v;
    }
  }
}

/// Random block-sparse masks on the sparse layers, full masks elsewhere,
/// truncated-normal weights and zero biases.
inline Model init_model(const ModelConfig& config, double sparsity,
                        Rng& init_rng, Rng& mask_rng) {
  config.validate();
  Model model{config, {}};
  for (std::size_t l = 0; l < config.num_layers(); ++l) {
    const Shape shape = config.weight_shape(l);
    Layer layer;
    layer.sparse = config.is_sparse(l);
    SparsityMask mask =
        layer.sparse
            ? random_mask(shape, config.block_size, sparsity, mask_rng)
            : SparsityMask::full(shape, dense_block_size(shape));
    layer.weight = BlockSparseMatrix(std::move(mask));
    init_weight_values(layer.weight, config.init_std, init_rng);
    layer.bias.assign(shape.rows, 0.0);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

inline Model init_model(const ModelConfig& config, double sparsity, Rng& rng) {
  return init_model(config, sparsity, rng, rng);
}

struct ForwardCache {
  /// inputs[l] is the input of layer l; inputs[0] is X.
  std::vector<DenseMatrix> inputs;
  /// Pre-activations of every layer (the last one is the prediction).
  std::vector<DenseMatrix> pre;
};

inline DenseMatrix forward(const Model& model, const DenseMatrix& x,
                           ForwardCache* cache = nullptr) {
  if (model.layers.empty() || x.cols() != model.config.layer_widths.front()) {
    throw DimensionError("forward: input has " + std::to_string(x.cols()) +
                         " features");
  }
  const Activation act = model.config.activation;
  DenseMatrix a = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Layer& layer = model.layers[l];
    DenseMatrix z = spmm_forward(layer.weight, a);
    for (std::size_t b = 0; b < z.rows(); ++b) {
      auto zr = z.row(b);
      for (std::size_t i = 0; i < zr.size(); ++i) zr[i] += layer.bias[i];
    }
    if (cache) cache->inputs.push_back(a);
    if (l + 1 == model.layers.size()) {
      if (cache) cache->pre.push_back(z);
      return z;
    }
    a = z;
    for (double& v : a.values()) v = activate(act, v);
    if (cache) cache->pre.push_back(std::move(z));
  }
  return a;
}

inline double mse(const DenseMatrix& pred, const DenseMatrix& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: prediction " + to_string(pred.shape()) +
                         " vs target " + to_string(target.shape()));
  }
  double acc = 0.0;
  const auto p = pred.values();
  const auto t = target.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    acc += d * d;
  }
  return acc / static_cast<double>(p.size());
}

struct LayerGrad {
  /// Aligned with Layer::weight.values().
  std::vector<double> weight;
  std::vector<double> bias;
  /// Full [O, I] gradient, only when requested for sparse layers.
  std::optional<DenseMatrix> dense_weight;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<LayerGrad> grads;
};

/// Mean squared error over batch and outputs, with backprop gradients.
/// Sparse layers get mask-restricted weight gradients; with `dense_grads` they
/// additionally get the full outer product (gradient re-allocation only).
inline LossAndGrads loss_and_grads(const Model& model, const DenseMatrix& x,
                                   const DenseMatrix& target,
                                   bool dense_grads = false) {
  if (x.rows() == 0) throw DimensionError("loss_and_grads: empty batch");
  ForwardCache cache;
  const DenseMatrix pred = forward(model, x, &cache);
  LossAndGrads out;
  out.loss = mse(pred, target);
  if (!std::isfinite(out.loss)) {
    throw DivergenceError("loss_and_grads: non-finite loss");
  }

  const double scale = 2.0 / static_cast<double>(pred.values().size());
  DenseMatrix dz(pred.rows(), pred.cols());
  for (std::size_t i = 0; i < dz.values().size(); ++i) {
    dz.values()[i] = scale * (pred.values()[i] - target.values()[i]);
  }

  const Activation act = model.config.activation;
  out.grads.resize(model.layers.size());
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const Layer& layer = model.layers[l];
    const DenseMatrix& input = cache.inputs[l];
    LayerGrad& g = out.grads[l];
    BlockSparseMatrix wg = sparse_weight_grad(input, dz, layer.weight.mask());
    g.weight.assign(wg.values().begin(), wg.values().end());
    if (dense_grads && layer.sparse) g.dense_weight = dense_weight_grad(input, dz);
    g.bias.assign(dz.cols(), 0.0);
    for (std::size_t b = 0; b < dz.rows(); ++b) {
      const auto r = dz.row(b);
      for (std::size_t i = 0; i < r.size(); ++i) g.bias[i] += r[i];
    }
    if (l == 0) break;
    DenseMatrix da = spmm_backward_input(layer.weight, dz);
    const DenseMatrix& z = cache.pre[l - 1];
    for (std::size_t i = 0; i < da.values().size(); ++i) {
      da.values()[i] *= activate_grad(act, z.values()[i]);
    }
    dz = std::move(da);
  }
  return out;
}

struct TaskSpec {
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;
  /// Per-feature input scale; empty means all ones.
  std::vector<double> input_scales;
  double noise_std = 0.0;
  /// Teacher weights are N(0, gain^2 / fan_in).
  double teacher_gain = std::numbers::sqrt2;
};

/// Teacher-student regression task. The teacher is a fixed dense network.
struct Task {
  TaskSpec spec;
  Model teacher;
};

/// Heavy-tailed per-feature scales exp(sigma * N(0, 1)).
inline std::vector<double> lognormal_scales(std::size_t n, double sigma,
                                            Rng& rng) {
  std::vector<double> s(n);
  for (double& v : s) v = std::exp(sigma * rng.normal());
  return s;
}

inline Task make_task(TaskSpec spec, Rng& rng) {
  ModelConfig cfg;
  cfg.layer_widths = spec.layer_widths;
  cfg.activation = spec.activation;
  cfg.validate();
  if (!spec.input_scales.empty() &&
      spec.input_scales.size() != spec.layer_widths.front()) {
    throw DimensionError("make_task: input_scales length mismatch");
  }
  if (spec.noise_std < 0.0) throw ConfigError("make_task: noise_std < 0");
  Model teacher{cfg, {}};
  for (std::size_t l = 0; l < cfg.num_layers(); ++l) {
    const Shape shape = cfg.weight_shape(l);
    Layer layer;
    layer.weight = BlockSparseMatrix(
        SparsityMask::full(shape, dense_block_size(shape)));
    const double std =
        spec.teacher_gain / std::sqrt(static_cast<double>(shape.cols));
    for (double& v : layer.weight.values()) v = std * rng.normal();
    layer.bias.assign(shape.rows, 0.0);
    layer.trainable = false;
    teacher.layers.push_back(std::move(layer));
  }
  return Task{std::move(spec), std::move(teacher)};
}

struct Batch {
  DenseMatrix x;
  DenseMatrix y;
};

inline Batch make_batch(const Task& task, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw RangeError("make_batch: batch_size must be >= 1");
  const std::size_t in = task.spec.layer_widths.front();
  DenseMatrix x(batch_size, in);
  for (std::size_t b = 0; b < batch_size; ++b) {
    auto r = x.row(b);
    for (std::size_t j = 0; j < in; ++j) {
      r[j] = rng.normal();
      if (!task.spec.input_scales.empty()) r[j] *= task.spec.input_scales[j];
    }
  }
  DenseMatrix y = forward(task.teacher, x);
  if (task.spec.noise_std > 0.0) {
    for (double& v : y.values()) v += task.spec.noise_std * rng.normal();
  }
  return {std::move(x), std::move(y)};
}

}  // namespace dynsparse

#endif  // DYNSPARSE_NN_HPP
