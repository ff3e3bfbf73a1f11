// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_TENSOR_HPP
#define DYNSPARSE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "random.hpp"

namespace dynsparse {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

/// Coordinate of a B x B block inside a weight matrix. Ordered row-major.
struct BlockCoord {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  auto operator<=>(const BlockCoord&) const = default;
};

/// Per-thread counters filled in by the kernels. Tests use them to check that
/// only active blocks are touched and to count multiplications exactly.
struct KernelCounters {
  std::uint64_t multiply_adds = 0;
  std::uint64_t block_visits = 0;
  /// densify() and dense_weight_grad() calls: anything that builds a dense
  /// [O, I] weight-shaped array.
  std::uint64_t dense_materializations = 0;
};

inline KernelCounters& kernel_counters() noexcept {
  thread_local KernelCounters counters;
  return counters;
}

inline void reset_kernel_counters() noexcept { kernel_counters() = {}; }

/// Row-major dense matrix. Activations are stored [batch, features].
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, values_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : shape_{rows, cols}, values_(std::move(values)) {
    if (values_.size() != shape_.size()) {
      throw DimensionError("DenseMatrix: " + std::to_string(values_.size()) +
                           " values for shape " + to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rows() const noexcept { return shape_.rows; }
  std::size_t cols() const noexcept { return shape_.cols; }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    return values_[r * shape_.cols + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return values_[r * shape_.cols + c];
  }

  std::span<double> row(std::size_t r) noexcept {
    return {values_.data() + r * shape_.cols, shape_.cols};
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return {values_.data() + r * shape_.cols, shape_.cols};
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool operator==(const DenseMatrix&) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Set of active B x B blocks of one [rows, cols] weight matrix, kept as a
/// strictly sorted coordinate list.
class SparsityMask {
 public:
  SparsityMask() = default;

  SparsityMask(Shape shape, std::size_t block_size,
               std::vector<BlockCoord> blocks)
      : shape_(shape), block_size_(block_size), blocks_(std::move(blocks)) {
    check_divisible(shape_, block_size_);
    std::sort(blocks_.begin(), blocks_.end());
    if (std::adjacent_find(blocks_.begin(), blocks_.end()) != blocks_.end()) {
      throw MaskError("SparsityMask: duplicate block coordinate");
    }
    for (const auto& b : blocks_) {
      if (b.row >= block_rows() || b.col >= block_cols()) {
        throw MaskError("SparsityMask: block (" + std::to_string(b.row) + "," +
                        std::to_string(b.col) + ") outside " +
                        to_string(shape_));
      }
    }
    if (blocks_.empty()) {
      throw DegenerateSparsityError("SparsityMask: no active block");
    }
  }

  /// Every block active.
  static SparsityMask full(Shape shape, std::size_t block_size) {
    check_divisible(shape, block_size);
    std::vector<BlockCoord> all;
    all.reserve((shape.rows / block_size) * (shape.cols / block_size));
    for (std::size_t r = 0; r < shape.rows / block_size; ++r) {
      for (std::size_t c = 0; c < shape.cols / block_size; ++c) {
        all.push_back({static_cast<std::uint32_t>(r),
                       static_cast<std::uint32_t>(c)});
      }
    }
    return SparsityMask(shape, block_size, std::move(all));
  }

  static void check_divisible(Shape shape, std::size_t block_size) {
    if (shape.rows == 0 || shape.cols == 0) {
      throw DimensionError("empty shape " + to_string(shape));
    }
    if (block_size == 0 || shape.rows % block_size != 0 ||
        shape.cols % block_size != 0) {
      throw DimensionError("shape " + to_string(shape) +
                           " not divisible by block size " +
                           std::to_string(block_size));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t block_area() const noexcept { return block_size_ * block_size_; }
  std::size_t block_rows() const noexcept { return shape_.rows / block_size_; }
  std::size_t block_cols() const noexcept { return shape_.cols / block_size_; }
  std::size_t total_blocks() const noexcept {
    return block_rows() * block_cols();
  }

  std::span<const BlockCoord> blocks() const noexcept { return blocks_; }
  std::size_t size() const noexcept { return blocks_.size(); }

  /// Fraction of the dense grid that is active, f = 1 - s.
  double density() const noexcept {
    return static_cast<double>(blocks_.size()) /
           static_cast<double>(total_blocks());
  }
  double sparsity() const noexcept { return 1.0 - density(); }

  /// Position of `c` in blocks(), or size() when inactive.
  std::size_t find(BlockCoord c) const noexcept {
    auto it = std::lower_bound(blocks_.begin(), blocks_.end(), c);
    if (it == blocks_.end() || *it != c) return blocks_.size();
    return static_cast<std::size_t>(it - blocks_.begin());
  }
  bool contains(BlockCoord c) const noexcept { return find(c) != size(); }

  /// Row-major linear index of a block coordinate over the block grid.
  std::size_t linear(BlockCoord c) const noexcept {
    return static_cast<std::size_t>(c.row) * block_cols() + c.col;
  }
  BlockCoord coord(std::size_t linear_index) const noexcept {
    return {static_cast<std::uint32_t>(linear_index / block_cols()),
            static_cast<std::uint32_t>(linear_index % block_cols())};
  }

  /// Inactive blocks in row-major order.
  std::vector<BlockCoord> complement() const {
    std::vector<BlockCoord> out;
    out.reserve(total_blocks() - size());
    auto it = blocks_.begin();
    for (std::size_t l = 0; l < total_blocks(); ++l) {
      const BlockCoord c = coord(l);
      if (it != blocks_.end() && *it == c) {
        ++it;
      } else {
        out.push_back(c);
      }
    }
    return out;
  }

  bool operator==(const SparsityMask&) const = default;

 private:
  Shape shape_;
  std::size_t block_size_ = 1;
  std::vector<BlockCoord> blocks_;
};

/// Always-sparse weight: a mask plus one B x B row-major block of values per
/// active block, in mask order.
class BlockSparseMatrix {
 public:
  BlockSparseMatrix() = default;

  explicit BlockSparseMatrix(SparsityMask mask)
      : mask_(std::move(mask)), values_(mask_.size() * mask_.block_area()) {}

  BlockSparseMatrix(SparsityMask mask, std::vector<double> values)
      : mask_(std::move(mask)), values_(std::move(values)) {
    if (values_.size() != mask_.size() * mask_.block_area()) {
      throw DimensionError("BlockSparseMatrix: value count " +
                           std::to_string(values_.size()) +
                           " does not match mask");
    }
  }

  const SparsityMask& mask() const noexcept { return mask_; }
  const Shape& shape() const noexcept { return mask_.shape(); }
  std::size_t block_size() const noexcept { return mask_.block_size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> block(std::size_t k) noexcept {
    return {values_.data() + k * mask_.block_area(), mask_.block_area()};
  }
  std::span<const double> block(std::size_t k) const noexcept {
    return {values_.data() + k * mask_.block_area(), mask_.block_area()};
  }

  /// Value at dense coordinate (i, j); 0 when off-mask.
  double at(std::size_t i, std::size_t j) const noexcept {
    const std::size_t bs = block_size();
    const BlockCoord c{static_cast<std::uint32_t>(i / bs),
                       static_cast<std::uint32_t>(j / bs)};
    const std::size_t k = mask_.find(c);
    if (k == mask_.size()) return 0.0;
    return block(k)[(i % bs) * bs + (j % bs)];
  }

  bool operator==(const BlockSparseMatrix&) const = default;

 private:
  SparsityMask mask_;
  std::vector<double> values_;
};

/// Uniformly random k-subset of the block grid, k = round((1 - s) n_blocks).
/// The achieved sparsity is mask.sparsity(), which may differ from `sparsity`.
inline SparsityMask random_mask(Shape shape, std::size_t block_size,
                                double sparsity, Rng& rng) {
  SparsityMask::check_divisible(shape, block_size);
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw RangeError("random_mask: sparsity must lie in [0, 1), got " +
                     std::to_string(sparsity));
  }
  const std::size_t n_blocks =
      (shape.rows / block_size) * (shape.cols / block_size);
  const auto k = static_cast<std::size_t>(
      std::llround((1.0 - sparsity) * static_cast<double>(n_blocks)));
  if (k == 0) {
    throw DegenerateSparsityError(
        "random_mask: sparsity " + std::to_string(sparsity) + " leaves no block of " +
        std::to_string(n_blocks) + " active");
  }
  const std::size_t bc = shape.cols / block_size;
  std::vector<BlockCoord> blocks;
  blocks.reserve(k);
  for (std::size_t l : rng.sample(n_blocks, k)) {
    blocks.push_back({static_cast<std::uint32_t>(l / bc),
                      static_cast<std::uint32_t>(l % bc)});
  }
  return SparsityMask(shape, block_size, std::move(blocks));
}

inline BlockSparseMatrix sparsify(const DenseMatrix& dense,
                                  const SparsityMask& mask) {
  if (dense.shape() != mask.shape()) {
    throw DimensionError("sparsify: dense " + to_string(dense.shape()) +
                         " vs mask " + to_string(mask.shape()));
  }
  BlockSparseMatrix out(mask);
  const std::size_t bs = mask.block_size();
  const auto blocks = mask.blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto dst = out.block(k);
    for (std::size_t r = 0; r < bs; ++r) {
      for (std::size_t c = 0; c < bs; ++c) {
        dst[r * bs + c] = dense(blocks[k].row * bs + r, blocks[k].col * bs + c);
      }
    }
  }
  return out;
}

inline DenseMatrix densify(const BlockSparseMatrix& sparse) {
  ++kernel_counters().dense_materializations;
  DenseMatrix out(sparse.shape().rows, sparse.shape().cols);
  const std::size_t bs = sparse.block_size();
  const auto blocks = sparse.mask().blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto src = sparse.block(k);
    for (std::size_t r = 0; r < bs; ++r) {
      for (std::size_t c = 0; c < bs; ++c) {
        out(blocks[k].row * bs + r, blocks[k].col * bs + c) = src[r * bs + c];
      }
    }
  }
  return out;
}

/// y[b, i] = sum_j W[i, j] x[b, j], visiting active blocks only.
///
/// Blocks are visited in row-major order, so for every output element the
/// products are accumulated in ascending j. That is the same order as a plain
/// dense loop, which makes a full-mask result bit-identical to dense matmul.
inline DenseMatrix spmm_forward(const BlockSparseMatrix& w,
                                const DenseMatrix& x) {
  if (w.shape().cols != x.cols()) {
    throw DimensionError("spmm_forward: W " + to_string(w.shape()) +
                         " vs X " + to_string(x.shape()));
  }
  const std::size_t batch = x.rows();
  const std::size_t bs = w.block_size();
  DenseMatrix y(batch, w.shape().rows);
  const auto blocks = w.mask().blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const double* vals = w.block(k).data();
    const std::size_t i0 = blocks[k].row * bs;
    const std::size_t j0 = blocks[k].col * bs;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* xr = x.row(b).data() + j0;
      double* yr = y.row(b).data() + i0;
      for (std::size_t r = 0; r < bs; ++r) {
        double acc = yr[r];
        for (std::size_t c = 0; c < bs; ++c) acc += vals[r * bs + c] * xr[c];
        yr[r] = acc;
      }
    }
  }
  auto& ctr = kernel_counters();
  ctr.block_visits += blocks.size();
  ctr.multiply_adds += blocks.size() * w.mask().block_area() * batch;
  return y;
}

/// dx[b, j] = sum_i W[i, j] dy[b, i]: error times the transposed sparse matrix.
inline DenseMatrix spmm_backward_input(const BlockSparseMatrix& w,
                                       const DenseMatrix& dy) {
  if (w.shape().rows != dy.cols()) {
    throw DimensionError("spmm_backward_input: W " + to_string(w.shape()) +
                         " vs dY " + to_string(dy.shape()));
  }
  const std::size_t batch = dy.rows();
  const std::size_t bs = w.block_size();
  DenseMatrix dx(batch, w.shape().cols);
  const auto blocks = w.mask().blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const double* vals = w.block(k).data();
    const std::size_t i0 = blocks[k].row * bs;
    const std::size_t j0 = blocks[k].col * bs;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* dyr = dy.row(b).data() + i0;
      double* dxr = dx.row(b).data() + j0;
      for (std::size_t r = 0; r < bs; ++r) {
        const double g = dyr[r];
        for (std::size_t c = 0; c < bs; ++c) dxr[c] += vals[r * bs + c] * g;
      }
    }
  }
  auto& ctr = kernel_counters();
  ctr.block_visits += blocks.size();
  ctr.multiply_adds += blocks.size() * w.mask().block_area() * batch;
  return dx;
}

/// Sparse outer product: dW[i, j] = sum_b dy[b, i] x[b, j] for active (i, j)
/// only. Off-mask entries are never formed.
inline BlockSparseMatrix sparse_weight_grad(const DenseMatrix& x,
                                            const DenseMatrix& dy,
                                            const SparsityMask& mask) {
  if (x.rows() != dy.rows() || x.cols() != mask.shape().cols ||
      dy.cols() != mask.shape().rows) {
    throw DimensionError("sparse_weight_grad: X " + to_string(x.shape()) +
                         ", dY " + to_string(dy.shape()) + ", mask " +
                         to_string(mask.shape()));
  }
  BlockSparseMatrix grad(mask);
  const std::size_t batch = x.rows();
  const std::size_t bs = mask.block_size();
  const auto blocks = mask.blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    double* g = grad.block(k).data();
    const std::size_t i0 = blocks[k].row * bs;
    const std::size_t j0 = blocks[k].col * bs;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* dyr = dy.row(b).data() + i0;
      const double* xr = x.row(b).data() + j0;
      for (std::size_t r = 0; r < bs; ++r) {
        const double e = dyr[r];
        for (std::size_t c = 0; c < bs; ++c) g[r * bs + c] += e * xr[c];
      }
    }
  }
  auto& ctr = kernel_counters();
  ctr.block_visits += blocks.size();
  ctr.multiply_adds += blocks.size() * mask.block_area() * batch;
  return grad;
}

/// Full [O, I] outer-product gradient. Only gradient-based re-allocation needs
/// it, and calling it breaks the always-sparse property.
inline DenseMatrix dense_weight_grad(const DenseMatrix& x,
                                     const DenseMatrix& dy) {
  if (x.rows() != dy.rows()) {
    throw DimensionError("dense_weight_grad: X " + to_string(x.shape()) +
                         " vs dY " + to_string(dy.shape()));
  }
  ++kernel_counters().dense_materializations;
  DenseMatrix grad(dy.cols(), x.cols());
  for (std::size_t b = 0; b < x.rows(); ++b) {
    const auto xr = x.row(b);
    const auto dyr = dy.row(b);
    for (std::size_t i = 0; i < dy.cols(); ++i) {
      auto gr = grad.row(i);
      for (std::size_t j = 0; j < x.cols(); ++j) gr[j] += dyr[i] * xr[j];
    }
  }
  return grad;
}

/// Block importance metric L^p. With B = 1 every choice is |w|, i.e. plain
/// magnitude pruning.
enum class BlockNorm { l1, l2, linf };

inline double block_norm(std::span<const double> block, BlockNorm p) noexcept {
  double acc = 0.0;
  switch (p) {
    case BlockNorm::l1:
      for (double w : block) acc += std::abs(w);
      return acc;
    case BlockNorm::l2:
      for (double w : block) acc += w * w;
      return std::sqrt(acc);
    case BlockNorm::linf:
      for (double w : block) acc = std::max(acc, std::abs(w));
      return acc;
  }
  return acc;
}

inline const char* to_string(BlockNorm p) noexcept {
  switch (p) {
    case BlockNorm::l1:
      return "l1";
    case BlockNorm::l2:
      return "l2";
    case BlockNorm::linf:
      return "linf";
  }
  return "?";
}

}  // namespace dynsparse

#endif  // DYNSPARSE_TENSOR_HPP
