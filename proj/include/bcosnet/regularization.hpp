#pragma once

#include "bcosnet/backbone.hpp"
#include "bcosnet/rng.hpp"
#include "bcosnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace bcosnet {

struct BdbConfig {
  double height_ratio = 0.3;
  double width_ratio = 1.0;
  BranchSet apply_to{BranchId::local};

  void validate() const {
    if (height_ratio < 0 || height_ratio > 1 || width_ratio < 0 || width_ratio > 1)
      throw std::invalid_argument("batch drop-block ratios must lie in [0, 1]");
  }
};

struct GcdConfig {
  double sigma = 0.5;

  void validate() const {
    if (sigma < 0) throw std::invalid_argument("gaussian dropout sigma must be >= 0");
  }
};

/// Zeroed rectangle [top, top+height) x [left, left+width).
struct DropRect {
  std::size_t top = 0, left = 0, height = 0, width = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

/// ceil(ratio * extent), tolerant of representation error (0.3 * 10 -> 3).
inline std::size_t block_extent(double ratio, std::size_t extent) {
  const double v = std::ceil(ratio * static_cast<double>(extent) - 1e-9);
  return std::min(extent, static_cast<std::size_t>(std::max(0.0, v)));
}

/// Batch DropBlock: one rectangle sampled per batch and zeroed in every
/// sample and channel. No rescaling of surviving activations.
template <typename T>
class BatchDropBlock {
 public:
  explicit BatchDropBlock(BdbConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  Tensor4<T> forward(const Tensor4<T>& x, Rng& rng, Mode mode) {
    active_ = false;
    if (mode == Mode::eval) return x;
    const std::size_t bh = block_extent(cfg_.height_ratio, x.height());
    const std::size_t bw = block_extent(cfg_.width_ratio, x.width());
    if (bh == 0 || bw == 0) return x;
    rect_ = {rng.index(x.height() - bh + 1), rng.index(x.width() - bw + 1), bh, bw};
    active_ = true;
    Tensor4<T> y = x;
    apply(y);
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) const {
    if (!active_) return dy;
    Tensor4<T> dx = dy;
    apply(dx);
    return dx;
  }

  bool active() const { return active_; }
  const DropRect& last_rect() const { return rect_; }
  const BdbConfig& config() const { return cfg_; }

 private:
  void apply(Tensor4<T>& t) const {
    for (std::size_t n = 0; n < t.batch(); ++n)
      for (std::size_t c = 0; c < t.channels(); ++c)
        for (std::size_t y = rect_.top; y < rect_.top + rect_.height; ++y)
          for (std::size_t x = rect_.left; x < rect_.left + rect_.width; ++x) t.at(n, c, y, x) = T(0);
  }

  BdbConfig cfg_;
  DropRect rect_;
  bool active_ = false;
};

template <typename T>
Tensor4<T> batch_dropblock(const Tensor4<T>& x, const BdbConfig& cfg, Rng& rng, bool training) {
  BatchDropBlock<T> bdb(cfg);
  return bdb.forward(x, rng, training ? Mode::train : Mode::eval);
}

/// Multiplicative unit-mean Gaussian noise, i.i.d. per element, in training
/// mode; identity in eval mode.
template <typename T>
class GaussianDropout {
 public:
  explicit GaussianDropout(GcdConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  Matrix<T> forward(const Matrix<T>& x, Rng& rng, Mode mode) {
    active_ = mode == Mode::train && cfg_.sigma > 0;
    if (!active_) return x;
    mask_.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask_.size(); ++i)
      mask_.data()[i] = static_cast<T>(rng.normal(1.0, cfg_.sigma));
    return x.cwiseProduct(mask_);
  }

  Matrix<T> backward(const Matrix<T>& dy) const { return active_ ? dy.cwiseProduct(mask_) : dy; }

  const Matrix<T>& last_mask() const { return mask_; }

 private:
  GcdConfig cfg_;
  Matrix<T> mask_;
  bool active_ = false;
};

template <typename T>
Matrix<T> gaussian_continuous_dropout(const Matrix<T>& x, const GcdConfig& cfg, Rng& rng,
                                      bool training) {
  GaussianDropout<T> gcd(cfg);
  return gcd.forward(x, rng, training ? Mode::train : Mode::eval);
}

}  // namespace bcosnet
