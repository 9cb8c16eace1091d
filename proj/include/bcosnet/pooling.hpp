#pragma once

#include "bcosnet/layers.hpp"
#include "bcosnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

/// Half-open band of rows [begin, end) spanning the full width of a map.
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  friend bool operator==(const RowRange&, const RowRange&) = default;
};

/// Contiguous horizontal stripes covering all rows. When the height does not
/// divide evenly, the topmost stripes take one extra row each.
struct StripePartition {
  std::vector<RowRange> stripes;

  static StripePartition make(std::size_t height, std::size_t num_stripes) {
    if (num_stripes == 0) throw std::invalid_argument("stripe count must be positive");
    if (height < num_stripes) {
      throw std::invalid_argument("feature map height " + std::to_string(height) +
                                  " is smaller than stripe count " + std::to_string(num_stripes));
    }
    StripePartition part;
    const std::size_t base = height / num_stripes;
    const std::size_t extra = height % num_stripes;
    std::size_t row = 0;
    for (std::size_t i = 0; i < num_stripes; ++i) {
      const std::size_t rows = base + (i < extra ? 1 : 0);
      part.stripes.push_back({row, row + rows});
      row += rows;
    }
    return part;
  }

  std::size_t size() const { return stripes.size(); }
};

struct GemParams {
  double p = 1.0;
  bool learnable = true;
  double eps = 1e-6;
};

namespace detail {

template <typename T>
void check_region(const Tensor4<T>& x, RowRange rows) {
  if (rows.begin >= rows.end || rows.end > x.height() || x.width() == 0 || x.batch() == 0 ||
      x.channels() == 0) {
    throw std::invalid_argument("pooling region is empty or out of bounds");
  }
}

template <typename T>
std::span<const T> band(const Tensor4<T>& x, std::size_t n, std::size_t c, RowRange rows) {
  return x.plane(n, c).subspan(rows.begin * x.width(), rows.size() * x.width());
}

template <typename T>
std::span<T> band(Tensor4<T>& x, std::size_t n, std::size_t c, RowRange rows) {
  return x.plane(n, c).subspan(rows.begin * x.width(), rows.size() * x.width());
}

}  // namespace detail

inline RowRange all_rows(std::size_t height) { return {0, height}; }

/// Per-channel mean over the region; returns (N x C).
template <typename T>
Matrix<T> avg_pool(const Tensor4<T>& x, RowRange rows) {
  detail::check_region(x, rows);
  Matrix<T> out(x.batch(), x.channels());
  const T inv = T(1) / static_cast<T>(rows.size() * x.width());
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      T s(0);
      for (T v : detail::band(x, n, c, rows)) s += v;
      out(n, c) = s * inv;
    }
  }
  return out;
}

template <typename T>
void avg_pool_backward(const Matrix<T>& dy, RowRange rows, Tensor4<T>& dx) {
  const T inv = T(1) / static_cast<T>(rows.size() * dx.width());
  for (std::size_t n = 0; n < dx.batch(); ++n) {
    for (std::size_t c = 0; c < dx.channels(); ++c) {
      const T g = dy(n, c) * inv;
      for (T& v : detail::band(dx, n, c, rows)) v += g;
    }
  }
}

template <typename T>
struct MaxPooled {
  Matrix<T> values;
  /// Offset of the winning cell inside each (n, c) band, row-major over (N, C).
  std::vector<std::size_t> argmax;
};

/// Per-channel maximum over the region. Ties resolve to the first cell in
/// row-major order.
template <typename T>
MaxPooled<T> max_pool(const Tensor4<T>& x, RowRange rows) {
  detail::check_region(x, rows);
  MaxPooled<T> out{Matrix<T>(x.batch(), x.channels()),
                   std::vector<std::size_t>(x.batch() * x.channels(), 0)};
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      auto b = detail::band(x, n, c, rows);
      const auto it = std::max_element(b.begin(), b.end());
      out.values(n, c) = *it;
      out.argmax[n * x.channels() + c] = static_cast<std::size_t>(it - b.begin());
    }
  }
  return out;
}

template <typename T>
void max_pool_backward(const Matrix<T>& dy, const std::vector<std::size_t>& argmax, RowRange rows,
                       Tensor4<T>& dx) {
  for (std::size_t n = 0; n < dx.batch(); ++n) {
    for (std::size_t c = 0; c < dx.channels(); ++c) {
      detail::band(dx, n, c, rows)[argmax[n * dx.channels() + c]] += dy(n, c);
    }
  }
}

/// Generalized mean ((1/n) sum max(x, eps)^p)^(1/p) of one set of values.
/// Evaluated relative to the maximum so large p stays finite.
template <typename T>
T gem_mean(std::span<const T> values, T p, T eps) {
  if (values.empty()) throw std::invalid_argument("GeM over an empty region");
  if (!(p > T(0))) throw std::invalid_argument("GeM exponent must be positive");
  T top = eps;
  for (T v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("GeM input is not finite");
    top = std::max(top, v);
  }
  T s(0);
  for (T v : values) s += std::pow(std::max(v, eps) / top, p);
  s /= static_cast<T>(values.size());
  return top * std::pow(s, T(1) / p);
}

/// GeM over the region; returns (N x C).
template <typename T>
Matrix<T> gem_pool(const Tensor4<T>& x, RowRange rows, T p, T eps) {
  detail::check_region(x, rows);
  if (!(p > T(0))) throw std::invalid_argument("GeM exponent must be positive");
  Matrix<T> out(x.batch(), x.channels());
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c)
      out(n, c) = gem_mean(detail::band(x, n, c, rows), p, eps);
  return out;
}

/// Accumulates dL/dx into dx and returns dL/dp. `y` is the forward output.
/// Cells clamped to eps receive no gradient.
template <typename T>
T gem_pool_backward(const Tensor4<T>& x, RowRange rows, T p, T eps, const Matrix<T>& y,
                    const Matrix<T>& dy, Tensor4<T>& dx) {
  T dp(0);
  const T count = static_cast<T>(rows.size() * x.width());
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      auto src = detail::band(x, n, c, rows);
      auto dst = detail::band(dx, n, c, rows);
      const T out = y(n, c);
      const T g = dy(n, c);
      if (g == T(0)) continue;
      T top = eps;
      for (T v : src) top = std::max(top, v);
      // s = mean((x/top)^p), out = top * s^(1/p)
      T s(0), s_log(0);
      for (T v : src) {
        const T z = std::max(v, eps) / top;
        const T zp = std::pow(z, p);
        s += zp;
        s_log += zp * std::log(z);
      }
      s /= count;
      s_log /= count;
      // d out / d x_i = (1/count) * s^(1/p - 1) * z_i^(p - 1)
      const T scale = std::pow(s, T(1) / p - T(1)) / count;
      for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i] <= eps) continue;
        dst[i] += g * scale * std::pow(src[i] / top, p - T(1));
      }
      dp += g * out * (-std::log(s) / (p * p) + s_log / (s * p));
    }
  }
  return dp;
}

/// Pools a list of row bands with one shared, optionally learnable GeM
/// exponent and concatenates the results channel-block-wise. With GeM
/// disabled it falls back to plain average pooling.
template <typename T>
class GemPool {
 public:
  static constexpr double kMinP = 0.1;

  GemPool() = default;
  GemPool(const GemParams& params, bool enabled)
      : enabled_(enabled), learnable_(params.learnable && enabled),
        eps_(static_cast<T>(params.eps)), p_({1}, static_cast<T>(params.p), learnable_) {
    if (!(params.p > 0)) throw std::invalid_argument("GeM exponent must be positive");
    if (!(params.eps > 0)) throw std::invalid_argument("GeM eps must be positive");
  }

  /// Exponent actually used by the forward pass.
  T effective_p() const { return std::max(p_.value[0], static_cast<T>(kMinP)); }
  bool enabled() const { return enabled_; }

  Matrix<T> forward(const Tensor4<T>& x, const std::vector<RowRange>& regions) {
    input_ = x;
    regions_ = regions;
    const auto c = static_cast<Eigen::Index>(x.channels());
    Matrix<T> out(x.batch(), c * static_cast<Eigen::Index>(regions.size()));
    pooled_.clear();
    for (std::size_t r = 0; r < regions.size(); ++r) {
      Matrix<T> block = enabled_ ? gem_pool(x, regions[r], effective_p(), eps_)
                                 : avg_pool(x, regions[r]);
      out.middleCols(static_cast<Eigen::Index>(r) * c, c) = block;
      pooled_.push_back(std::move(block));
    }
    return out;
  }

  Tensor4<T> backward(const Matrix<T>& dy) {
    Tensor4<T> dx(input_.shape());
    const auto c = static_cast<Eigen::Index>(input_.channels());
    T dp(0);
    for (std::size_t r = 0; r < regions_.size(); ++r) {
      Matrix<T> g = dy.middleCols(static_cast<Eigen::Index>(r) * c, c);
      if (enabled_) {
        dp += gem_pool_backward(input_, regions_[r], effective_p(), eps_, pooled_[r], g, dx);
      } else {
        avg_pool_backward(g, regions_[r], dx);
      }
    }
    if (learnable_ && p_.value[0] >= static_cast<T>(kMinP)) p_.grad[0] += dp;
    return dx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    if (enabled_) out.push_back({join_path(prefix, "p"), &p_});
  }

  Parameter<T>& p() { return p_; }

 private:
  bool enabled_ = true;
  bool learnable_ = true;
  T eps_ = T(1e-6);
  Parameter<T> p_;
  Tensor4<T> input_;
  std::vector<RowRange> regions_;
  std::vector<Matrix<T>> pooled_;
};

}  // namespace bcosnet
