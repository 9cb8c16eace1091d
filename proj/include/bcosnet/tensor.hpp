#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

enum class Mode { train, eval };

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << " x " << c << " x " << h << " x " << w << "]";
    return os.str();
  }
};

/// Dense NCHW batch of feature maps. A batch of images is a Tensor4 with c = 3.
template <typename T>
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : shape_{n, c, h, w}, data_(n * c * h * w, fill) {}
  explicit Tensor4(Shape4 s, T fill = T(0)) : Tensor4(s.n, s.c, s.h, s.w, fill) {}

  const Shape4& shape() const { return shape_; }
  std::size_t batch() const { return shape_.n; }
  std::size_t channels() const { return shape_.c; }
  std::size_t height() const { return shape_.h; }
  std::size_t width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  /// Contiguous h*w plane of one channel of one sample.
  std::span<T> plane(std::size_t n, std::size_t c) {
    const std::size_t hw = shape_.h * shape_.w;
    return {data_.data() + (n * shape_.c + c) * hw, hw};
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    const std::size_t hw = shape_.h * shape_.w;
    return {data_.data() + (n * shape_.c + c) * hw, hw};
  }

  std::span<T> sample(std::size_t n) {
    const std::size_t chw = shape_.c * shape_.h * shape_.w;
    return {data_.data() + n * chw, chw};
  }
  std::span<const T> sample(std::size_t n) const {
    const std::size_t chw = shape_.c * shape_.h * shape_.w;
    return {data_.data() + n * chw, chw};
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor4& operator+=(const Tensor4& other) {
    if (!(other.shape_ == shape_)) {
      throw std::invalid_argument("tensor shape mismatch: " + shape_.str() + " vs " +
                                  other.shape_.str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

/// Row-major (batch x dim) matrix used for pooled vectors and embeddings.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// (N x D) matrix as an (N, D, 1, 1) tensor; memory order is identical.
template <typename T>
Tensor4<T> as_tensor(const Matrix<T>& m) {
  Tensor4<T> t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), 1, 1);
  std::copy(m.data(), m.data() + m.size(), t.data());
  return t;
}

template <typename T>
Matrix<T> as_matrix(const Tensor4<T>& t) {
  Matrix<T> m(static_cast<Eigen::Index>(t.batch()),
              static_cast<Eigen::Index>(t.channels() * t.height() * t.width()));
  std::copy(t.data(), t.data() + t.size(), m.data());
  return m;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

}  // namespace bcosnet
