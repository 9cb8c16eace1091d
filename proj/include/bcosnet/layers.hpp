#pragma once

#include "bcosnet/rng.hpp"
#include "bcosnet/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bcosnet {

/// Trainable tensor or persistent buffer (normalization statistics).
template <typename T>
struct Parameter {
  std::vector<std::size_t> dims;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(std::vector<std::size_t> d, T fill = T(0), bool is_trainable = true)
      : dims(std::move(d)), trainable(is_trainable) {
    std::size_t n = 1;
    for (auto v : dims) n *= v;
    value.assign(n, fill);
    grad.assign(n, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
struct NamedParameter {
  std::string path;
  Parameter<T>* param;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
void kaiming_normal(Parameter<T>& p, std::size_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value) v = static_cast<T>(rng.normal(0.0, std));
}

/// Layer over NCHW batches with an explicit backward pass. forward() caches
/// whatever backward() needs, so each instance serves one call site per pass.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor4<T> forward(const Tensor4<T>& x, Mode mode) = 0;
  virtual Tensor4<T> backward(const Tensor4<T>& dy) = 0;
  virtual void collect(const std::string& /*prefix*/, ParameterList<T>& /*out*/) {}
  virtual Shape4 output_shape(const Shape4& in) const = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  if (in + 2 * pad < k) throw std::invalid_argument("convolution input smaller than kernel");
  return (in + 2 * pad - k) / stride + 1;
}

/// 2-D convolution. groups must be 1 (dense, im2col + GEMM) or equal to both
/// channel counts (depthwise).
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t pad, std::size_t groups, bool bias, Rng& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad),
        groups_(groups), has_bias_(bias) {
    if (groups != 1 && !(groups == in_channels && groups == out_channels)) {
      throw std::invalid_argument("Conv2d supports dense or depthwise grouping only");
    }
    const std::size_t in_per_group = in_ / groups_;
    weight_ = Parameter<T>({out_, in_per_group, k_, k_});
    kaiming_normal(weight_, in_per_group * k_ * k_, rng);
    if (has_bias_) bias_ = Parameter<T>({out_});
  }

  Shape4 output_shape(const Shape4& in) const override {
    return {in.n, out_, conv_out_size(in.h, k_, stride_, pad_),
            conv_out_size(in.w, k_, stride_, pad_)};
  }

  Tensor4<T> forward(const Tensor4<T>& x, Mode) override {
    if (x.channels() != in_) {
      throw std::invalid_argument("Conv2d expected " + std::to_string(in_) + " channels, got " +
                                  std::to_string(x.channels()));
    }
    input_ = x;
    Tensor4<T> y(output_shape(x.shape()));
    if (groups_ == 1) {
      dense_forward(x, y);
    } else {
      depthwise_forward(x, y);
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> dx(input_.shape());
    if (groups_ == 1) {
      dense_backward(dy, dx);
    } else {
      depthwise_backward(dy, dx);
    }
    return dx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    out.push_back({join_path(prefix, "weight"), &weight_});
    if (has_bias_) out.push_back({join_path(prefix, "bias"), &bias_});
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  using RowMat = Matrix<T>;
  using MapMat = Eigen::Map<RowMat>;
  using ConstMapMat = Eigen::Map<const RowMat>;

  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  void im2col(std::span<const T> img, std::size_t h, std::size_t w, std::size_t oh,
              std::size_t ow, RowMat& col) const {
    col.resize(static_cast<Eigen::Index>(in_ * k_ * k_), static_cast<Eigen::Index>(oh * ow));
    T* dst = col.data();
    for (std::size_t c = 0; c < in_; ++c) {
      const T* src = img.data() + c * h * w;
      for (std::size_t ki = 0; ki < k_; ++ki) {
        for (std::size_t kj = 0; kj < k_; ++kj) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
              *dst++ = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                        ix < static_cast<long>(w))
                           ? src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)]
                           : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMat& col, std::span<T> img, std::size_t h, std::size_t w, std::size_t oh,
              std::size_t ow) const {
    const T* src = col.data();
    for (std::size_t c = 0; c < in_; ++c) {
      T* dst = img.data() + c * h * w;
      for (std::size_t ki = 0; ki < k_; ++ki) {
        for (std::size_t kj = 0; kj < k_; ++kj) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
            for (std::size_t ox = 0; ox < ow; ++ox, ++src) {
              const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
              if (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w)) {
                dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += *src;
              }
            }
          }
        }
      }
    }
  }

  void dense_forward(const Tensor4<T>& x, Tensor4<T>& y) const {
    const std::size_t h = x.height(), w = x.width(), oh = y.height(), ow = y.width();
    const auto rows = static_cast<Eigen::Index>(out_);
    const auto cols = static_cast<Eigen::Index>(oh * ow);
    ConstMapMat wmat(weight_.value.data(), rows, static_cast<Eigen::Index>(in_ * k_ * k_));
    RowMat col;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      MapMat out(y.sample(n).data(), rows, cols);
      if (pointwise()) {
        out.noalias() = wmat * ConstMapMat(x.sample(n).data(), static_cast<Eigen::Index>(in_), cols);
      } else {
        im2col(x.sample(n), h, w, oh, ow, col);
        out.noalias() = wmat * col;
      }
      if (has_bias_) {
        for (Eigen::Index o = 0; o < rows; ++o) out.row(o).array() += bias_.value[o];
      }
    }
  }

  void dense_backward(const Tensor4<T>& dy, Tensor4<T>& dx) {
    const std::size_t h = input_.height(), w = input_.width(), oh = dy.height(), ow = dy.width();
    const auto rows = static_cast<Eigen::Index>(out_);
    const auto cols = static_cast<Eigen::Index>(oh * ow);
    const auto kdim = static_cast<Eigen::Index>(in_ * k_ * k_);
    ConstMapMat wmat(weight_.value.data(), rows, kdim);
    MapMat dw(weight_.grad.data(), rows, kdim);
    RowMat col, dcol;
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      ConstMapMat g(dy.sample(n).data(), rows, cols);
      if (has_bias_) {
        for (Eigen::Index o = 0; o < rows; ++o) bias_.grad[o] += g.row(o).sum();
      }
      if (pointwise()) {
        ConstMapMat xin(input_.sample(n).data(), static_cast<Eigen::Index>(in_), cols);
        dw.noalias() += g * xin.transpose();
        MapMat(dx.sample(n).data(), static_cast<Eigen::Index>(in_), cols).noalias() =
            wmat.transpose() * g;
      } else {
        im2col(input_.sample(n), h, w, oh, ow, col);
        dw.noalias() += g * col.transpose();
        dcol.noalias() = wmat.transpose() * g;
        col2im(dcol, dx.sample(n), h, w, oh, ow);
      }
    }
  }

  void depthwise_forward(const Tensor4<T>& x, Tensor4<T>& y) const {
    const std::size_t h = x.height(), w = x.width(), oh = y.height(), ow = y.width();
    for (std::size_t n = 0; n < x.batch(); ++n) {
      for (std::size_t c = 0; c < in_; ++c) {
        const T* src = x.plane(n, c).data();
        T* dst = y.plane(n, c).data();
        const T* ker = weight_.value.data() + c * k_ * k_;
        const T b = has_bias_ ? bias_.value[c] : T(0);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            T acc = b;
            for (std::size_t ki = 0; ki < k_; ++ki) {
              const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kj = 0; kj < k_; ++kj) {
                const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                acc += ker[ki * k_ + kj] *
                       src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
              }
            }
            dst[oy * ow + ox] = acc;
          }
        }
      }
    }
  }

  void depthwise_backward(const Tensor4<T>& dy, Tensor4<T>& dx) {
    const std::size_t h = input_.height(), w = input_.width(), oh = dy.height(), ow = dy.width();
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      for (std::size_t c = 0; c < in_; ++c) {
        const T* src = input_.plane(n, c).data();
        const T* g = dy.plane(n, c).data();
        T* dsrc = dx.plane(n, c).data();
        const T* ker = weight_.value.data() + c * k_ * k_;
        T* dker = weight_.grad.data() + c * k_ * k_;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T go = g[oy * ow + ox];
            if (has_bias_) bias_.grad[c] += go;
            for (std::size_t ki = 0; ki < k_; ++ki) {
              const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kj = 0; kj < k_; ++kj) {
                const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t idx =
                    static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                dker[ki * k_ + kj] += go * src[idx];
                dsrc[idx] += go * ker[ki * k_ + kj];
              }
            }
          }
        }
      }
    }
  }

  std::size_t in_, out_, k_, stride_, pad_, groups_;
  bool has_bias_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor4<T> input_;
};

/// Batch normalization over (N, H, W) per channel. Also used for (N x D)
/// vectors through as_tensor(). Running statistics are buffers.
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double eps = 1e-5)
      : c_(channels), momentum_(momentum), eps_(eps), gamma_({channels}, T(1)),
        beta_({channels}, T(0)), running_mean_({channels}, T(0), false),
        running_var_({channels}, T(1), false) {}

  Shape4 output_shape(const Shape4& in) const override { return in; }

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override {
    if (x.channels() != c_) throw std::invalid_argument("BatchNorm channel mismatch");
    const std::size_t hw = x.height() * x.width();
    const std::size_t m = x.batch() * hw;
    Tensor4<T> y(x.shape());
    train_ = mode == Mode::train;
    if (train_) {
      xhat_ = Tensor4<T>(x.shape());
      inv_std_.assign(c_, T(0));
    }
    for (std::size_t c = 0; c < c_; ++c) {
      T mean, var;
      if (train_) {
        double s = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
          for (T v : x.plane(n, c)) s += static_cast<double>(v);
        mean = static_cast<T>(s / static_cast<double>(m));
        double sq = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
          for (T v : x.plane(n, c)) sq += static_cast<double>((v - mean) * (v - mean));
        var = static_cast<T>(sq / static_cast<double>(m));
        const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : sq;
        running_mean_.value[c] = static_cast<T>((1.0 - momentum_) * running_mean_.value[c] +
                                                momentum_ * static_cast<double>(mean));
        running_var_.value[c] = static_cast<T>((1.0 - momentum_) * running_var_.value[c] +
                                               momentum_ * unbiased);
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps_));
      if (train_) inv_std_[c] = inv;
      const T g = gamma_.value[c], b = beta_.value[c];
      for (std::size_t n = 0; n < x.batch(); ++n) {
        auto src = x.plane(n, c);
        auto dst = y.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = (src[i] - mean) * inv;
          if (train_) xhat_.plane(n, c)[i] = xh;
          dst[i] = g * xh + b;
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> dx(dy.shape());
    const std::size_t hw = dy.height() * dy.width();
    const T m = static_cast<T>(dy.batch() * hw);
    for (std::size_t c = 0; c < c_; ++c) {
      T sum_dy(0), sum_dy_xhat(0);
      for (std::size_t n = 0; n < dy.batch(); ++n) {
        auto g = dy.plane(n, c);
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = train_ ? xhat_.plane(n, c)[i] : T(0);
          sum_dy += g[i];
          sum_dy_xhat += g[i] * xh;
        }
      }
      gamma_.grad[c] += train_ ? sum_dy_xhat : T(0);
      beta_.grad[c] += sum_dy;
      const T gam = gamma_.value[c];
      if (train_) {
        const T k = gam * inv_std_[c] / m;
        for (std::size_t n = 0; n < dy.batch(); ++n) {
          auto g = dy.plane(n, c);
          auto xh = xhat_.plane(n, c);
          auto d = dx.plane(n, c);
          for (std::size_t i = 0; i < hw; ++i) d[i] = k * (m * g[i] - sum_dy - xh[i] * sum_dy_xhat);
        }
      } else {
        // Eval-mode backward treats the running statistics as constants.
        const T k = gam / std::sqrt(running_var_.value[c] + static_cast<T>(eps_));
        for (std::size_t n = 0; n < dy.batch(); ++n) {
          auto g = dy.plane(n, c);
          auto d = dx.plane(n, c);
          for (std::size_t i = 0; i < hw; ++i) d[i] = k * g[i];
        }
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    out.push_back({join_path(prefix, "weight"), &gamma_});
    out.push_back({join_path(prefix, "bias"), &beta_});
    out.push_back({join_path(prefix, "running_mean"), &running_mean_});
    out.push_back({join_path(prefix, "running_var"), &running_var_});
  }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  std::size_t c_;
  double momentum_, eps_;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  bool train_ = false;
  Tensor4<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Shape4 output_shape(const Shape4& in) const override { return in; }

  Tensor4<T> forward(const Tensor4<T>& x, Mode) override {
    Tensor4<T> y(x.shape());
    mask_.assign(x.size(), false);
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = x.data()[i] > T(0);
      y.data()[i] = mask_[i] ? x.data()[i] : T(0);
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data()[i] = mask_[i] ? dy.data()[i] : T(0);
    return dx;
  }

 private:
  std::vector<bool> mask_;
};

enum class PoolKind { average, max };

/// Sliding-window spatial pooling (down-sampling inside the trunk). Average
/// pooling counts padded cells as zeros, max pooling ignores them.
template <typename T>
class Pool2d : public Layer<T> {
 public:
  Pool2d(PoolKind kind, std::size_t kernel, std::size_t stride, std::size_t pad = 0)
      : kind_(kind), k_(kernel), stride_(stride), pad_(pad) {}

  Shape4 output_shape(const Shape4& in) const override {
    return {in.n, in.c, conv_out_size(in.h, k_, stride_, pad_),
            conv_out_size(in.w, k_, stride_, pad_)};
  }

  Tensor4<T> forward(const Tensor4<T>& x, Mode) override {
    in_shape_ = x.shape();
    Tensor4<T> y(output_shape(x.shape()));
    const std::size_t h = x.height(), w = x.width(), oh = y.height(), ow = y.width();
    if (kind_ == PoolKind::max) argmax_.assign(y.size(), 0);
    const T inv_area = T(1) / static_cast<T>(k_ * k_);
    std::size_t out_idx = 0;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      for (std::size_t c = 0; c < x.channels(); ++c) {
        auto src = x.plane(n, c);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox, ++out_idx) {
            T acc = kind_ == PoolKind::max ? -std::numeric_limits<T>::infinity() : T(0);
            std::size_t best = 0;
            for (std::size_t ki = 0; ki < k_; ++ki) {
              const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kj = 0; kj < k_; ++kj) {
                const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t idx =
                    static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                if (kind_ == PoolKind::max) {
                  if (src[idx] > acc) {
                    acc = src[idx];
                    best = idx;
                  }
                } else {
                  acc += src[idx];
                }
              }
            }
            if (kind_ == PoolKind::max) {
              argmax_[out_idx] = best;
              y.data()[out_idx] = acc;
            } else {
              y.data()[out_idx] = acc * inv_area;
            }
          }
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> dx(in_shape_);
    const std::size_t h = in_shape_.h, w = in_shape_.w, oh = dy.height(), ow = dy.width();
    const T inv_area = T(1) / static_cast<T>(k_ * k_);
    std::size_t out_idx = 0;
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      for (std::size_t c = 0; c < dy.channels(); ++c) {
        auto dst = dx.plane(n, c);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox, ++out_idx) {
            const T g = dy.data()[out_idx];
            if (kind_ == PoolKind::max) {
              dst[argmax_[out_idx]] += g;
              continue;
            }
            for (std::size_t ki = 0; ki < k_; ++ki) {
              const long iy = static_cast<long>(oy * stride_ + ki) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kj = 0; kj < k_; ++kj) {
                const long ix = static_cast<long>(ox * stride_ + kj) - static_cast<long>(pad_);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] +=
                    g * inv_area;
              }
            }
          }
        }
      }
    }
    return dx;
  }

 private:
  PoolKind kind_;
  std::size_t k_, stride_, pad_;
  Shape4 in_shape_;
  std::vector<std::size_t> argmax_;
};

/// Ordered chain of named layers.
template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  Sequential& add(std::string name, std::unique_ptr<Layer<T>> layer) {
    layers_.emplace_back(std::move(name), std::move(layer));
    return *this;
  }

  Shape4 output_shape(const Shape4& in) const override {
    Shape4 s = in;
    for (const auto& [name, layer] : layers_) s = layer->output_shape(s);
    return s;
  }

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override {
    Tensor4<T> h = x;
    for (auto& [name, layer] : layers_) h = layer->forward(h, mode);
    return h;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->second->backward(g);
    return g;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    for (auto& [name, layer] : layers_) layer->collect(join_path(prefix, name), out);
  }

  bool empty() const { return layers_.empty(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer<T>>>> layers_;
};

/// conv (no bias) + batch norm, optionally followed by ReLU.
template <typename T>
std::unique_ptr<Sequential<T>> conv_bn(std::size_t in, std::size_t out, std::size_t kernel,
                                       std::size_t stride, std::size_t pad, Rng& rng,
                                       bool relu = true, std::size_t groups = 1) {
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("conv", std::make_unique<Conv2d<T>>(in, out, kernel, stride, pad, groups, false, rng));
  seq->add("bn", std::make_unique<BatchNorm<T>>(out));
  if (relu) seq->add("relu", std::make_unique<ReLU<T>>());
  return seq;
}

/// Fully connected map on (N x D) rows: y = x W^T + b, W stored [out x in].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng, double init_std = -1.0)
      : in_(in), out_(out), has_bias_(bias), weight_({out, in}) {
    if (init_std > 0) {
      for (auto& v : weight_.value) v = static_cast<T>(rng.normal(0.0, init_std));
    } else {
      kaiming_normal(weight_, in, rng);
    }
    if (has_bias_) bias_ = Parameter<T>({out});
  }

  Matrix<T> forward(const Matrix<T>& x) {
    if (static_cast<std::size_t>(x.cols()) != in_) {
      throw std::invalid_argument("Linear expected input dim " + std::to_string(in_) + ", got " +
                                  std::to_string(x.cols()));
    }
    input_ = x;
    Matrix<T> y = x * weight_matrix().transpose();
    if (has_bias_) y.rowwise() += bias_vector().transpose();
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    Eigen::Map<Matrix<T>> dw(weight_.grad.data(), static_cast<Eigen::Index>(out_),
                             static_cast<Eigen::Index>(in_));
    dw.noalias() += dy.transpose() * input_;
    if (has_bias_) {
      Eigen::Map<Vector<T>> db(bias_.grad.data(), static_cast<Eigen::Index>(out_));
      db += dy.colwise().sum().transpose();
    }
    return dy * weight_matrix();
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({join_path(prefix, "weight"), &weight_});
    if (has_bias_) out.push_back({join_path(prefix, "bias"), &bias_});
  }

  Eigen::Map<const Matrix<T>> weight_matrix() const {
    return {weight_.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_)};
  }
  Eigen::Map<const Vector<T>> bias_vector() const {
    return {bias_.value.data(), static_cast<Eigen::Index>(out_)};
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  bool has_bias_ = false;
  Parameter<T> weight_, bias_;
  Matrix<T> input_;
};

}  // namespace bcosnet
