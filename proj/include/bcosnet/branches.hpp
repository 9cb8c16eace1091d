#pragma once

#include "bcosnet/backbone.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/pooling.hpp"
#include "bcosnet/tensor.hpp"

#include <cstddef>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

/// Channel reduction on pooled vectors: 1x1 projection + batch norm + ReLU.
template <typename T>
class Bottleneck {
 public:
  Bottleneck(std::size_t in, std::size_t out, Rng& rng)
      : proj_(in, out, /*bias=*/false, rng), bn_(out) {
    if (out >= in) throw std::invalid_argument("bottleneck must reduce dimensionality");
  }

  Matrix<T> forward(const Matrix<T>& x, Mode mode) {
    Tensor4<T> h = bn_.forward(as_tensor(proj_.forward(x)), mode);
    return as_matrix(relu_.forward(h, mode));
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    Tensor4<T> g = bn_.backward(relu_.backward(as_tensor(dy)));
    return proj_.backward(as_matrix(g));
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    proj_.collect(join_path(prefix, "proj"), out);
    bn_.collect(join_path(prefix, "bn"), out);
  }

  Linear<T>& projection() { return proj_; }
  std::size_t out_dim() const { return proj_.out_dim(); }

 private:
  Linear<T> proj_;
  BatchNorm<T> bn_;
  ReLU<T> relu_;
};

/// Residual relation fusion q = a' + B([a', b']) with a' = B_a(a), b' = B_b(b).
/// Shared by the contrastive (a = max, b = contrast) and one-vs-rest
/// (a = part, b = rest) heads.
template <typename T>
class ResidualFusion {
 public:
  ResidualFusion(std::size_t in, std::size_t reduced, Rng& rng)
      : reduce_a_(in, reduced, rng), reduce_b_(in, reduced, rng), fuse_(2 * reduced, reduced, rng),
        c_(reduced) {}

  Matrix<T> forward(const Matrix<T>& a, const Matrix<T>& b, Mode mode) {
    Matrix<T> ra = reduce_a_.forward(a, mode);
    Matrix<T> rb = reduce_b_.forward(b, mode);
    Matrix<T> cat(ra.rows(), 2 * ra.cols());
    cat << ra, rb;
    return ra + fuse_.forward(cat, mode);
  }

  /// Returns (dL/da, dL/db).
  std::pair<Matrix<T>, Matrix<T>> backward(const Matrix<T>& dq) {
    const auto c = static_cast<Eigen::Index>(c_);
    Matrix<T> dcat = fuse_.backward(dq);
    Matrix<T> dra = dq + dcat.leftCols(c);
    Matrix<T> drb = dcat.rightCols(c);
    return {reduce_a_.backward(dra), reduce_b_.backward(drb)};
  }

  void collect(const std::string& prefix, ParameterList<T>& out, const std::string& a_name,
               const std::string& b_name) {
    reduce_a_.collect(join_path(prefix, a_name), out);
    reduce_b_.collect(join_path(prefix, b_name), out);
    fuse_.collect(join_path(prefix, "fuse"), out);
  }

  Bottleneck<T>& reduce_a() { return reduce_a_; }
  Bottleneck<T>& reduce_b() { return reduce_b_; }
  Bottleneck<T>& fuse() { return fuse_; }

 private:
  Bottleneck<T> reduce_a_, reduce_b_, fuse_;
  std::size_t c_;
};

template <typename T>
struct ContrastiveFeatures {
  Matrix<T> f_avg;   // sum of per-stripe averages
  Matrix<T> f_max;   // max over the whole map
  Matrix<T> f_cont;  // (f_avg - f_max) / (n - 1)
  std::vector<std::size_t> argmax;
};

/// Pooled inputs of the global contrastive feature over `num_stripes` stripes.
template <typename T>
ContrastiveFeatures<T> contrastive_features(const Tensor4<T>& fmap, std::size_t num_stripes) {
  if (num_stripes < 2) throw std::invalid_argument("contrastive pooling needs at least 2 stripes");
  const auto part = StripePartition::make(fmap.height(), num_stripes);
  ContrastiveFeatures<T> out;
  out.f_avg = Matrix<T>::Zero(fmap.batch(), fmap.channels());
  for (const auto& s : part.stripes) out.f_avg += avg_pool(fmap, s);
  auto mp = max_pool(fmap, all_rows(fmap.height()));
  out.f_max = std::move(mp.values);
  out.argmax = std::move(mp.argmax);
  out.f_cont = (out.f_avg - out.f_max) / static_cast<T>(num_stripes - 1);
  return out;
}

/// Rest features r_i = mean of all parts except i.
template <typename T>
std::vector<Matrix<T>> one_vs_rest(const std::vector<Matrix<T>>& parts) {
  const std::size_t h = parts.size();
  if (h < 2) throw std::invalid_argument("one-vs-rest needs at least 2 parts");
  Matrix<T> total = parts.front();
  for (std::size_t i = 1; i < h; ++i) total += parts[i];
  std::vector<Matrix<T>> rest;
  rest.reserve(h);
  for (const auto& f : parts) rest.push_back((total - f) / static_cast<T>(h - 1));
  return rest;
}

/// Maps a branch's tail feature map to its embedding.
template <typename T>
class Branch {
 public:
  virtual ~Branch() = default;
  virtual BranchId id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual Matrix<T> forward(const Tensor4<T>& fmap, Mode mode) = 0;
  virtual Tensor4<T> backward(const Matrix<T>& demb) = 0;
  virtual void collect(const std::string& prefix, ParameterList<T>& out) = 0;
};

/// Horizontal stripes pooled with a shared GeM exponent and concatenated into
/// a single part vector [f_1; ...; f_n].
template <typename T>
class LocalBranch : public Branch<T> {
 public:
  LocalBranch(std::size_t channels, std::size_t stripes, const GemParams& gem, bool gem_enabled)
      : c_(channels), stripes_(stripes), pool_(gem, gem_enabled) {}

  BranchId id() const override { return BranchId::local; }
  std::size_t dim() const override { return stripes_ * c_; }

  Matrix<T> forward(const Tensor4<T>& fmap, Mode) override {
    return pool_.forward(fmap, StripePartition::make(fmap.height(), stripes_).stripes);
  }
  Tensor4<T> backward(const Matrix<T>& demb) override { return pool_.backward(demb); }
  void collect(const std::string& prefix, ParameterList<T>& out) override {
    pool_.collect(join_path(prefix, "gem"), out);
  }
  GemPool<T>& pool() { return pool_; }

 private:
  std::size_t c_, stripes_;
  GemPool<T> pool_;
};

/// Whole-map GeM pooling.
template <typename T>
class GlobalBranch : public Branch<T> {
 public:
  GlobalBranch(std::size_t channels, const GemParams& gem, bool gem_enabled)
      : c_(channels), pool_(gem, gem_enabled) {}

  BranchId id() const override { return BranchId::global; }
  std::size_t dim() const override { return c_; }

  Matrix<T> forward(const Tensor4<T>& fmap, Mode) override {
    return pool_.forward(fmap, {all_rows(fmap.height())});
  }
  Tensor4<T> backward(const Matrix<T>& demb) override { return pool_.backward(demb); }
  void collect(const std::string& prefix, ParameterList<T>& out) override {
    pool_.collect(join_path(prefix, "gem"), out);
  }
  GemPool<T>& pool() { return pool_; }

 private:
  std::size_t c_;
  GemPool<T> pool_;
};

/// Global contrastive pooling: q0 = f'_max + B([f'_max, f'_cont]).
template <typename T>
class GcpBranch : public Branch<T> {
 public:
  GcpBranch(std::size_t channels, std::size_t reduced, std::size_t stripes, Rng& rng)
      : c_(channels), reduced_(reduced), stripes_(stripes), fusion_(channels, reduced, rng) {
    if (stripes < 2) throw std::invalid_argument("contrastive pooling needs at least 2 stripes");
  }

  BranchId id() const override { return BranchId::gcp; }
  std::size_t dim() const override { return reduced_; }

  Matrix<T> forward(const Tensor4<T>& fmap, Mode mode) override {
    shape_ = fmap.shape();
    feats_ = contrastive_features(fmap, stripes_);
    return fusion_.forward(feats_.f_max, feats_.f_cont, mode);
  }

  Tensor4<T> backward(const Matrix<T>& demb) override {
    auto [dmax, dcont] = fusion_.backward(demb);
    const T inv = T(1) / static_cast<T>(stripes_ - 1);
    Matrix<T> davg = dcont * inv;
    dmax -= dcont * inv;
    Tensor4<T> dx(shape_);
    for (const auto& s : StripePartition::make(shape_.h, stripes_).stripes)
      avg_pool_backward(davg, s, dx);
    max_pool_backward(dmax, feats_.argmax, all_rows(shape_.h), dx);
    return dx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    fusion_.collect(prefix, out, "reduce_max", "reduce_cont");
  }

  ResidualFusion<T>& fusion() { return fusion_; }
  const ContrastiveFeatures<T>& last_features() const { return feats_; }

 private:
  std::size_t c_, reduced_, stripes_;
  ResidualFusion<T> fusion_;
  ContrastiveFeatures<T> feats_;
  Shape4 shape_;
};

/// One-vs-rest relation: for each split h and part i,
/// q_i = f'_i + B([f'_i, r'_i]); output = concat over splits of concat_i q_i.
template <typename T>
class OvrBranch : public Branch<T> {
 public:
  OvrBranch(std::size_t channels, std::size_t reduced, std::vector<std::size_t> splits, Rng& rng)
      : c_(channels), reduced_(reduced), splits_(std::move(splits)) {
    if (splits_.empty()) throw std::invalid_argument("one-vs-rest needs at least one split");
    for (auto h : splits_) {
      if (h < 2) throw std::invalid_argument("one-vs-rest split must have at least 2 parts");
      std::vector<std::unique_ptr<ResidualFusion<T>>> parts;
      for (std::size_t i = 0; i < h; ++i)
        parts.push_back(std::make_unique<ResidualFusion<T>>(channels, reduced, rng));
      fusions_.push_back(std::move(parts));
    }
  }

  BranchId id() const override { return BranchId::ovr; }
  std::size_t dim() const override {
    return reduced_ * std::accumulate(splits_.begin(), splits_.end(), std::size_t{0});
  }

  Matrix<T> forward(const Tensor4<T>& fmap, Mode mode) override {
    shape_ = fmap.shape();
    Matrix<T> out(fmap.batch(), static_cast<Eigen::Index>(dim()));
    Eigen::Index col = 0;
    const auto c = static_cast<Eigen::Index>(reduced_);
    for (std::size_t s = 0; s < splits_.size(); ++s) {
      const auto part = StripePartition::make(fmap.height(), splits_[s]);
      std::vector<Matrix<T>> feats;
      for (const auto& r : part.stripes) feats.push_back(avg_pool(fmap, r));
      const auto rest = one_vs_rest(feats);
      for (std::size_t i = 0; i < feats.size(); ++i, col += c)
        out.middleCols(col, c) = fusions_[s][i]->forward(feats[i], rest[i], mode);
    }
    return out;
  }

  Tensor4<T> backward(const Matrix<T>& demb) override {
    Tensor4<T> dx(shape_);
    Eigen::Index col = 0;
    const auto c = static_cast<Eigen::Index>(reduced_);
    for (std::size_t s = 0; s < splits_.size(); ++s) {
      const std::size_t h = splits_[s];
      std::vector<Matrix<T>> dpart, drest;
      for (std::size_t i = 0; i < h; ++i, col += c) {
        auto [df, dr] = fusions_[s][i]->backward(demb.middleCols(col, c));
        dpart.push_back(std::move(df));
        drest.push_back(std::move(dr));
      }
      // r_i = (sum_j f_j - f_i) / (h - 1)
      Matrix<T> drest_total = drest.front();
      for (std::size_t i = 1; i < h; ++i) drest_total += drest[i];
      const T inv = T(1) / static_cast<T>(h - 1);
      const auto part = StripePartition::make(shape_.h, h);
      for (std::size_t j = 0; j < h; ++j) {
        Matrix<T> df = dpart[j] + (drest_total - drest[j]) * inv;
        avg_pool_backward(df, part.stripes[j], dx);
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    for (std::size_t s = 0; s < splits_.size(); ++s) {
      const std::string split = join_path(prefix, "h" + std::to_string(splits_[s]));
      for (std::size_t i = 0; i < fusions_[s].size(); ++i)
        fusions_[s][i]->collect(join_path(split, "part" + std::to_string(i + 1)), out, "reduce_part",
                                "reduce_rest");
    }
  }

  const std::vector<std::size_t>& splits() const { return splits_; }

 private:
  std::size_t c_, reduced_;
  std::vector<std::size_t> splits_;
  std::vector<std::vector<std::unique_ptr<ResidualFusion<T>>>> fusions_;
  Shape4 shape_;
};

}  // namespace bcosnet
