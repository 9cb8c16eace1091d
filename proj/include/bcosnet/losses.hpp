#pragma once

#include "bcosnet/backbone.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bcosnet {

template <typename T>
struct LossGrad {
  T value{};
  Matrix<T> grad;  // dL/d(input)
};

inline void check_labels(std::span<const int> labels, std::size_t batch, std::size_t num_classes) {
  if (labels.size() != batch) throw std::invalid_argument("label count does not match batch size");
  if (batch == 0) throw std::invalid_argument("empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

/// Mean negative log-likelihood of the true class under softmax(logits).
template <typename T>
LossGrad<T> softmax_cross_entropy(const Matrix<T>& logits, std::span<const int> labels) {
  check_labels(labels, static_cast<std::size_t>(logits.rows()),
               static_cast<std::size_t>(logits.cols()));
  const auto n = logits.rows();
  LossGrad<T> out{T(0), Matrix<T>(n, logits.cols())};
  for (Eigen::Index i = 0; i < n; ++i) {
    const T top = logits.row(i).maxCoeff();
    auto e = (logits.row(i).array() - top).exp();
    const T z = e.sum();
    out.grad.row(i) = e / z;
    out.value += std::log(z) + top - logits(i, labels[static_cast<std::size_t>(i)]);
    out.grad(i, labels[static_cast<std::size_t>(i)]) -= T(1);
  }
  out.value /= static_cast<T>(n);
  out.grad /= static_cast<T>(n);
  return out;
}

/// Linear identity classifier W^T f + b (one per enabled branch).
template <typename T>
class ClassifierHead {
 public:
  ClassifierHead(std::size_t embed_dim, std::size_t num_identities, Rng& rng)
      : linear_(embed_dim, num_identities, /*bias=*/true, rng, /*init_std=*/0.001) {}

  Matrix<T> forward(const Matrix<T>& f) { return linear_.forward(f); }
  Matrix<T> backward(const Matrix<T>& dlogits) { return linear_.backward(dlogits); }
  void collect(const std::string& prefix, ParameterList<T>& out) { linear_.collect(prefix, out); }

  std::size_t num_identities() const { return linear_.out_dim(); }
  std::size_t embed_dim() const { return linear_.in_dim(); }
  Linear<T>& linear() { return linear_; }

 private:
  Linear<T> linear_;
};

/// ID-prediction loss of `features` through `head`. Accumulates the head's
/// parameter gradients and returns dL/d(features).
template <typename T>
LossGrad<T> id_loss(const Matrix<T>& features, std::span<const int> labels, ClassifierHead<T>& head) {
  check_labels(labels, static_cast<std::size_t>(features.rows()), head.num_identities());
  auto ce = softmax_cross_entropy(head.forward(features), labels);
  return {ce.value, head.backward(ce.grad)};
}

enum class TripletMode { hinge_margin, softplus };

inline std::string_view to_string(TripletMode m) {
  return m == TripletMode::softplus ? "softplus" : "hinge_margin";
}

struct TripletConfig {
  TripletMode mode = TripletMode::softplus;
  double margin = 0.3;  // hinge mode only
};

template <typename T>
struct TripletResult {
  T value{};
  Matrix<T> grad;
  std::vector<std::size_t> hardest_positive;
  std::vector<std::size_t> hardest_negative;
};

template <typename T>
T euclidean(const Matrix<T>& x, Eigen::Index a, Eigen::Index b) {
  return std::sqrt((x.row(a) - x.row(b)).squaredNorm());
}

/// Rejects batches where some identity has fewer than 2 samples or there are
/// fewer than 2 identities.
inline void check_pk_labels(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  if (counts.size() < 2) throw std::invalid_argument("triplet mining needs at least 2 identities");
  for (const auto& [id, n] : counts) {
    if (n < 2) {
      throw std::invalid_argument("identity " + std::to_string(id) +
                                  " has fewer than 2 instances in the batch");
    }
  }
}

/// Batch-hard triplet loss, mean over anchors. For each anchor the farthest
/// same-label and nearest other-label samples are mined (Euclidean); ties go
/// to the lowest index.
template <typename T>
TripletResult<T> triplet_loss_batch_hard(const Matrix<T>& emb, std::span<const int> labels,
                                         const TripletConfig& cfg) {
  if (labels.size() != static_cast<std::size_t>(emb.rows()))
    throw std::invalid_argument("label count does not match batch size");
  if (cfg.margin < 0) throw std::invalid_argument("triplet margin must be >= 0");
  check_pk_labels(labels);
  const auto n = emb.rows();
  TripletResult<T> out{T(0), Matrix<T>::Zero(n, emb.cols()), {}, {}};
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index pos = -1, neg = -1;
    T dpos(0), dneg(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      const T d = euclidean(emb, a, j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || d > dpos) {
          pos = j;
          dpos = d;
        }
      } else if (neg < 0 || d < dneg) {
        neg = j;
        dneg = d;
      }
    }
    out.hardest_positive.push_back(static_cast<std::size_t>(pos));
    out.hardest_negative.push_back(static_cast<std::size_t>(neg));

    const T x = dpos - dneg;
    T term, slope;
    if (cfg.mode == TripletMode::softplus) {
      term = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      slope = T(1) / (T(1) + std::exp(-x));
    } else {
      const T h = static_cast<T>(cfg.margin) + x;
      term = h > T(0) ? h : T(0);
      slope = h > T(0) ? T(1) : T(0);
    }
    out.value += term;
    if (slope == T(0)) continue;
    if (dpos > T(0)) {
      auto g = ((emb.row(a) - emb.row(pos)) * (slope / dpos)).eval();
      out.grad.row(a) += g;
      out.grad.row(pos) -= g;
    }
    if (dneg > T(0)) {
      auto g = ((emb.row(a) - emb.row(neg)) * (slope / dneg)).eval();
      out.grad.row(a) -= g;
      out.grad.row(neg) += g;
    }
  }
  out.value /= static_cast<T>(n);
  out.grad /= static_cast<T>(n);
  return out;
}

/// Per-class feature centers, updated outside the main optimizer.
template <typename T>
struct CenterState {
  Matrix<T> centers;  // [num_identities x embed_dim]
  double center_lr = 0.5;

  CenterState() = default;
  CenterState(std::size_t num_identities, std::size_t dim, double lr = 0.5)
      : centers(Matrix<T>::Zero(num_identities, dim)), center_lr(lr) {}
};

template <typename T>
struct CenterLossResult {
  T value{};
  Matrix<T> grad;          // dL/dx = x_i - c_{y_i}
  Matrix<T> center_delta;  // sum_{i:y_i=j} (c_j - x_i) / (1 + n_j)
};

/// (1/2) sum_i ||x_i - c_{y_i}||^2 over the batch.
template <typename T>
CenterLossResult<T> center_loss(const Matrix<T>& emb, std::span<const int> labels,
                                const CenterState<T>& state) {
  check_labels(labels, static_cast<std::size_t>(emb.rows()),
               static_cast<std::size_t>(state.centers.rows()));
  if (emb.cols() != state.centers.cols())
    throw std::invalid_argument("center dimension does not match embedding dimension");
  CenterLossResult<T> out{T(0), Matrix<T>(emb.rows(), emb.cols()),
                          Matrix<T>::Zero(state.centers.rows(), state.centers.cols())};
  std::vector<std::size_t> counts(static_cast<std::size_t>(state.centers.rows()), 0);
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    out.grad.row(i) = emb.row(i) - state.centers.row(y);
    out.value += out.grad.row(i).squaredNorm();
    out.center_delta.row(y) -= out.grad.row(i);
    ++counts[static_cast<std::size_t>(y)];
  }
  out.value *= T(0.5);
  for (std::size_t j = 0; j < counts.size(); ++j)
    if (counts[j] > 0) out.center_delta.row(static_cast<Eigen::Index>(j)) /= static_cast<T>(1 + counts[j]);
  return out;
}

template <typename T>
void apply_center_update(CenterState<T>& state, const Matrix<T>& delta) {
  state.centers -= delta * static_cast<T>(state.center_lr);
}

struct LossWeights {
  double id = 1.0;
  double triplet = 1.0;
  double center = 5e-4;

  void validate() const {
    if (id < 0 || triplet < 0 || center < 0) throw std::invalid_argument("loss weights must be >= 0");
    if (id == 0 && triplet == 0 && center == 0)
      throw std::invalid_argument("at least one loss weight must be positive");
  }
};

struct BranchLoss {
  double id = 0.0;
  double triplet = 0.0;
  double center = 0.0;
};

struct LossBundle {
  std::vector<std::pair<BranchId, BranchLoss>> branches;
  double total = 0.0;

  const BranchLoss* find(BranchId id) const {
    for (const auto& [b, l] : branches)
      if (b == id) return &l;
    return nullptr;
  }
};

/// L = sum over branches of (l_id * id + l_tri * triplet + l_ctr * center).
inline LossBundle total_loss(std::vector<std::pair<BranchId, BranchLoss>> parts,
                             const LossWeights& w) {
  if (parts.empty()) throw std::invalid_argument("total loss needs at least one branch");
  w.validate();
  LossBundle out{std::move(parts), 0.0};
  for (const auto& [id, l] : out.branches) out.total += w.id * l.id + w.triplet * l.triplet + w.center * l.center;
  return out;
}

}  // namespace bcosnet
