#pragma once

#include "bcosnet/backbone.hpp"
#include "bcosnet/branches.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/losses.hpp"
#include "bcosnet/pooling.hpp"
#include "bcosnet/regularization.hpp"
#include "bcosnet/tensor.hpp"

#include <array>
#include <cstddef>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

struct ModelConfig {
  TrunkConfig trunk;
  BranchSet branches = BranchSet::all();
  std::size_t bottleneck_dim = 256;
  std::size_t local_stripes = 4;
  std::size_t gcp_stripes = 6;
  std::vector<std::size_t> ovr_splits{6};
  bool gem_enabled = true;
  GemParams local_gem{1.0, true, 1e-6};
  GemParams global_gem{6.5, true, 1e-6};
  bool neck_bn = true;
  bool bdb_enabled = false;
  BdbConfig bdb;
  bool gcd_enabled = false;
  GcdConfig gcd;
  std::size_t num_identities = 1;

  void validate() const {
    trunk.validate();
    if (branches.empty()) throw std::invalid_argument("at least one branch must be enabled");
    if (num_identities == 0) throw std::invalid_argument("num_identities must be positive");
    if ((branches.contains(BranchId::gcp) || branches.contains(BranchId::ovr)) &&
        bottleneck_dim >= trunk.out_channels) {
      throw std::invalid_argument("bottleneck width must be smaller than trunk channels");
    }
    if (local_stripes == 0) throw std::invalid_argument("local stripe count must be positive");
    if (gcp_stripes < 2) throw std::invalid_argument("contrastive stripe count must be >= 2");
    std::set<std::size_t> seen;
    for (auto h : ovr_splits) {
      if (h < 2) throw std::invalid_argument("one-vs-rest splits must be >= 2");
      if (!seen.insert(h).second) throw std::invalid_argument("duplicate one-vs-rest split");
    }
    if (ovr_splits.empty()) throw std::invalid_argument("one-vs-rest needs at least one split");
    bdb.validate();
    gcd.validate();
  }

  /// Embedding width of one branch: (4C, C, c, sum(splits) * c) by default.
  std::size_t branch_dim(BranchId id) const {
    const std::size_t c = trunk.out_channels;
    switch (id) {
      case BranchId::local: return local_stripes * c;
      case BranchId::global: return c;
      case BranchId::gcp: return bottleneck_dim;
      case BranchId::ovr:
        return bottleneck_dim * std::accumulate(ovr_splits.begin(), ovr_splits.end(), std::size_t{0});
    }
    throw std::invalid_argument("unknown branch id");
  }

  std::size_t concat_dim() const {
    std::size_t d = 0;
    for (auto id : branches.ids()) d += branch_dim(id);
    return d;
  }

  /// Minimum feature-map height the enabled branches need.
  std::size_t min_feature_height() const {
    std::size_t h = 1;
    if (branches.contains(BranchId::local)) h = std::max(h, local_stripes);
    if (branches.contains(BranchId::gcp)) h = std::max(h, gcp_stripes);
    if (branches.contains(BranchId::ovr))
      for (auto s : ovr_splits) h = std::max(h, s);
    return h;
  }
};

template <typename T>
struct BranchForward {
  BranchId id;
  Matrix<T> embedding;  // pre-neck feature, used for metric losses and retrieval
  Matrix<T> logits;
};

template <typename T>
struct ModelOutput {
  std::vector<BranchForward<T>> branches;

  const BranchForward<T>& at(BranchId id) const {
    for (const auto& b : branches)
      if (b.id == id) return b;
    throw std::invalid_argument("branch '" + std::string(to_string(id)) + "' is not enabled");
  }
};

template <typename T>
struct BranchGrad {
  BranchId id;
  Matrix<T> d_embedding;  // may be empty (no metric-loss gradient)
  Matrix<T> d_logits;     // may be empty (no ID-loss gradient)
};

/// Shared trunk, four cooperating branches with their tails, optional
/// batch-norm necks, regularizers and identity classifiers.
template <typename T>
class BcOsnet {
 public:
  BcOsnet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg), backbone_(cfg.trunk, cfg.branches, rng) {
    cfg_.validate();
    const std::size_t c = cfg_.trunk.out_channels;
    for (auto id : cfg_.branches.ids()) {
      auto& slot = slots_[index_of(id)];
      switch (id) {
        case BranchId::local:
          slot.branch = std::make_unique<LocalBranch<T>>(c, cfg_.local_stripes, cfg_.local_gem,
                                                         cfg_.gem_enabled);
          break;
        case BranchId::global:
          slot.branch = std::make_unique<GlobalBranch<T>>(c, cfg_.global_gem, cfg_.gem_enabled);
          break;
        case BranchId::gcp:
          slot.branch = std::make_unique<GcpBranch<T>>(c, cfg_.bottleneck_dim, cfg_.gcp_stripes, rng);
          break;
        case BranchId::ovr:
          slot.branch = std::make_unique<OvrBranch<T>>(c, cfg_.bottleneck_dim, cfg_.ovr_splits, rng);
          break;
      }
      const std::size_t dim = slot.branch->dim();
      if (cfg_.neck_bn) slot.neck = std::make_unique<BatchNorm<T>>(dim);
      slot.head = std::make_unique<ClassifierHead<T>>(dim, cfg_.num_identities, rng);
      slot.bdb = BatchDropBlock<T>(cfg_.bdb);
      slot.gcd = GaussianDropout<T>(cfg_.gcd);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return backbone_; }

  Branch<T>& branch(BranchId id) { return *slot(id).branch; }
  ClassifierHead<T>& head(BranchId id) { return *slot(id).head; }
  std::size_t branch_dim(BranchId id) const { return cfg_.branch_dim(id); }
  std::size_t concat_dim() const { return cfg_.concat_dim(); }

  void set_trunk_frozen(bool frozen) {
    trunk_frozen_ = frozen;
    ParameterList<T> trunk;
    backbone_.collect_trunk("trunk", trunk);
    for (auto& p : trunk)
      if (p.path.find("running_") == std::string::npos) p.param->trainable = !frozen;
  }
  bool trunk_frozen() const { return trunk_frozen_; }

  /// Full forward. `noise` drives the regularizers in training mode and may
  /// be null when they are disabled or in eval mode.
  ModelOutput<T> forward(const Tensor4<T>& images, Mode mode, Rng* noise = nullptr) {
    if (images.height() / cfg_.trunk.stride < cfg_.min_feature_height()) {
      throw std::invalid_argument(
          "feature map height " + std::to_string(images.height() / cfg_.trunk.stride) +
          " is below the " + std::to_string(cfg_.min_feature_height()) +
          " rows the enabled branches need");
    }
    const bool regularize = mode == Mode::train && (cfg_.bdb_enabled || cfg_.gcd_enabled);
    if (regularize && noise == nullptr) throw std::invalid_argument("regularizers need an RNG");
    fmap_shape_ = {};
    Tensor4<T> fmap = backbone_.trunk_forward(images, trunk_frozen_ ? Mode::eval : mode);
    fmap_shape_ = fmap.shape();

    std::optional<Tensor4<T>> shared;
    if (cfg_.trunk.share_tail_stages) shared = backbone_.tail(BranchId::local).forward(fmap, mode);

    ModelOutput<T> out;
    for (auto id : cfg_.branches.ids()) {
      auto& s = slot(id);
      Tensor4<T> t = shared ? *shared : backbone_.tail(id).forward(fmap, mode);
      s.bdb_on = mode == Mode::train && cfg_.bdb_enabled && cfg_.bdb.apply_to.contains(id);
      if (s.bdb_on) t = s.bdb.forward(t, *noise, mode);
      BranchForward<T> bf{id, s.branch->forward(t, mode), {}};
      Matrix<T> h = s.neck ? as_matrix(s.neck->forward(as_tensor(bf.embedding), mode)) : bf.embedding;
      if (mode == Mode::train && cfg_.gcd_enabled) h = s.gcd.forward(h, *noise, mode);
      bf.logits = s.head->forward(h);
      out.branches.push_back(std::move(bf));
    }
    last_mode_ = mode;
    return out;
  }

  /// Back-propagates per-branch gradients through heads, necks, branches,
  /// tails and (unless frozen) the trunk, accumulating parameter gradients.
  void backward(const std::vector<BranchGrad<T>>& grads) {
    if (last_mode_ != Mode::train) throw std::logic_error("backward requires a training-mode forward");
    Tensor4<T> dfmap(fmap_shape_);
    std::optional<Tensor4<T>> dshared;
    for (const auto& g : grads) {
      auto& s = slot(g.id);
      const auto n = static_cast<Eigen::Index>(fmap_shape_.n);
      const auto dim = static_cast<Eigen::Index>(s.branch->dim());
      Matrix<T> demb = Matrix<T>::Zero(n, dim);
      if (g.d_logits.size() > 0) {
        Matrix<T> dh = s.head->backward(g.d_logits);
        if (cfg_.gcd_enabled) dh = s.gcd.backward(dh);
        demb += s.neck ? as_matrix(s.neck->backward(as_tensor(dh))) : dh;
      }
      if (g.d_embedding.size() > 0) demb += g.d_embedding;
      Tensor4<T> dt = s.branch->backward(demb);
      if (s.bdb_on) dt = s.bdb.backward(dt);
      if (cfg_.trunk.share_tail_stages) {
        if (dshared) *dshared += dt;
        else dshared = std::move(dt);
      } else {
        dfmap += backbone_.tail(g.id).backward(dt);
      }
    }
    if (dshared) dfmap += backbone_.tail(BranchId::local).backward(*dshared);
    if (!trunk_frozen_) backbone_.trunk_backward(dfmap);
  }

  /// Eval-mode retrieval feature: enabled branch embeddings concatenated in
  /// (local, global, gcp, ovr) order.
  Matrix<T> extract(const Tensor4<T>& images) {
    auto out = forward(images, Mode::eval);
    Matrix<T> feat(static_cast<Eigen::Index>(images.batch()), static_cast<Eigen::Index>(concat_dim()));
    Eigen::Index col = 0;
    for (const auto& b : out.branches) {
      feat.middleCols(col, b.embedding.cols()) = b.embedding;
      col += b.embedding.cols();
    }
    return feat;
  }

  /// Every parameter and buffer keyed by a stable module path.
  ParameterList<T> parameters() {
    ParameterList<T> out;
    backbone_.collect_trunk("trunk", out);
    backbone_.collect_tails("tail", out);
    for (auto id : cfg_.branches.ids()) {
      auto& s = slot(id);
      const std::string name(to_string(id));
      s.branch->collect(join_path("branch", name), out);
      if (s.neck) s.neck->collect(join_path("neck", name), out);
      s.head->collect(join_path("head", name), out);
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

 private:
  struct Slot {
    std::unique_ptr<Branch<T>> branch;
    std::unique_ptr<BatchNorm<T>> neck;
    std::unique_ptr<ClassifierHead<T>> head;
    BatchDropBlock<T> bdb;
    GaussianDropout<T> gcd;
    bool bdb_on = false;
  };

  Slot& slot(BranchId id) {
    auto& s = slots_[index_of(id)];
    if (!s.branch) throw std::invalid_argument("branch '" + std::string(to_string(id)) + "' is not enabled");
    return s;
  }

  ModelConfig cfg_;
  Backbone<T> backbone_;
  std::array<Slot, 4> slots_;
  Shape4 fmap_shape_;
  Mode last_mode_ = Mode::eval;
  bool trunk_frozen_ = false;
};

}  // namespace bcosnet
