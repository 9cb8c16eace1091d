#pragma once

#include "bcosnet/errors.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/rng.hpp"
#include "bcosnet/tensor.hpp"

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bcosnet {

enum class BranchId : std::size_t { local = 0, global = 1, gcp = 2, ovr = 3 };

inline constexpr std::array<BranchId, 4> kAllBranches = {BranchId::local, BranchId::global,
                                                         BranchId::gcp, BranchId::ovr};

inline std::string_view to_string(BranchId id) {
  switch (id) {
    case BranchId::local: return "local";
    case BranchId::global: return "global";
    case BranchId::gcp: return "gcp";
    case BranchId::ovr: return "ovr";
  }
  throw std::invalid_argument("unknown branch id");
}

inline BranchId parse_branch(std::string_view name) {
  for (auto id : kAllBranches)
    if (to_string(id) == name) return id;
  throw std::invalid_argument("unknown branch '" + std::string(name) + "'");
}

inline std::size_t index_of(BranchId id) {
  const auto i = static_cast<std::size_t>(id);
  if (i >= kAllBranches.size()) throw std::invalid_argument("unknown branch id");
  return i;
}

/// Subset of the four branches, in canonical (local, global, gcp, ovr) order.
class BranchSet {
 public:
  BranchSet() = default;
  BranchSet(std::initializer_list<BranchId> ids) {
    for (auto id : ids) set(id);
  }
  static BranchSet all() { return {BranchId::local, BranchId::global, BranchId::gcp, BranchId::ovr}; }

  void set(BranchId id, bool on = true) { bits_[index_of(id)] = on; }
  bool contains(BranchId id) const { return bits_[index_of(id)]; }
  bool empty() const { return size() == 0; }
  std::size_t size() const {
    std::size_t n = 0;
    for (bool b : bits_) n += b ? 1 : 0;
    return n;
  }
  std::vector<BranchId> ids() const {
    std::vector<BranchId> out;
    for (auto id : kAllBranches)
      if (contains(id)) out.push_back(id);
    return out;
  }
  friend bool operator==(const BranchSet&, const BranchSet&) = default;

 private:
  std::array<bool, 4> bits_{};
};

enum class TrunkVariant { osnet_like, tiny_test };

inline std::string_view to_string(TrunkVariant v) {
  return v == TrunkVariant::osnet_like ? "osnet_like" : "tiny_test";
}

struct TrunkConfig {
  TrunkVariant variant = TrunkVariant::osnet_like;
  std::size_t out_channels = 512;
  bool share_tail_stages = false;
  /// Total down-sampling factor of the trunk: 16 (default) or 8.
  std::size_t stride = 16;

  void validate() const {
    if (out_channels < 8) throw std::invalid_argument("trunk out_channels must be >= 8");
    if (stride != 8 && stride != 16) throw std::invalid_argument("trunk stride must be 8 or 16");
  }
};

/// One RGB image, channel-major (3 x height x width), already normalized.
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), data(3 * h * w, fill) {}

  static constexpr std::size_t channels = 3;
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Stacks images into an NCHW batch. All images must share one size and be finite.
template <typename T>
Tensor4<T> stack_images(std::span<const ImageTensor> images) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  const std::size_t h = images.front().height, w = images.front().width;
  if (h == 0 || w == 0) throw std::invalid_argument("image has zero extent");
  Tensor4<T> batch(images.size(), 3, h, w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height != h || img.width != w) {
      throw std::invalid_argument("mismatched image sizes within a batch: " + std::to_string(h) +
                                  "x" + std::to_string(w) + " vs " + std::to_string(img.height) +
                                  "x" + std::to_string(img.width));
    }
    if (img.data.size() != 3 * h * w) throw std::invalid_argument("image buffer size mismatch");
    auto dst = batch.sample(n);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (!std::isfinite(img.data[i])) throw NumericError("non-finite pixel in input image");
      dst[i] = static_cast<T>(img.data[i]);
    }
  }
  return batch;
}

/// Pointwise conv followed by a depthwise 3x3 conv, normalization and ReLU.
template <typename T>
std::unique_ptr<Sequential<T>> light_conv3x3(std::size_t channels, Rng& rng) {
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("pw", std::make_unique<Conv2d<T>>(channels, channels, 1, 1, 0, 1, false, rng));
  seq->add("dw", std::make_unique<Conv2d<T>>(channels, channels, 3, 1, 1, channels, false, rng));
  seq->add("bn", std::make_unique<BatchNorm<T>>(channels));
  seq->add("relu", std::make_unique<ReLU<T>>());
  return seq;
}

/// Residual bottleneck with parallel streams of 1..num_streams stacked light
/// 3x3 convs (receptive fields of growing scale), summed before expansion.
template <typename T>
class OmniScaleBlock : public Layer<T> {
 public:
  OmniScaleBlock(std::size_t in, std::size_t out, Rng& rng, std::size_t num_streams = 4)
      : in_(in), out_(out) {
    const std::size_t mid = std::max<std::size_t>(out / 4, 1);
    reduce_ = conv_bn<T>(in, mid, 1, 1, 0, rng);
    for (std::size_t t = 1; t <= num_streams; ++t) {
      auto stream = std::make_unique<Sequential<T>>();
      for (std::size_t d = 0; d < t; ++d) stream->add(std::to_string(d), light_conv3x3<T>(mid, rng));
      streams_.push_back(std::move(stream));
    }
    expand_ = conv_bn<T>(mid, out, 1, 1, 0, rng, /*relu=*/false);
    if (in != out) downsample_ = conv_bn<T>(in, out, 1, 1, 0, rng, /*relu=*/false);
  }

  Shape4 output_shape(const Shape4& s) const override { return {s.n, out_, s.h, s.w}; }

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override {
    Tensor4<T> a = reduce_->forward(x, mode);
    Tensor4<T> sum = streams_.front()->forward(a, mode);
    for (std::size_t t = 1; t < streams_.size(); ++t) sum += streams_[t]->forward(a, mode);
    Tensor4<T> y = expand_->forward(sum, mode);
    y += downsample_ ? downsample_->forward(x, mode) : x;
    return relu_.forward(y, mode);
  }

  Tensor4<T> backward(const Tensor4<T>& dy) override {
    Tensor4<T> g = relu_.backward(dy);
    Tensor4<T> gsum = expand_->backward(g);
    Tensor4<T> ga = streams_.front()->backward(gsum);
    for (std::size_t t = 1; t < streams_.size(); ++t) ga += streams_[t]->backward(gsum);
    Tensor4<T> gx = reduce_->backward(ga);
    gx += downsample_ ? downsample_->backward(g) : g;
    return gx;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) override {
    reduce_->collect(join_path(prefix, "reduce"), out);
    for (std::size_t t = 0; t < streams_.size(); ++t)
      streams_[t]->collect(join_path(prefix, "stream" + std::to_string(t + 1)), out);
    expand_->collect(join_path(prefix, "expand"), out);
    if (downsample_) downsample_->collect(join_path(prefix, "downsample"), out);
  }

 private:
  std::size_t in_, out_;
  std::unique_ptr<Sequential<T>> reduce_, expand_, downsample_;
  std::vector<std::unique_ptr<Sequential<T>>> streams_;
  ReLU<T> relu_;
};

/// 1x1 conv + BN + ReLU followed, when `pool` is set, by 2x2 average pooling.
template <typename T>
std::unique_ptr<Sequential<T>> transition(std::size_t channels, bool pool, Rng& rng) {
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("conv", conv_bn<T>(channels, channels, 1, 1, 0, rng));
  if (pool) seq->add("pool", std::make_unique<Pool2d<T>>(PoolKind::average, 2, 2));
  return seq;
}

/// Shared trunk: three conv stages and two transitions (osnet_like), or a
/// three-layer plain conv stack (tiny_test). Output channels = out_channels.
template <typename T>
std::unique_ptr<Sequential<T>> make_trunk(const TrunkConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.out_channels;
  auto trunk = std::make_unique<Sequential<T>>();
  if (cfg.variant == TrunkVariant::tiny_test) {
    const std::size_t w1 = std::max<std::size_t>(c / 4, 4), w2 = std::max<std::size_t>(c / 2, 4);
    trunk->add("conv1", conv_bn<T>(3, w1, 3, 2, 1, rng));
    trunk->add("conv2", conv_bn<T>(w1, w2, 3, 2, 1, rng));
    trunk->add("conv3", conv_bn<T>(w2, c, 3, 2, 1, rng));
    if (cfg.stride == 16) trunk->add("pool", std::make_unique<Pool2d<T>>(PoolKind::average, 2, 2));
    return trunk;
  }
  const std::size_t w0 = std::max<std::size_t>(c / 8, 4), w1 = std::max<std::size_t>(c / 2, 4);
  trunk->add("conv1", conv_bn<T>(3, w0, 7, 2, 3, rng));
  trunk->add("pool1", std::make_unique<Pool2d<T>>(PoolKind::max, 3, 2, 1));
  auto conv2 = std::make_unique<Sequential<T>>();
  conv2->add("0", std::make_unique<OmniScaleBlock<T>>(w0, w1, rng));
  conv2->add("1", std::make_unique<OmniScaleBlock<T>>(w1, w1, rng));
  trunk->add("conv2", std::move(conv2));
  trunk->add("transition1", transition<T>(w1, true, rng));
  auto conv3 = std::make_unique<Sequential<T>>();
  conv3->add("0", std::make_unique<OmniScaleBlock<T>>(w1, c, rng));
  conv3->add("1", std::make_unique<OmniScaleBlock<T>>(c, c, rng));
  trunk->add("conv3", std::move(conv3));
  trunk->add("transition2", transition<T>(c, cfg.stride == 16, rng));
  return trunk;
}

/// Stride-1 tail (conv4 + conv5) preserving spatial size and channel count.
template <typename T>
std::unique_ptr<Sequential<T>> make_tail(const TrunkConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.out_channels;
  auto tail = std::make_unique<Sequential<T>>();
  if (cfg.variant == TrunkVariant::tiny_test) {
    tail->add("conv4", conv_bn<T>(c, c, 3, 1, 1, rng));
  } else {
    auto conv4 = std::make_unique<Sequential<T>>();
    conv4->add("0", std::make_unique<OmniScaleBlock<T>>(c, c, rng));
    conv4->add("1", std::make_unique<OmniScaleBlock<T>>(c, c, rng));
    tail->add("conv4", std::move(conv4));
  }
  tail->add("conv5", conv_bn<T>(c, c, 1, 1, 0, rng));
  return tail;
}

/// Trunk plus per-branch (or one shared) tail stages.
template <typename T>
class Backbone {
 public:
  Backbone(const TrunkConfig& cfg, const BranchSet& branches, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    trunk_ = make_trunk<T>(cfg_, rng);
    if (cfg_.share_tail_stages) {
      shared_tail_ = make_tail<T>(cfg_, rng);
    } else {
      for (auto id : branches.ids()) tails_[index_of(id)] = make_tail<T>(cfg_, rng);
    }
  }

  const TrunkConfig& config() const { return cfg_; }

  Tensor4<T> trunk_forward(const Tensor4<T>& images, Mode mode) {
    if (images.channels() != 3) throw std::invalid_argument("trunk expects 3-channel images");
    if (images.height() % cfg_.stride != 0 || images.width() % cfg_.stride != 0) {
      throw std::invalid_argument("image size " + std::to_string(images.height()) + "x" +
                                  std::to_string(images.width()) +
                                  " is not divisible by trunk stride " +
                                  std::to_string(cfg_.stride));
    }
    if (!images.all_finite()) throw NumericError("non-finite value in trunk input");
    return trunk_->forward(images, mode);
  }

  Tensor4<T> trunk_backward(const Tensor4<T>& dfmap) { return trunk_->backward(dfmap); }

  Sequential<T>& tail(BranchId id) {
    if (shared_tail_) return *shared_tail_;
    auto& t = tails_[index_of(id)];
    if (!t) throw std::invalid_argument("branch '" + std::string(to_string(id)) + "' has no tail");
    return *t;
  }

  Tensor4<T> branch_tail_forward(const Tensor4<T>& fmap, BranchId id, Mode mode) {
    return tail(id).forward(fmap, mode);
  }

  Shape4 feature_shape(std::size_t batch, std::size_t height, std::size_t width) const {
    return trunk_->output_shape({batch, 3, height, width});
  }

  void collect_trunk(const std::string& prefix, ParameterList<T>& out) { trunk_->collect(prefix, out); }

  void collect_tails(const std::string& prefix, ParameterList<T>& out) {
    if (shared_tail_) {
      shared_tail_->collect(join_path(prefix, "shared"), out);
      return;
    }
    for (auto id : kAllBranches)
      if (tails_[index_of(id)]) tails_[index_of(id)]->collect(join_path(prefix, std::string(to_string(id))), out);
  }

 private:
  TrunkConfig cfg_;
  std::unique_ptr<Sequential<T>> trunk_;
  std::unique_ptr<Sequential<T>> shared_tail_;
  std::array<std::unique_ptr<Sequential<T>>, 4> tails_;
};

}  // namespace bcosnet
