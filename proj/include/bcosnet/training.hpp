#pragma once

#include "bcosnet/checkpoint.hpp"
#include "bcosnet/data.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/evaluation.hpp"
#include "bcosnet/losses.hpp"
#include "bcosnet/model.hpp"
#include "bcosnet/optim.hpp"
#include "bcosnet/rng.hpp"

#include "json.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace bcosnet {

struct ObjectiveConfig {
  LossWeights weights;
  TripletConfig triplet;
  BranchSet triplet_branches = BranchSet::all();
  BranchSet center_branches = BranchSet::all();
  double center_lr = 0.5;
};

/// Per-branch ID, triplet and center losses plus the center state.
template <typename T>
class Objective {
 public:
  struct Result {
    LossBundle bundle;
    std::vector<BranchGrad<T>> grads;
    std::vector<std::pair<BranchId, Matrix<T>>> center_deltas;
  };

  Objective(const ObjectiveConfig& cfg, const ModelConfig& model) : cfg_(cfg) {
    cfg_.weights.validate();
    for (auto id : model.branches.ids()) {
      if (cfg_.center_branches.contains(id))
        centers_[index_of(id)] = CenterState<T>(model.num_identities, model.branch_dim(id), cfg_.center_lr);
    }
  }

  const ObjectiveConfig& config() const { return cfg_; }

  bool has_center(BranchId id) const { return centers_[index_of(id)].centers.size() > 0; }
  CenterState<T>& center(BranchId id) { return centers_[index_of(id)]; }

  /// Losses and output gradients for one forward pass. Throws NumericError
  /// naming the first non-finite component.
  Result evaluate(const ModelOutput<T>& out, std::span<const int> labels) const {
    const auto& w = cfg_.weights;
    Result res;
    std::vector<std::pair<BranchId, BranchLoss>> parts;
    for (const auto& b : out.branches) {
      BranchLoss l;
      BranchGrad<T> g{b.id, {}, {}};
      const std::string name(to_string(b.id));
      if (w.id > 0) {
        auto ce = softmax_cross_entropy(b.logits, labels);
        l.id = static_cast<double>(ce.value);
        g.d_logits = ce.grad * static_cast<T>(w.id);
      }
      Matrix<T> demb = Matrix<T>::Zero(b.embedding.rows(), b.embedding.cols());
      bool any_emb = false;
      if (w.triplet > 0 && cfg_.triplet_branches.contains(b.id)) {
        auto tr = triplet_loss_batch_hard(b.embedding, labels, cfg_.triplet);
        l.triplet = static_cast<double>(tr.value);
        demb += tr.grad * static_cast<T>(w.triplet);
        any_emb = true;
      }
      if (w.center > 0 && has_center(b.id)) {
        auto cl = center_loss(b.embedding, labels, centers_[index_of(b.id)]);
        l.center = static_cast<double>(cl.value);
        demb += cl.grad * static_cast<T>(w.center);
        res.center_deltas.emplace_back(b.id, std::move(cl.center_delta));
        any_emb = true;
      }
      if (!std::isfinite(l.id)) throw NumericError("non-finite loss component: " + name + ".id");
      if (!std::isfinite(l.triplet)) throw NumericError("non-finite loss component: " + name + ".triplet");
      if (!std::isfinite(l.center)) throw NumericError("non-finite loss component: " + name + ".center");
      if (any_emb) g.d_embedding = std::move(demb);
      parts.emplace_back(b.id, l);
      res.grads.push_back(std::move(g));
    }
    res.bundle = total_loss(std::move(parts), w);
    if (!std::isfinite(res.bundle.total)) throw NumericError("non-finite loss component: total");
    return res;
  }

  void update_centers(const Result& r) {
    for (const auto& [id, delta] : r.center_deltas) apply_center_update(centers_[index_of(id)], delta);
  }

 private:
  ObjectiveConfig cfg_;
  std::array<CenterState<T>, 4> centers_;
};

/// One optimization step: forward with regularizers active, loss, backward,
/// Adam update at `lr`, center update.
template <typename T>
LossBundle train_step(BcOsnet<T>& model, const Tensor4<T>& images, std::span<const int> labels,
                      Objective<T>& objective, Adam<T>& adam, double lr, Rng& noise) {
  model.zero_grad();
  auto out = model.forward(images, Mode::train, &noise);
  auto res = objective.evaluate(out, labels);
  model.backward(res.grads);
  auto params = model.parameters();
  for (const auto& [path, p] : params) {
    if (!p->trainable) continue;
    for (T g : p->grad)
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + path);
  }
  adam.step(params, lr);
  objective.update_centers(res);
  return res.bundle;
}

inline nlohmann::json loss_json(const LossBundle& b) {
  nlohmann::json branches = nlohmann::json::object();
  for (const auto& [id, l] : b.branches)
    branches[std::string(to_string(id))] = {{"id", l.id}, {"triplet", l.triplet}, {"center", l.center}};
  return {{"total", b.total}, {"branches", branches}};
}

struct FitConfig {
  OptimConfig optim;
  PkBatchSpec pk;
  AugmentConfig augment;
  bool augment_enabled = true;
  std::size_t batches_per_epoch = 0;  // 0: one pass over the identities
  std::size_t max_steps = 0;          // 0: unlimited
  std::size_t eval_every = 0;         // epochs; 0 disables periodic evaluation
  std::size_t checkpoint_every = 0;   // epochs; 0 keeps only last.ckpt
  EvalOptions eval;
  bool freeze_trunk = false;
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;  // empty: no files written
  bool resume = false;
  std::string config_hash;
};

struct FitResult {
  std::vector<LossBundle> history;
  std::size_t epochs_run = 0;
  std::size_t start_epoch = 1;
  std::optional<RetrievalResult> last_eval;
};

namespace detail {

inline Checkpoint make_checkpoint_meta(std::size_t epoch, std::size_t step, const std::string& hash) {
  Checkpoint c;
  c.meta["epoch"] = std::to_string(epoch);
  c.meta["step"] = std::to_string(step);
  c.meta["config_hash"] = hash;
  return c;
}

}  // namespace detail

/// Model, optimizer and center state as one checkpoint.
template <typename T>
Checkpoint snapshot(BcOsnet<T>& model, const Adam<T>& adam, Objective<T>& obj, std::size_t epoch,
                    std::size_t step, const std::string& hash) {
  Checkpoint c = detail::make_checkpoint_meta(epoch, step, hash);
  export_parameters(model.parameters(), c);
  export_optimizer(adam, c);
  for (auto id : model.config().branches.ids())
    if (obj.has_center(id)) export_matrix("centers." + std::string(to_string(id)), obj.center(id).centers, c);
  return c;
}

template <typename T>
void restore(const Checkpoint& c, BcOsnet<T>& model, Adam<T>* adam, Objective<T>* obj) {
  auto params = model.parameters();
  import_parameters(c, params);
  if (adam) import_optimizer(c, *adam);
  if (obj) {
    for (auto id : model.config().branches.ids())
      if (obj->has_center(id)) import_matrix(c, "centers." + std::string(to_string(id)), obj->center(id).centers);
  }
}

inline std::size_t checkpoint_epoch(const Checkpoint& c) {
  auto it = c.meta.find("epoch");
  if (it == c.meta.end()) throw DataError("checkpoint has no epoch record");
  return std::stoull(it->second);
}

template <typename T>
Tensor4<T> load_batch(const Dataset& ds, const LabeledBatch& batch, const ImageLoader& loader,
                      const AugmentConfig* aug, Rng& rng) {
  std::vector<ImageTensor> imgs;
  imgs.reserve(batch.indices.size());
  for (auto i : batch.indices) {
    ImageTensor img = loader.load(ds, ds.train[i]);
    imgs.push_back(aug ? augment(img, *aug, rng) : std::move(img));
  }
  return stack_images<T>(imgs);
}

/// Epoch loop. Sampling, augmentation and regularizer noise draw from streams
/// derived from (seed, epoch), so a resumed run replays the same batches as an
/// uninterrupted one.
template <typename T>
FitResult fit(BcOsnet<T>& model, Objective<T>& objective, Adam<T>& adam, const Dataset& ds,
              const ImageLoader& loader, const FitConfig& cfg) {
  cfg.optim.validate();
  cfg.pk.validate();
  if (cfg.augment_enabled) cfg.augment.validate();
  model.set_trunk_frozen(cfg.freeze_trunk);

  FitResult result;
  std::size_t step = adam.steps();
  std::ofstream log;
  const bool write = !cfg.run_dir.empty();
  const auto ckpt_dir = cfg.run_dir / "checkpoints";
  if (write) {
    std::filesystem::create_directories(ckpt_dir);
    if (cfg.resume) {
      const auto last = ckpt_dir / "last.ckpt";
      if (!std::filesystem::exists(last)) throw DataError("no checkpoint to resume from in " + ckpt_dir.string());
      const Checkpoint c = load_checkpoint(last);
      restore(c, model, &adam, &objective);
      result.start_epoch = checkpoint_epoch(c) + 1;
      step = adam.steps();
    }
    log.open(cfg.run_dir / "log.jsonl", cfg.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot open training log in " + cfg.run_dir.string());
  }

  for (std::size_t epoch = result.start_epoch; epoch <= cfg.optim.epochs; ++epoch) {
    if (cfg.max_steps && step >= cfg.max_steps) break;
    const double lr = lr_at(epoch, cfg.optim);
    PkSampler sampler(ds.train, cfg.pk, Rng(Rng::derive(cfg.seed, 3 * epoch)));
    Rng aug_rng(Rng::derive(cfg.seed, 3 * epoch + 1));
    Rng noise_rng(Rng::derive(cfg.seed, 3 * epoch + 2));
    const std::size_t nb = cfg.batches_per_epoch ? cfg.batches_per_epoch : sampler.batches_per_epoch();
    for (std::size_t b = 0; b < nb; ++b) {
      if (cfg.max_steps && step >= cfg.max_steps) break;
      const auto batch = sampler.next();
      auto images = load_batch<T>(ds, batch, loader, cfg.augment_enabled ? &cfg.augment : nullptr, aug_rng);
      LossBundle loss = train_step(model, images, batch.labels, objective, adam, lr, noise_rng);
      ++step;
      if (write) {
        auto rec = loss_json(loss);
        rec["type"] = "step";
        rec["epoch"] = epoch;
        rec["step"] = step;
        rec["lr"] = lr;
        log << rec.dump() << '\n';
      }
      result.history.push_back(std::move(loss));
    }
    ++result.epochs_run;

    if (cfg.eval_every && epoch % cfg.eval_every == 0 && !ds.query.empty() && !ds.gallery.empty()) {
      result.last_eval = evaluate_model(model, ds, loader, cfg.eval);
      if (write) {
        nlohmann::json rec{{"type", "eval"},     {"epoch", epoch},
                           {"step", step},       {"mAP", result.last_eval->mAP},
                           {"rank1", result.last_eval->rank1}};
        log << rec.dump() << '\n';
      }
    }
    if (write) {
      log.flush();
      const Checkpoint c = snapshot(model, adam, objective, epoch, step, cfg.config_hash);
      if (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04zu.ckpt", epoch);
        save_checkpoint(ckpt_dir / name, c);
      }
      save_checkpoint(ckpt_dir / "last.ckpt", c);
    }
  }
  return result;
}

}  // namespace bcosnet
