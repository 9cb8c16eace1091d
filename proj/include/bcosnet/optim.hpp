#pragma once

#include "bcosnet/layers.hpp"

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

/// Learning-rate schedule and Adam hyper-parameters. Defaults reproduce the
/// 160-epoch recipe: 3.5e-4, 3.5e-5 after epoch 60, 3e-6 after epoch 130.
struct OptimConfig {
  double base_lr = 3.5e-4;
  double mid_lr = 3.5e-5;
  double final_lr = 3e-6;
  std::size_t first_milestone = 60;
  std::size_t second_milestone = 130;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 160;
  std::size_t warmup_epochs = 10;
  double warmup_start_factor = 0.1;

  void validate() const {
    if (!(base_lr > mid_lr && mid_lr > final_lr && final_lr > 0))
      throw std::invalid_argument("learning rates must be positive and strictly decreasing");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (first_milestone >= second_milestone)
      throw std::invalid_argument("learning-rate milestones must be increasing");
    if (warmup_start_factor <= 0 || warmup_start_factor > 1)
      throw std::invalid_argument("warmup start factor must lie in (0, 1]");
    if (weight_decay < 0) throw std::invalid_argument("weight decay must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
};

/// Learning rate for a 1-based epoch: linear warmup from
/// warmup_start_factor * base_lr up to base_lr at epoch warmup_epochs, then
/// piecewise constant with drops after each milestone.
inline double lr_at(std::size_t epoch, const OptimConfig& cfg) {
  if (epoch < 1 || epoch > cfg.epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " +
                            std::to_string(cfg.epochs) + "]");
  }
  if (epoch > cfg.second_milestone) return cfg.final_lr;
  if (epoch > cfg.first_milestone) return cfg.mid_lr;
  if (cfg.warmup_epochs > 1 && epoch < cfg.warmup_epochs) {
    const double t = static_cast<double>(epoch - 1) / static_cast<double>(cfg.warmup_epochs - 1);
    return cfg.base_lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * t);
  }
  return cfg.base_lr;
}

/// Adam with L2 weight decay folded into the gradient. Moment buffers are
/// keyed by parameter path so they survive checkpoint round-trips.
template <typename T>
class Adam {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  explicit Adam(const OptimConfig& cfg = {}) : cfg_(cfg) {}

  void step(ParameterList<T>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [path, p] : params) {
      if (!p->trainable) continue;
      auto& st = state_[path];
      if (st.m.size() != p->size()) {
        st.m.assign(p->size(), T(0));
        st.v.assign(p->size(), T(0));
      }
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = static_cast<double>(p->grad[i]) + cfg_.weight_decay * static_cast<double>(p->value[i]);
        const double m = cfg_.beta1 * static_cast<double>(st.m[i]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(st.v[i]) + (1.0 - cfg_.beta2) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        p->value[i] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.adam_eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace bcosnet
