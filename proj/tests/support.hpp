#pragma once

// Shared helpers for the test suites: random inputs, central finite
// differences, and brute-force reference implementations used as oracles.

#include "bcosnet/config.hpp"
#include "bcosnet/data.hpp"
#include "bcosnet/evaluation.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/losses.hpp"
#include "bcosnet/rng.hpp"
#include "bcosnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace testing_support {

using bcosnet::Matrix;
using bcosnet::Rng;
using bcosnet::Tensor4;

inline Tensor4<double> random_tensor(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                                     double lo = -1.0, double hi = 1.0) {
  Tensor4<double> t(n, c, h, w);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Matrix<double> random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                                    double hi = 1.0) {
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// ||a - b|| / (||a|| + ||b||), zero when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Central differences of `loss` with respect to every entry of `values`.
inline std::vector<double> numeric_gradient(const std::function<double()>& loss, std::span<double> values,
                                            double h = 1e-6) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = loss();
    values[i] = orig - h;
    const double down = loss();
    values[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline std::vector<double> to_vector(const Matrix<double>& m) { return {m.data(), m.data() + m.size()}; }
inline std::vector<double> to_vector(const Tensor4<double>& t) { return {t.data(), t.data() + t.size()}; }

inline std::span<double> span_of(Matrix<double>& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<double> span_of(Tensor4<double>& t) { return {t.data(), t.size()}; }

/// Weighted sum <w, y>; used as a scalar probe loss in gradient checks.
inline double dot(const Matrix<double>& w, const Matrix<double>& y) { return (w.array() * y.array()).sum(); }

// ---------------------------------------------------------------------------
// Triplet mining oracle: enumerate every (anchor, positive, negative) triple
// explicitly. Hardest positive = farthest same-label sample, hardest negative
// = nearest other-label sample, ties to the lowest index.

struct TripletOracle {
  double loss = 0;
  std::vector<std::size_t> pos, neg;
};

inline TripletOracle brute_force_triplet(const Matrix<double>& x, const std::vector<int>& labels,
                                         const bcosnet::TripletConfig& cfg) {
  const auto n = static_cast<std::size_t>(x.rows());
  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      const double d = x(static_cast<Eigen::Index>(a), k) - x(static_cast<Eigen::Index>(b), k);
      s += d * d;
    }
    return std::sqrt(s);
  };
  TripletOracle out;
  for (std::size_t a = 0; a < n; ++a) {
    double best_term = -std::numeric_limits<double>::infinity();
    std::size_t bp = n, bn = n;
    double dp_best = 0, dn_best = 0;
    // Lexicographic scan over all triples: the hardest triple maximizes
    // d(a,p) - d(a,n); among equal d(a,p) the lowest p, then lowest n.
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double dp = dist(a, p);
      if (bp != n && dp <= dp_best) continue;
      bp = p;
      dp_best = dp;
    }
    for (std::size_t q = 0; q < n; ++q) {
      if (labels[q] == labels[a]) continue;
      const double dn = dist(a, q);
      if (bn != n && dn >= dn_best) continue;
      bn = q;
      dn_best = dn;
    }
    // Cross-check the mined pair against full triple enumeration.
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        best_term = std::max(best_term, dist(a, p) - dist(a, q));
      }
    }
    if (best_term != dp_best - dn_best) {
      out.loss = std::numeric_limits<double>::quiet_NaN();  // oracle inconsistency
      return out;
    }
    const double z = dp_best - dn_best;
    out.loss += cfg.mode == bcosnet::TripletMode::softplus ? std::log1p(std::exp(z))
                                                           : std::max(0.0, cfg.margin + z);
    out.pos.push_back(bp);
    out.neg.push_back(bn);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval oracle: explicit per-query sort, filtering and AP summation.

struct MetricOracle {
  double mAP = 0;
  std::vector<double> cmc;
  std::vector<double> ap;
  std::vector<bool> valid;
};

inline MetricOracle brute_force_metrics(const std::vector<int>& qids, const std::vector<int>& qcams,
                                        const std::vector<int>& gids, const std::vector<int>& gcams,
                                        const Matrix<double>& dist, std::size_t max_rank) {
  MetricOracle out;
  out.cmc.assign(max_rank, 0.0);
  std::size_t valid = 0;
  for (std::size_t q = 0; q < qids.size(); ++q) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t g = 0; g < gids.size(); ++g) {
      if (gids[g] == -1) continue;
      if (gids[g] == qids[q] && gcams[g] == qcams[q]) continue;
      ranked.emplace_back(dist(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(g)), g);
    }
    std::sort(ranked.begin(), ranked.end());  // (distance, index) lexicographic
    std::vector<std::size_t> relevant_ranks;  // 1-based
    for (std::size_t r = 0; r < ranked.size(); ++r)
      if (gids[ranked[r].second] == qids[q]) relevant_ranks.push_back(r + 1);
    if (qids[q] == -1 || relevant_ranks.empty()) {
      out.ap.push_back(0.0);
      out.valid.push_back(false);
      continue;
    }
    double ap = 0;
    for (std::size_t i = 0; i < relevant_ranks.size(); ++i)
      ap += static_cast<double>(i + 1) / static_cast<double>(relevant_ranks[i]);
    ap /= static_cast<double>(relevant_ranks.size());
    out.ap.push_back(ap);
    out.valid.push_back(true);
    ++valid;
    out.mAP += ap;
    for (std::size_t k = 1; k <= max_rank; ++k)
      if (relevant_ranks.front() <= k) out.cmc[k - 1] += 1.0;
  }
  if (valid > 0) {
    out.mAP /= static_cast<double>(valid);
    for (auto& c : out.cmc) c /= static_cast<double>(valid);
  }
  return out;
}

/// Synthetic 8x8 set, 64x32 inputs, tiny trunk at stride 8: a configuration
/// that trains in seconds.
inline bcosnet::RunConfig tiny_run_config() {
  bcosnet::RunConfig c;
  c.apply_overrides({"data.layout=synthetic", "data.height=64", "data.width=32", "trunk.variant=tiny_test",
                     "trunk.channels=32", "trunk.stride=8", "bottleneck_dim=16", "train.P=8", "train.K=4",
                     "train.batches_per_epoch=1", "optim.epochs=200", "optim.first_milestone=150",
                     "optim.second_milestone=180", "optim.warmup_epochs=10", "augment.enabled=false",
                     "train.checkpoint_every=0"});
  return c;
}

/// Empty scratch directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("bcosnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
