#pragma once

#include "bcosnet/data.hpp"
#include "bcosnet/model.hpp"
#include "bcosnet/tensor.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bcosnet {

enum class DistanceMetric { euclidean, cosine };

inline std::string_view to_string(DistanceMetric m) {
  return m == DistanceMetric::euclidean ? "euclidean" : "cosine";
}

template <typename T>
void l2_normalize_rows(Matrix<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const T n = m.row(i).norm();
    if (n > T(0)) m.row(i) /= n;
  }
}

/// (num_query x num_gallery) distance matrix, evaluated in double.
template <typename T>
Matrix<double> pairwise_distances(const Matrix<T>& query, const Matrix<T>& gallery,
                                  DistanceMetric metric = DistanceMetric::euclidean) {
  if (query.cols() != gallery.cols()) {
    throw std::invalid_argument("feature dimension mismatch: query " + std::to_string(query.cols()) +
                                " vs gallery " + std::to_string(gallery.cols()));
  }
  const Matrix<double> q = query.template cast<double>();
  const Matrix<double> g = gallery.template cast<double>();
  Matrix<double> dot = q * g.transpose();
  Vector<double> qn = q.rowwise().squaredNorm();
  Vector<double> gn = g.rowwise().squaredNorm();
  Matrix<double> d(q.rows(), g.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.rows(); ++j) {
      if (metric == DistanceMetric::euclidean) {
        d(i, j) = std::sqrt(std::max(0.0, qn(i) + gn(j) - 2.0 * dot(i, j)));
      } else {
        const double denom = std::sqrt(qn(i) * gn(j));
        d(i, j) = denom > 0 ? 1.0 - dot(i, j) / denom : 1.0;
      }
    }
  }
  return d;
}

struct RetrievalResult {
  std::vector<double> per_query_ap;  // aligned with queries; 0 where invalid
  std::vector<bool> valid;           // query had at least one valid positive
  std::vector<double> cmc;           // cmc[k] = rank-(k+1) accuracy
  double mAP = 0.0;
  double rank1 = 0.0;
  std::size_t num_valid = 0;

  double rank(std::size_t k) const {
    if (k == 0 || cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
  std::vector<std::size_t> excluded_queries() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < valid.size(); ++i)
      if (!valid[i]) out.push_back(i);
    return out;
  }
};

/// Single-query retrieval metrics. Per query the gallery is ranked by
/// (distance, index); entries with the query's identity and camera, and junk
/// identities, are removed; AP is the mean precision at each relevant rank.
/// Queries without any remaining positive are excluded from mAP and CMC.
inline RetrievalResult evaluate(std::span<const int> query_ids, std::span<const int> query_cams,
                                std::span<const int> gallery_ids, std::span<const int> gallery_cams,
                                const Matrix<double>& dist, std::size_t max_rank = 50) {
  const std::size_t nq = query_ids.size(), ng = gallery_ids.size();
  if (nq == 0 || ng == 0) throw std::invalid_argument("query and gallery sets must be non-empty");
  if (query_cams.size() != nq || gallery_cams.size() != ng ||
      static_cast<std::size_t>(dist.rows()) != nq || static_cast<std::size_t>(dist.cols()) != ng) {
    throw std::invalid_argument("evaluation inputs have inconsistent sizes");
  }
  RetrievalResult res;
  res.per_query_ap.assign(nq, 0.0);
  res.valid.assign(nq, false);
  res.cmc.assign(max_rank, 0.0);
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    if (query_ids[q] == kJunkId) continue;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dist(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(a)) <
             dist(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(b));
    });
    std::size_t kept = 0, hits = 0, first_hit = 0;
    double precision_sum = 0.0;
    for (std::size_t g : order) {
      if (gallery_ids[g] == kJunkId) continue;
      if (gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]) continue;
      ++kept;
      if (gallery_ids[g] == query_ids[q]) {
        if (hits == 0) first_hit = kept;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(kept);
      }
    }
    if (hits == 0) continue;
    res.valid[q] = true;
    ++res.num_valid;
    res.per_query_ap[q] = precision_sum / static_cast<double>(hits);
    for (std::size_t k = first_hit - 1; k < max_rank; ++k) res.cmc[k] += 1.0;
  }
  if (res.num_valid > 0) {
    double s = 0.0;
    for (std::size_t q = 0; q < nq; ++q)
      if (res.valid[q]) s += res.per_query_ap[q];
    res.mAP = s / static_cast<double>(res.num_valid);
    for (auto& c : res.cmc) c /= static_cast<double>(res.num_valid);
  }
  res.rank1 = res.cmc.empty() ? 0.0 : res.cmc[0];
  return res;
}

struct EvalOptions {
  DistanceMetric distance = DistanceMetric::euclidean;
  bool normalize = true;
  std::size_t batch_size = 64;
};

/// Eval-mode concatenated branch embeddings for a list of records.
template <typename T>
Matrix<T> extract_features(BcOsnet<T>& model, const Dataset& ds,
                           const std::vector<PersonImageRecord>& records, const ImageLoader& loader,
                           const EvalOptions& opts) {
  Matrix<T> out(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(model.concat_dim()));
  const std::size_t bs = std::max<std::size_t>(opts.batch_size, 1);
  for (std::size_t start = 0; start < records.size(); start += bs) {
    const std::size_t end = std::min(records.size(), start + bs);
    std::vector<ImageTensor> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(loader.load(ds, records[i]));
    Matrix<T> f = model.extract(stack_images<T>(imgs));
    out.middleRows(static_cast<Eigen::Index>(start), f.rows()) = f;
  }
  if (opts.normalize) l2_normalize_rows(out);
  return out;
}

/// Extracts query and gallery features and scores them.
template <typename T>
RetrievalResult evaluate_model(BcOsnet<T>& model, const Dataset& ds, const ImageLoader& loader,
                               const EvalOptions& opts) {
  if (ds.query.empty() || ds.gallery.empty()) throw DataError("query and gallery splits must be non-empty");
  Matrix<T> qf = extract_features(model, ds, ds.query, loader, opts);
  Matrix<T> gf = extract_features(model, ds, ds.gallery, loader, opts);
  auto ids = [](const std::vector<PersonImageRecord>& r) {
    std::vector<int> v;
    for (const auto& x : r) v.push_back(x.person_id);
    return v;
  };
  auto cams = [](const std::vector<PersonImageRecord>& r) {
    std::vector<int> v;
    for (const auto& x : r) v.push_back(x.camera_id);
    return v;
  };
  return evaluate(ids(ds.query), cams(ds.query), ids(ds.gallery), cams(ds.gallery),
                  pairwise_distances(qf, gf, opts.distance));
}

/// Metrics file body: {mAP, rank1, cmc: [r1, r5, r10, r20], num_query,
/// num_gallery, config_hash}.
inline nlohmann::json metrics_json(const RetrievalResult& r, std::size_t num_query,
                                   std::size_t num_gallery, const std::string& config_hash) {
  return {{"mAP", r.mAP},
          {"rank1", r.rank1},
          {"cmc", {r.rank(1), r.rank(5), r.rank(10), r.rank(20)}},
          {"num_query", num_query},
          {"num_gallery", num_gallery},
          {"num_valid_query", r.num_valid},
          {"config_hash", config_hash}};
}

}  // namespace bcosnet
