#pragma once

#include "bcosnet/checkpoint.hpp"
#include "bcosnet/config.hpp"
#include "bcosnet/data.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/evaluation.hpp"
#include "bcosnet/model.hpp"
#include "bcosnet/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>

namespace bcosnet {

// Run directory layout.
inline constexpr const char* kSnapshotFile = "config.snapshot";
inline constexpr const char* kCheckpointDir = "checkpoints";
inline constexpr const char* kLogFile = "log.jsonl";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kManifestFile = "dataset.json";

struct TrainOutcome {
  FitResult fit;
  RetrievalResult metrics;
  nlohmann::json metrics_json;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << std::setw(2) << j << '\n';
}

/// Trains a model as described by `cfg` inside `run_dir` and scores it on the
/// query/gallery splits.
inline TrainOutcome run_training(const RunConfig& cfg, const std::filesystem::path& run_dir, bool resume = false,
                                 ImageDecoder decoder = read_ppm) {
  cfg.validate();
  const Dataset ds = load_dataset(cfg);
  if (ds.num_train_ids < 2) throw DataError("training split needs at least 2 identities");
  std::filesystem::create_directories(run_dir);
  const auto snapshot_path = run_dir / kSnapshotFile;
  if (resume && std::filesystem::exists(snapshot_path)) {
    const auto prev = RunConfig::from_file(snapshot_path);
    if (prev.hash() != cfg.hash())
      throw ConfigError("resumed run config differs from " + snapshot_path.string());
  }
  cfg.write_snapshot(snapshot_path);
  write_json(run_dir / kManifestFile, dataset_manifest(ds));

  Rng init(Rng::derive(cfg.seed(), 0));
  BcOsnet<float> model(cfg.model(ds.num_train_ids), init);
  Objective<float> objective(cfg.objective(), model.config());
  FitConfig fc = cfg.fit();
  Adam<float> adam(fc.optim);
  fc.run_dir = run_dir;
  fc.resume = resume;
  const ImageLoader loader(cfg.count("data.height"), cfg.count("data.width"), std::move(decoder));

  TrainOutcome out;
  out.fit = fit(model, objective, adam, ds, loader, fc);
  out.metrics = evaluate_model(model, ds, loader, fc.eval);
  out.metrics_json = metrics_json(out.metrics, ds.query.size(), ds.gallery.size(), cfg.hash());
  out.metrics_json["distance"] = std::string(to_string(fc.eval.distance));
  out.metrics_json["steps"] = adam.steps();
  write_json(run_dir / kMetricsFile, out.metrics_json);
  return out;
}

/// Restores a model for `cfg` from a checkpoint. The identity count is taken
/// from the stored classifier so evaluation does not need the training split.
inline BcOsnet<float> load_model(const RunConfig& cfg, const Checkpoint& ckpt) {
  std::size_t num_ids = 0;
  for (const auto& [key, t] : ckpt.tensors) {
    if (key.rfind("head.", 0) == 0 && key.size() > 5 && key.substr(key.size() - 5) == ".bias" && !t.dims.empty()) {
      num_ids = t.dims[0];
      break;
    }
  }
  if (num_ids == 0) throw DataError("checkpoint has no classifier head");
  Rng init(Rng::derive(cfg.seed(), 0));
  BcOsnet<float> model(cfg.model(num_ids), init);
  restore<float>(ckpt, model, nullptr, nullptr);
  return model;
}

/// Scores a checkpoint on the configured dataset and writes `metrics_path`
/// when it is non-empty.
inline nlohmann::json run_evaluation(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                     const std::filesystem::path& metrics_path, ImageDecoder decoder = read_ppm) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  BcOsnet<float> model = load_model(cfg, ckpt);
  const Dataset ds = load_dataset(cfg);
  const ImageLoader loader(cfg.count("data.height"), cfg.count("data.width"), std::move(decoder));
  const auto opts = cfg.eval();
  const auto r = evaluate_model(model, ds, loader, opts);
  auto j = metrics_json(r, ds.query.size(), ds.gallery.size(), cfg.hash());
  j["distance"] = std::string(to_string(opts.distance));
  j["checkpoint"] = checkpoint.string();
  if (!metrics_path.empty()) write_json(metrics_path, j);
  return j;
}

/// Writes one CSV row per record of `split`: path, person_id, camera_id,
/// then the feature values.
inline std::size_t run_extract(const RunConfig& cfg, const std::filesystem::path& checkpoint, Split split,
                               const std::filesystem::path& out_path, ImageDecoder decoder = read_ppm) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  BcOsnet<float> model = load_model(cfg, ckpt);
  const Dataset ds = load_dataset(cfg);
  const ImageLoader loader(cfg.count("data.height"), cfg.count("data.width"), std::move(decoder));
  const auto& recs = ds.split(split);
  const Matrix<float> f = extract_features(model, ds, recs, loader, cfg.eval());
  std::ofstream os(out_path);
  if (!os) throw DataError("cannot write " + out_path.string());
  os << std::setprecision(9);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    os << recs[i].path << ',' << recs[i].person_id << ',' << recs[i].camera_id;
    for (Eigen::Index j = 0; j < f.cols(); ++j) os << ',' << f(static_cast<Eigen::Index>(i), j);
    os << '\n';
  }
  return recs.size();
}

}  // namespace bcosnet
