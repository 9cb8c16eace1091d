#include "bcosnet/ablation.hpp"
#include "bcosnet/config.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/run.hpp"

#include "CLI11.hpp"

#ifdef BCOSNET_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace bcosnet;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericError = 4 };

ImageDecoder make_decoder() {
#ifdef BCOSNET_HAVE_OPENCV
  return [](const fs::path& path) {
    if (path.extension() == ".ppm") return read_ppm(path);
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot decode image " + path.string());
    ImageTensor img(static_cast<std::size_t>(bgr.rows), static_cast<std::size_t>(bgr.cols));
    for (int y = 0; y < bgr.rows; ++y) {
      const auto* row = bgr.ptr<unsigned char>(y);
      for (int x = 0; x < bgr.cols; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = row[3 * x + (2 - c)] / 255.0f;
    }
    return img;
  };
#else
  return read_ppm;
#endif
}

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::string data_root;
  std::string distance;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "key=value config file");
  cmd->add_option("--set", o.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--data-root", o.data_root, "dataset root (same as --set data.root=...)");
  cmd->add_option("--seed", o.seed, "master seed (same as --set seed=...)");
  cmd->add_option("--distance", o.distance, "retrieval distance (same as --set eval.distance=...)")
      ->check(CLI::IsMember({"euclidean", "cosine"}));
}

// Precedence: defaults < config file < environment < command line.
RunConfig resolve(const CommonOptions& o, const std::string& fallback_config = {}) {
  RunConfig cfg;
  if (!o.config.empty()) cfg = RunConfig::from_file(o.config);
  else if (!fallback_config.empty() && fs::exists(fallback_config)) cfg = RunConfig::from_file(fallback_config);
  cfg.apply_environment();
  std::vector<std::string> sets;
  if (!o.data_root.empty()) sets.push_back("data.root=" + o.data_root);
  if (o.seed >= 0) sets.push_back("seed=" + std::to_string(o.seed));
  if (!o.distance.empty()) sets.push_back("eval.distance=" + o.distance);
  sets.insert(sets.end(), o.sets.begin(), o.sets.end());
  cfg.apply_overrides(sets);
  cfg.validate();
  return cfg;
}

void print_metrics(const nlohmann::json& m) {
  std::cout << std::fixed << std::setprecision(4) << "mAP " << m["mAP"].get<double>() << "  rank-1 "
            << m["cmc"][0].get<double>() << "  rank-5 " << m["cmc"][1].get<double>() << "  rank-10 "
            << m["cmc"][2].get<double>() << "  rank-20 " << m["cmc"][3].get<double>() << "  ("
            << m["num_query"] << " queries, " << m["num_gallery"] << " gallery, config "
            << m["config_hash"].get<std::string>().substr(0, 12) << ")\n";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  return Split::gallery;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BC-OSNet person re-identification: training, evaluation, feature extraction, ablations"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, extract_opts, ablate_opts;
  std::string run_dir = "runs/default", checkpoint, out, split = "query", ablate_out = "runs/ablation";
  bool resume = false;
  std::vector<int> tables;
  std::vector<std::string> grid_axes;

  auto* train = app.add_subcommand("train", "train a model; writes config.snapshot, checkpoints/, log.jsonl, metrics.json");
  add_common(train, train_opts);
  train->add_option("-o,--run-dir", run_dir, "run directory")->capture_default_str();
  train->add_flag("--resume", resume, "continue from <run-dir>/checkpoints/last.ckpt");

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on the query/gallery splits");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--out", out, "metrics JSON output (default: print only)");

  auto* extract = app.add_subcommand("extract", "write retrieval features as CSV");
  add_common(extract, extract_opts);
  extract->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  extract->add_option("--split", split, "split to embed")
      ->check(CLI::IsMember({"train", "query", "gallery"}))
      ->capture_default_str();
  extract->add_option("--out", out, "CSV output")->required();

  auto* ablate = app.add_subcommand("ablate", "train and score each cell of an ablation grid");
  add_common(ablate, ablate_opts);
  ablate->add_option("--table", tables, "preset table layout (2, 3, 4 or 5), repeatable");
  ablate->add_option("--grid", grid_axes, "grid axis key=v1|v2|..., repeatable (Cartesian product)");
  ablate->add_option("-o,--out", ablate_out, "output directory")->capture_default_str();

  auto* schema = app.add_subcommand("config", "list every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*schema) {
      for (const auto& k : config_schema())
        std::cout << std::left << std::setw(32) << (k.key + "=" + k.default_value) << "  " << k.help << "\n";
      return kOk;
    }
    if (*train) {
      const RunConfig cfg = resolve(train_opts, resume ? (fs::path(run_dir) / kSnapshotFile).string() : "");
      std::cout << "run " << run_dir << "  config " << cfg.hash().substr(0, 12) << "\n";
      const auto outcome = run_training(cfg, run_dir, resume, make_decoder());
      if (!outcome.fit.history.empty()) {
        std::cout << "steps " << outcome.fit.history.size() << "  loss " << outcome.fit.history.front().total
                  << " -> " << outcome.fit.history.back().total << "\n";
      }
      print_metrics(outcome.metrics_json);
      return kOk;
    }
    if (*evaluate) {
      const auto snapshot = fs::path(checkpoint).parent_path().parent_path() / kSnapshotFile;
      const RunConfig cfg = resolve(eval_opts, snapshot.string());
      print_metrics(run_evaluation(cfg, checkpoint, out, make_decoder()));
      return kOk;
    }
    if (*extract) {
      const auto snapshot = fs::path(checkpoint).parent_path().parent_path() / kSnapshotFile;
      const RunConfig cfg = resolve(extract_opts, snapshot.string());
      const auto n = run_extract(cfg, checkpoint, parse_split(split), out, make_decoder());
      std::cout << "wrote " << n << " feature rows to " << out << "\n";
      return kOk;
    }
    if (*ablate) {
      const RunConfig base = resolve(ablate_opts);
      std::vector<AblationGrid> grids;
      std::vector<std::string> names;
      for (int t : tables) {
        grids.push_back(ablation_preset(t));
        names.push_back("table" + std::to_string(t));
      }
      if (!grid_axes.empty()) {
        grids.push_back(expand_grid(grid_axes));
        names.push_back("grid");
      }
      if (grids.empty()) throw ConfigError("ablation grid is empty: pass --table or --grid");
      std::size_t failures = 0;
      for (std::size_t i = 0; i < grids.size(); ++i) {
        const auto dir = grids.size() == 1 ? fs::path(ablate_out) : fs::path(ablate_out) / names[i];
        const auto report = run_ablation(base, grids[i], dir);
        std::cout << report.markdown() << "\n";
        failures += report.failures();
      }
      return failures == 0 ? kOk : kFailure;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
