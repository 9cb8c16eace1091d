#pragma once

#include "bcosnet/data.hpp"
#include "bcosnet/digest.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/evaluation.hpp"
#include "bcosnet/model.hpp"
#include "bcosnet/optim.hpp"
#include "bcosnet/training.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace bcosnet {

/// Environment variable that overrides `data.root`.
inline constexpr const char* kDataRootEnv = "BCOSNET_DATA_ROOT";

enum class KeyType { real, count, integer, flag, text, branches, counts, choice };

struct ConfigKey {
  std::string key;
  KeyType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices = {};
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"seed", KeyType::integer, "0", "master random seed"},
      {"trunk.variant", KeyType::choice, "osnet_like", "trunk architecture", {"osnet_like", "tiny_test"}},
      {"trunk.channels", KeyType::count, "512", "trunk output channels C"},
      {"trunk.stride", KeyType::count, "16", "trunk down-sampling factor (8 or 16)"},
      {"trunk.share_tail", KeyType::flag, "false", "share the tail stages across branches"},
      {"branches", KeyType::branches, "local,global,gcp,ovr", "enabled branches"},
      {"bottleneck_dim", KeyType::count, "256", "bottleneck width c"},
      {"local_stripes", KeyType::count, "4", "local branch stripe count"},
      {"gcp_stripes", KeyType::count, "6", "contrastive branch stripe count"},
      {"ovr_splits", KeyType::counts, "6", "one-vs-rest part counts"},
      {"gem.enabled", KeyType::flag, "true", "GeM pooling (false: average pooling)"},
      {"gem.local_p", KeyType::real, "1.0", "initial GeM exponent, local branch"},
      {"gem.global_p", KeyType::real, "6.5", "initial GeM exponent, global branch"},
      {"gem.learnable", KeyType::flag, "true", "train the GeM exponents"},
      {"neck.bn", KeyType::flag, "true", "batch-norm neck before the classifiers"},
      {"loss.id", KeyType::real, "1.0", "ID loss weight"},
      {"loss.triplet", KeyType::real, "1.0", "triplet loss weight"},
      {"loss.center", KeyType::real, "0.0005", "center loss weight"},
      {"loss.triplet_mode", KeyType::choice, "softplus", "triplet form", {"softplus", "hinge_margin"}},
      {"loss.margin", KeyType::real, "0.3", "hinge triplet margin"},
      {"loss.triplet_branches", KeyType::branches, "local,global,gcp,ovr", "branches with a triplet loss"},
      {"loss.center_branches", KeyType::branches, "local,global,gcp,ovr", "branches with a center loss"},
      {"loss.center_lr", KeyType::real, "0.5", "center update rate"},
      {"bdb.enabled", KeyType::flag, "false", "batch drop-block"},
      {"bdb.height_ratio", KeyType::real, "0.3", "dropped block height fraction"},
      {"bdb.width_ratio", KeyType::real, "1.0", "dropped block width fraction"},
      {"bdb.branches", KeyType::branches, "local", "branches that receive drop-block"},
      {"gcd.enabled", KeyType::flag, "false", "gaussian continuous dropout"},
      {"gcd.sigma", KeyType::real, "0.5", "gaussian dropout standard deviation"},
      {"optim.base_lr", KeyType::real, "0.00035", "base learning rate"},
      {"optim.mid_lr", KeyType::real, "0.000035", "learning rate after the first milestone"},
      {"optim.final_lr", KeyType::real, "0.000003", "learning rate after the second milestone"},
      {"optim.first_milestone", KeyType::count, "60", "last epoch at the base rate"},
      {"optim.second_milestone", KeyType::count, "130", "last epoch at the middle rate"},
      {"optim.weight_decay", KeyType::real, "0.0005", "L2 weight decay"},
      {"optim.beta1", KeyType::real, "0.9", "Adam beta1"},
      {"optim.beta2", KeyType::real, "0.999", "Adam beta2"},
      {"optim.epochs", KeyType::count, "160", "training epochs"},
      {"optim.warmup_epochs", KeyType::count, "10", "warmup length in epochs"},
      {"optim.warmup_start_factor", KeyType::real, "0.1", "warmup start as a fraction of base_lr"},
      {"train.P", KeyType::count, "16", "identities per batch"},
      {"train.K", KeyType::count, "4", "instances per identity"},
      {"train.batches_per_epoch", KeyType::count, "0", "batches per epoch (0: one pass over identities)"},
      {"train.max_steps", KeyType::count, "0", "stop after this many steps (0: no limit)"},
      {"train.eval_every", KeyType::count, "0", "evaluate every N epochs (0: only at the end)"},
      {"train.checkpoint_every", KeyType::count, "10", "keep a numbered checkpoint every N epochs"},
      {"train.freeze_trunk", KeyType::flag, "false", "keep trunk weights fixed"},
      {"augment.enabled", KeyType::flag, "true", "random flip and erasing"},
      {"augment.flip_prob", KeyType::real, "0.5", "horizontal flip probability"},
      {"augment.erase_prob", KeyType::real, "0.5", "random erasing probability"},
      {"augment.erase_area_min", KeyType::real, "0.02", "minimum erased area fraction"},
      {"augment.erase_area_max", KeyType::real, "0.4", "maximum erased area fraction"},
      {"augment.erase_aspect_min", KeyType::real, "0.3", "minimum erased aspect ratio"},
      {"data.layout", KeyType::choice, "market_style", "dataset layout",
       {"market_style", "cuhk03_style", "synthetic"}},
      {"data.root", KeyType::text, "", "dataset root directory"},
      {"data.height", KeyType::count, "256", "input height"},
      {"data.width", KeyType::count, "128", "input width"},
      {"data.synthetic.num_ids", KeyType::count, "8", "synthetic identities"},
      {"data.synthetic.imgs_per_id", KeyType::count, "8", "synthetic training images per identity"},
      {"data.synthetic.query_per_id", KeyType::count, "2", "synthetic query images per identity"},
      {"data.synthetic.gallery_per_id", KeyType::count, "4", "synthetic gallery images per identity"},
      {"data.synthetic.noise", KeyType::real, "0.08", "synthetic pixel noise"},
      {"data.synthetic.seed", KeyType::integer, "0", "synthetic dataset seed"},
      {"eval.distance", KeyType::choice, "euclidean", "retrieval distance", {"euclidean", "cosine"}},
      {"eval.normalize", KeyType::flag, "true", "L2-normalize features before ranking"},
      {"eval.batch_size", KeyType::count, "64", "feature extraction batch size"},
  };
  return schema;
}

inline const ConfigKey* find_key(std::string_view key) {
  for (const auto& k : config_schema())
    if (k.key == key) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    auto item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

inline bool parse_u64(const std::string& s, std::uint64_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_i64(const std::string& s, std::int64_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_flag(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return out = true, true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return out = false, true;
  return false;
}

/// Checks one value against its key type; returns an error message or "".
inline std::string check_value(const ConfigKey& k, const std::string& v) {
  double d;
  std::uint64_t u;
  std::int64_t i;
  bool b;
  switch (k.type) {
    case KeyType::real: return parse_double(v, d) ? "" : "expected a real number";
    case KeyType::count: return parse_u64(v, u) ? "" : "expected a non-negative integer";
    case KeyType::integer: return parse_i64(v, i) ? "" : "expected an integer";
    case KeyType::flag: return parse_flag(v, b) ? "" : "expected true or false";
    case KeyType::text: return "";
    case KeyType::choice: {
      if (std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end()) return "";
      std::string msg = "expected one of";
      for (const auto& c : k.choices) msg += " " + c;
      return msg;
    }
    case KeyType::branches: {
      for (const auto& item : split_list(v)) {
        try {
          parse_branch(item);
        } catch (const std::invalid_argument&) {
          return "unknown branch '" + item + "' (expected local, global, gcp, ovr)";
        }
      }
      return "";
    }
    case KeyType::counts: {
      auto items = split_list(v);
      if (items.empty()) return "expected a comma-separated list of integers";
      for (const auto& item : items)
        if (!parse_u64(item, u)) return "expected a comma-separated list of integers";
      return "";
    }
  }
  return "unknown key type";
}

}  // namespace detail

/// Fully resolved run configuration: every schema key with a string value.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.key] = k.default_value;
  }

  /// Parses `key = value` lines ('#' starts a comment). All problems are
  /// collected and reported together.
  static RunConfig from_text(std::string_view text, const std::string& source = "config") {
    RunConfig cfg;
    std::vector<std::string> problems;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto body = detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        problems.push_back(source + ":" + std::to_string(lineno) + ": expected key=value");
        continue;
      }
      cfg.collect_set(detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)), problems);
    }
    if (!problems.empty()) throw ConfigError(join_problems(problems));
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    std::vector<std::string> problems;
    collect_set(key, value, problems);
    if (!problems.empty()) throw ConfigError(join_problems(problems));
  }

  /// Applies `key=value` overrides.
  void apply_overrides(const std::vector<std::string>& overrides) {
    std::vector<std::string> problems;
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) {
        problems.push_back("override '" + o + "': expected key=value");
        continue;
      }
      collect_set(detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)), problems);
    }
    if (!problems.empty()) throw ConfigError(join_problems(problems));
  }

  /// Replaces data.root with the environment override when it is set.
  void apply_environment() {
    if (const char* root = std::getenv(kDataRootEnv); root != nullptr && *root != '\0') values_["data.root"] = root;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  const std::map<std::string, std::string>& values() const { return values_; }

  double real(const std::string& key) const {
    double d = 0;
    if (!detail::parse_double(get(key), d)) throw ConfigError(key + ": expected a real number");
    return d;
  }
  std::size_t count(const std::string& key) const {
    std::uint64_t u = 0;
    if (!detail::parse_u64(get(key), u)) throw ConfigError(key + ": expected a non-negative integer");
    return static_cast<std::size_t>(u);
  }
  std::int64_t integer(const std::string& key) const {
    std::int64_t i = 0;
    if (!detail::parse_i64(get(key), i)) throw ConfigError(key + ": expected an integer");
    return i;
  }
  bool flag(const std::string& key) const {
    bool b = false;
    if (!detail::parse_flag(get(key), b)) throw ConfigError(key + ": expected true or false");
    return b;
  }
  BranchSet branch_set(const std::string& key) const {
    BranchSet s;
    for (const auto& item : detail::split_list(get(key))) s.set(parse_branch(item));
    return s;
  }
  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : detail::split_list(get(key))) {
      std::uint64_t u = 0;
      if (!detail::parse_u64(item, u)) throw ConfigError(key + ": expected a list of integers");
      out.push_back(static_cast<std::size_t>(u));
    }
    return out;
  }

  /// Sorted `key=value` lines; the hashed and snapshotted form.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }
  std::string hash() const { return sha256_hex(canonical()); }

  void write_snapshot(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << canonical();
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  DatasetLayout layout() const {
    const auto& l = get("data.layout");
    if (l == "synthetic") return DatasetLayout::synthetic;
    if (l == "cuhk03_style") return DatasetLayout::cuhk03_style;
    return DatasetLayout::market_style;
  }

  ModelConfig model(std::size_t num_identities) const {
    ModelConfig m;
    m.trunk.variant = get("trunk.variant") == "tiny_test" ? TrunkVariant::tiny_test : TrunkVariant::osnet_like;
    m.trunk.out_channels = count("trunk.channels");
    m.trunk.stride = count("trunk.stride");
    m.trunk.share_tail_stages = flag("trunk.share_tail");
    m.branches = branch_set("branches");
    m.bottleneck_dim = count("bottleneck_dim");
    m.local_stripes = count("local_stripes");
    m.gcp_stripes = count("gcp_stripes");
    m.ovr_splits = counts("ovr_splits");
    m.gem_enabled = flag("gem.enabled");
    m.local_gem = GemParams{real("gem.local_p"), flag("gem.learnable"), 1e-6};
    m.global_gem = GemParams{real("gem.global_p"), flag("gem.learnable"), 1e-6};
    m.neck_bn = flag("neck.bn");
    m.bdb_enabled = flag("bdb.enabled");
    m.bdb = BdbConfig{real("bdb.height_ratio"), real("bdb.width_ratio"), branch_set("bdb.branches")};
    m.gcd_enabled = flag("gcd.enabled");
    m.gcd = GcdConfig{real("gcd.sigma")};
    m.num_identities = num_identities;
    return m;
  }

  ObjectiveConfig objective() const {
    ObjectiveConfig o;
    o.weights = LossWeights{real("loss.id"), real("loss.triplet"), real("loss.center")};
    o.triplet.mode = get("loss.triplet_mode") == "hinge_margin" ? TripletMode::hinge_margin : TripletMode::softplus;
    o.triplet.margin = real("loss.margin");
    o.triplet_branches = branch_set("loss.triplet_branches");
    o.center_branches = branch_set("loss.center_branches");
    o.center_lr = real("loss.center_lr");
    return o;
  }

  OptimConfig optim() const {
    OptimConfig o;
    o.base_lr = real("optim.base_lr");
    o.mid_lr = real("optim.mid_lr");
    o.final_lr = real("optim.final_lr");
    o.first_milestone = count("optim.first_milestone");
    o.second_milestone = count("optim.second_milestone");
    o.weight_decay = real("optim.weight_decay");
    o.beta1 = real("optim.beta1");
    o.beta2 = real("optim.beta2");
    o.epochs = count("optim.epochs");
    o.warmup_epochs = count("optim.warmup_epochs");
    o.warmup_start_factor = real("optim.warmup_start_factor");
    return o;
  }

  EvalOptions eval() const {
    EvalOptions e;
    e.distance = get("eval.distance") == "cosine" ? DistanceMetric::cosine : DistanceMetric::euclidean;
    e.normalize = flag("eval.normalize");
    e.batch_size = count("eval.batch_size");
    return e;
  }

  SynthConfig synth() const {
    SynthConfig s;
    s.num_ids = count("data.synthetic.num_ids");
    s.imgs_per_id = count("data.synthetic.imgs_per_id");
    s.query_per_id = count("data.synthetic.query_per_id");
    s.gallery_per_id = count("data.synthetic.gallery_per_id");
    s.height = count("data.height");
    s.width = count("data.width");
    s.noise = real("data.synthetic.noise");
    s.seed = static_cast<std::uint64_t>(integer("data.synthetic.seed"));
    return s;
  }

  FitConfig fit() const {
    FitConfig f;
    f.optim = optim();
    f.pk = PkBatchSpec{count("train.P"), count("train.K")};
    f.augment_enabled = flag("augment.enabled");
    f.augment.flip_prob = real("augment.flip_prob");
    f.augment.erase_prob = real("augment.erase_prob");
    f.augment.erase_area_min = real("augment.erase_area_min");
    f.augment.erase_area_max = real("augment.erase_area_max");
    f.augment.erase_aspect_min = real("augment.erase_aspect_min");
    f.batches_per_epoch = count("train.batches_per_epoch");
    f.max_steps = count("train.max_steps");
    f.eval_every = count("train.eval_every");
    f.checkpoint_every = count("train.checkpoint_every");
    f.eval = eval();
    f.freeze_trunk = flag("train.freeze_trunk");
    f.seed = seed();
    f.config_hash = hash();
    return f;
  }

  /// Cross-field checks on the typed configs; throws ConfigError.
  void validate() const {
    std::vector<std::string> problems;
    auto check = [&](const char* what, const std::function<void()>& f) {
      try {
        f();
      } catch (const std::exception& e) {
        problems.push_back(std::string(what) + ": " + e.what());
      }
    };
    check("model", [&] { model(2).validate(); });
    check("loss", [&] { objective().weights.validate(); });
    check("optim", [&] { optim().validate(); });
    check("train", [&] {
      fit().pk.validate();
      if (flag("augment.enabled")) fit().augment.validate();
    });
    check("data", [&] {
      const std::size_t h = count("data.height"), w = count("data.width");
      const auto m = model(2);
      if (h % m.trunk.stride != 0 || w % m.trunk.stride != 0)
        throw std::invalid_argument("input size must be divisible by the trunk stride");
      if (h / m.trunk.stride < m.min_feature_height())
        throw std::invalid_argument("input height too small for the configured stripe counts");
    });
    check("loss.triplet_mode", [&] {
      if (real("loss.triplet") > 0 && count("train.K") < 2)
        throw std::invalid_argument("triplet loss needs train.K >= 2");
    });
    if (!problems.empty()) throw ConfigError(join_problems(problems));
  }

 private:
  void collect_set(const std::string& key, const std::string& value, std::vector<std::string>& problems) {
    const ConfigKey* k = find_key(key);
    if (k == nullptr) {
      problems.push_back("unknown key '" + key + "'");
      return;
    }
    if (auto err = detail::check_value(*k, value); !err.empty()) {
      problems.push_back(key + "=" + value + ": " + err);
      return;
    }
    values_[key] = value;
  }

  static std::string join_problems(const std::vector<std::string>& problems) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    return msg;
  }

  std::map<std::string, std::string> values_;
};

/// Dataset described by the config: synthetic, or ingested from data.root.
inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.layout() == DatasetLayout::synthetic) return synth_dataset(cfg.synth());
  const auto& root = cfg.get("data.root");
  if (root.empty()) {
    throw DataError(std::string("no dataset root: set data.root or the ") + kDataRootEnv +
                    " environment variable");
  }
  return ingest_dataset(root, cfg.layout());
}

}  // namespace bcosnet
