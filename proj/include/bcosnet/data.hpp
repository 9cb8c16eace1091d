#pragma once

#include "bcosnet/backbone.hpp"
#include "bcosnet/digest.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bcosnet {

enum class Split { train, query, gallery };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

enum class DatasetLayout { market_style, cuhk03_style, synthetic };

inline std::string_view to_string(DatasetLayout l) {
  switch (l) {
    case DatasetLayout::market_style: return "market_style";
    case DatasetLayout::cuhk03_style: return "cuhk03_style";
    case DatasetLayout::synthetic: return "synthetic";
  }
  return "?";
}

inline constexpr int kJunkId = -1;
inline constexpr int kDistractorId = 0;
inline constexpr std::size_t kNoPixels = std::numeric_limits<std::size_t>::max();

struct PersonImageRecord {
  std::string path;
  int person_id = 0;
  int camera_id = 0;
  Split split = Split::train;
  /// Contiguous training label in [0, num_train_ids), -1 outside the train split.
  int label = -1;
  /// Index into Dataset::pixels for in-memory images.
  std::size_t pixel_index = kNoPixels;

  bool junk() const { return person_id == kJunkId; }
  bool distractor() const { return person_id == kDistractorId; }
};

struct SplitSummary {
  std::size_t images = 0;
  std::size_t identities = 0;
  std::size_t cameras = 0;
};

struct Dataset {
  DatasetLayout layout = DatasetLayout::synthetic;
  std::string root;
  std::vector<PersonImageRecord> train, query, gallery;
  std::vector<ImageTensor> pixels;
  std::size_t num_train_ids = 0;

  const std::vector<PersonImageRecord>& split(Split s) const {
    return s == Split::train ? train : (s == Split::query ? query : gallery);
  }

  static SplitSummary summarize(const std::vector<PersonImageRecord>& recs) {
    std::set<int> ids, cams;
    for (const auto& r : recs) {
      if (!r.junk()) ids.insert(r.person_id);
      cams.insert(r.camera_id);
    }
    return {recs.size(), ids.size(), cams.size()};
  }
};

struct ParsedName {
  int person_id;
  int camera_id;
};

/// Parses `<pid>_c<cam>...` (e.g. "0002_c1s1_000451_03.jpg"); pid -1 marks
/// junk and pid 0 distractors.
inline std::optional<ParsedName> parse_market_filename(std::string_view name) {
  auto parse_int = [](std::string_view s, std::size_t& pos, int& out) {
    const char* begin = s.data() + pos;
    auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), out);
    if (ec != std::errc() || ptr == begin) return false;
    pos += static_cast<std::size_t>(ptr - begin);
    return true;
  };
  std::size_t pos = 0;
  ParsedName parsed{};
  if (!parse_int(name, pos, parsed.person_id)) return std::nullopt;
  if (parsed.person_id < kJunkId) return std::nullopt;
  if (name.substr(pos, 2) != "_c") return std::nullopt;
  pos += 2;
  if (!parse_int(name, pos, parsed.camera_id) || parsed.camera_id < 0) return std::nullopt;
  if (pos < name.size() && name[pos] != 's' && name[pos] != '_' && name[pos] != '.') return std::nullopt;
  return parsed;
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".ppm";
}

/// Re-labels train identities to [0, J) in ascending person-id order and
/// drops junk/distractor records from the train split.
inline void assign_train_labels(Dataset& ds) {
  std::erase_if(ds.train, [](const PersonImageRecord& r) { return r.junk() || r.distractor(); });
  std::map<int, int> relabel;
  for (const auto& r : ds.train) relabel.emplace(r.person_id, 0);
  int next = 0;
  for (auto& [pid, label] : relabel) label = next++;
  for (auto& r : ds.train) r.label = relabel.at(r.person_id);
  ds.num_train_ids = relabel.size();
}

/// Reads a market-style directory tree: bounding_box_train/ (or train/),
/// query/, bounding_box_test/ (or gallery/). CUHK03 uses the same layout once
/// its new-protocol split is materialized.
inline Dataset ingest_dataset(const std::filesystem::path& root, DatasetLayout layout) {
  namespace fs = std::filesystem;
  if (layout == DatasetLayout::synthetic)
    throw DataError("synthetic datasets are generated with synth_dataset(), not ingested");
  if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' does not exist");

  auto find_dir = [&](std::initializer_list<const char*> names) -> fs::path {
    for (const char* n : names)
      if (fs::is_directory(root / n)) return root / n;
    throw DataError("dataset root '" + root.string() + "' has no '" + *names.begin() + "' directory");
  };

  Dataset ds;
  ds.layout = layout;
  ds.root = root.string();
  std::vector<std::string> bad;
  const std::array<std::pair<Split, fs::path>, 3> dirs = {
      std::pair{Split::train, find_dir({"bounding_box_train", "train"})},
      std::pair{Split::query, find_dir({"query"})},
      std::pair{Split::gallery, find_dir({"bounding_box_test", "gallery"})}};
  for (const auto& [split, dir] : dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    auto& out = split == Split::train ? ds.train : (split == Split::query ? ds.query : ds.gallery);
    for (const auto& f : files) {
      auto parsed = parse_market_filename(f.filename().string());
      if (!parsed) {
        bad.push_back(f.string());
        continue;
      }
      out.push_back({f.string(), parsed->person_id, parsed->camera_id, split});
    }
    if (out.empty() && bad.empty())
      throw DataError("split '" + std::string(to_string(split)) + "' in " + dir.string() + " is empty");
  }
  if (!bad.empty()) {
    std::string msg = "unparseable image filenames (" + std::to_string(bad.size()) + "):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw DataError(msg);
  }
  assign_train_labels(ds);
  if (ds.train.empty()) throw DataError("train split has no labelled identities");
  return ds;
}

/// Manifest: records, per-split counts, and a checksum of the file list.
inline nlohmann::json dataset_manifest(const Dataset& ds) {
  nlohmann::json j;
  j["layout"] = to_string(ds.layout);
  j["root"] = ds.root;
  std::vector<std::string> files;
  for (auto split : {Split::train, Split::query, Split::gallery}) {
    const auto& recs = ds.split(split);
    const auto s = Dataset::summarize(recs);
    j["counts"][std::string(to_string(split))] = {
        {"images", s.images}, {"identities", s.identities}, {"cameras", s.cameras}};
    for (const auto& r : recs) {
      j["records"].push_back({{"path", r.path},
                              {"person_id", r.person_id},
                              {"camera_id", r.camera_id},
                              {"split", to_string(split)}});
      files.push_back(std::string(to_string(split)) + "/" + r.path);
    }
  }
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += f + "\n";
  j["checksum"] = sha256_hex(joined);
  return j;
}

// ---------------------------------------------------------------------------
// Images

inline constexpr std::array<float, 3> kImageMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageStd = {0.229f, 0.224f, 0.225f};

/// Bilinear resize (align-corners = false).
inline ImageTensor resize_bilinear(const ImageTensor& src, std::size_t h, std::size_t w) {
  if (src.height == h && src.width == w) return src;
  ImageTensor dst(h, w);
  const float sy = static_cast<float>(src.height) / static_cast<float>(h);
  const float sx = static_cast<float>(src.width) / static_cast<float>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const float fy = std::max(0.0f, (static_cast<float>(y) + 0.5f) * sy - 0.5f);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), src.height - 1);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const float ty = fy - static_cast<float>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const float fx = std::max(0.0f, (static_cast<float>(x) + 0.5f) * sx - 0.5f);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), src.width - 1);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const float tx = fx - static_cast<float>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float top = src.at(c, y0, x0) * (1 - tx) + src.at(c, y0, x1) * tx;
        const float bot = src.at(c, y1, x0) * (1 - tx) + src.at(c, y1, x1) * tx;
        dst.at(c, y, x) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return dst;
}

/// [0, 1] RGB -> per-channel standardized values.
inline void normalize_image(ImageTensor& img) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img.height * img.width; ++i) {
      float& v = img.data[c * img.height * img.width + i];
      v = (v - kImageMean[c]) / kImageStd[c];
    }
}

/// Binary PPM (P6, maxval <= 255) to [0, 1] RGB.
inline ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w == 0 || h == 0 || maxval == 0 || maxval > 255)
    throw DataError("unsupported PPM header in " + path.string());
  in.get();
  std::vector<unsigned char> buf(3 * w * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("truncated PPM " + path.string());
  ImageTensor img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(buf[(y * w + x) * 3 + c]) / static_cast<float>(maxval);
  return img;
}

/// Decodes a file into [0, 1] RGB. The default handles PPM; the CLI installs
/// a JPEG/PNG decoder when one is available.
using ImageDecoder = std::function<ImageTensor(const std::filesystem::path&)>;

/// Loads records as normalized images of a fixed size.
class ImageLoader {
 public:
  ImageLoader(std::size_t height, std::size_t width, ImageDecoder decoder = read_ppm)
      : height_(height), width_(width), decoder_(std::move(decoder)) {}

  ImageTensor load(const Dataset& ds, const PersonImageRecord& rec) const {
    if (rec.pixel_index != kNoPixels) {
      const auto& img = ds.pixels.at(rec.pixel_index);
      return resize_bilinear(img, height_, width_);
    }
    ImageTensor img = resize_bilinear(decoder_(rec.path), height_, width_);
    normalize_image(img);
    return img;
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

 private:
  std::size_t height_, width_;
  ImageDecoder decoder_;
};

// ---------------------------------------------------------------------------
// Sampling

struct PkBatchSpec {
  std::size_t P = 16;
  std::size_t K = 4;

  std::size_t batch_size() const { return P * K; }
  void validate() const {
    if (P < 1 || K < 1) throw std::invalid_argument("P and K must be positive");
  }
};

struct LabeledBatch {
  std::vector<std::size_t> indices;  // into Dataset::train
  std::vector<int> labels;
  std::vector<int> cameras;
};

/// P identities x K instances per batch. An epoch is one pass over the
/// identity list in shuffled order; identities with fewer than K images are
/// sampled with replacement.
class PkSampler {
 public:
  PkSampler(const std::vector<PersonImageRecord>& train, PkBatchSpec spec, Rng rng)
      : records_(&train), spec_(spec), rng_(std::move(rng)) {
    spec_.validate();
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train[i].label >= 0) by_label[train[i].label].push_back(i);
    for (auto& [label, idx] : by_label) {
      labels_.push_back(label);
      members_.push_back(std::move(idx));
    }
    if (labels_.size() < spec_.P) {
      throw DataError("PK sampling needs " + std::to_string(spec_.P) + " identities, dataset has " +
                      std::to_string(labels_.size()));
    }
  }

  std::size_t batches_per_epoch() const { return labels_.size() / spec_.P; }

  LabeledBatch next() {
    if (cursor_ + spec_.P > order_.size()) reshuffle();
    LabeledBatch batch;
    for (std::size_t p = 0; p < spec_.P; ++p) {
      const std::size_t id = order_[cursor_++];
      const auto& pool = members_[id];
      std::vector<std::size_t> picks;
      if (pool.size() >= spec_.K) {
        std::vector<std::size_t> tmp = pool;
        std::shuffle(tmp.begin(), tmp.end(), rng_.engine());
        picks.assign(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(spec_.K));
      } else {
        // Every image at least once, the remainder drawn with replacement.
        picks = pool;
        while (picks.size() < spec_.K) picks.push_back(pool[rng_.index(pool.size())]);
        std::shuffle(picks.begin(), picks.end(), rng_.engine());
      }
      for (auto i : picks) {
        batch.indices.push_back(i);
        batch.labels.push_back((*records_)[i].label);
        batch.cameras.push_back((*records_)[i].camera_id);
      }
    }
    return batch;
  }

  Rng& rng() { return rng_; }

 private:
  void reshuffle() {
    order_.resize(labels_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_.engine());
    cursor_ = 0;
  }

  const std::vector<PersonImageRecord>* records_;
  PkBatchSpec spec_;
  Rng rng_;
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// One PK batch from the train split.
inline LabeledBatch pk_sample(const Dataset& ds, PkBatchSpec spec, Rng& rng) {
  PkSampler sampler(ds.train, spec, Rng(rng.engine()()));
  return sampler.next();
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;  // aspect drawn from [min, 1/min]
  float erase_fill = 0.0f;        // in normalized units (0 = dataset mean)

  void validate() const {
    if (flip_prob < 0 || flip_prob > 1 || erase_prob < 0 || erase_prob > 1)
      throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
    if (!(erase_area_min > 0 && erase_area_min <= erase_area_max && erase_area_max <= 1))
      throw std::invalid_argument("erase area range must satisfy 0 < min <= max <= 1");
    if (!(erase_aspect_min > 0 && erase_aspect_min <= 1))
      throw std::invalid_argument("erase aspect minimum must lie in (0, 1]");
  }
};

inline ImageTensor hflip(const ImageTensor& img) {
  ImageTensor out(img.height, img.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

/// Random horizontal flip, then random erasing of one rectangle.
inline ImageTensor augment(const ImageTensor& img, const AugmentConfig& cfg, Rng& rng) {
  ImageTensor out = rng.bernoulli(cfg.flip_prob) ? hflip(img) : img;
  if (!rng.bernoulli(cfg.erase_prob)) return out;
  const double area = static_cast<double>(img.height * img.width);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * area;
    const double aspect = rng.uniform(cfg.erase_aspect_min, 1.0 / cfg.erase_aspect_min);
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (h == 0 || w == 0 || h >= img.height || w >= img.width) continue;
    const std::size_t top = rng.index(img.height - h + 1);
    const std::size_t left = rng.index(img.width - w + 1);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = top; y < top + h; ++y)
        for (std::size_t x = left; x < left + w; ++x) out.at(c, y, x) = cfg.erase_fill;
    break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::size_t num_ids = 8;
  std::size_t imgs_per_id = 8;
  std::size_t query_per_id = 2;
  std::size_t gallery_per_id = 4;
  std::size_t height = 64;
  std::size_t width = 32;
  double noise = 0.08;
  std::uint64_t seed = 0;
};

/// Identity-coded pedestrians: each identity wears an upper/lower colour pair
/// and a colour band at an identity-specific height, drawn over a random
/// per-image background; two cameras apply different global tints. Train
/// cameras alternate 0/1, query images come from camera 0 and gallery images
/// from camera 1. Pixels are stored normalized.
inline Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.num_ids < 2) throw std::invalid_argument("synthetic dataset needs at least 2 identities");
  if (cfg.height < 8 || cfg.width < 4) throw std::invalid_argument("synthetic images too small");
  Rng rng(cfg.seed);
  struct Look {
    std::array<float, 3> upper, lower, band;
    double band_pos;
  };
  std::vector<Look> looks;
  auto distance = [](const Look& a, const Look& b) {
    double d = 0;
    for (std::size_t c = 0; c < 3; ++c)
      d += std::pow(a.upper[c] - b.upper[c], 2) + std::pow(a.lower[c] - b.lower[c], 2);
    return std::sqrt(d);
  };
  while (looks.size() < cfg.num_ids) {
    Look l{};
    for (std::size_t attempt = 0; attempt < 200; ++attempt) {
      for (std::size_t c = 0; c < 3; ++c) {
        l.upper[c] = static_cast<float>(rng.uniform(0.05, 0.95));
        l.lower[c] = static_cast<float>(rng.uniform(0.05, 0.95));
        l.band[c] = static_cast<float>(rng.uniform(0.05, 0.95));
      }
      l.band_pos = rng.uniform(0.15, 0.85);
      bool ok = true;
      for (const auto& o : looks) ok = ok && distance(l, o) > 0.35;
      if (ok) break;
    }
    looks.push_back(l);
  }
  const std::array<std::array<float, 3>, 2> tint = {{{1.05f, 1.0f, 0.9f}, {0.9f, 1.0f, 1.08f}}};

  auto render = [&](const Look& look, int cam) {
    ImageTensor img(cfg.height, cfg.width);
    const double shift = rng.uniform(-0.06, 0.06);
    const double gain = rng.uniform(0.9, 1.1);
    const double band_h = 0.1;
    std::array<double, 3> bg;
    for (auto& b : bg) b = rng.uniform(0.0, 1.0);
    for (std::size_t y = 0; y < cfg.height; ++y) {
      const double v = static_cast<double>(y) / static_cast<double>(cfg.height) + shift;
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(cfg.width);
        const bool body = u > 0.15 && u < 0.85 && v > 0.05 && v < 0.97;
        for (std::size_t c = 0; c < 3; ++c) {
          double p = bg[c];
          if (body) {
            if (std::abs(v - look.band_pos) < band_h / 2) p = look.band[c];
            else p = v < 0.5 ? look.upper[c] : look.lower[c];
          }
          p = p * gain * tint[static_cast<std::size_t>(cam)][c] + rng.normal(0.0, cfg.noise);
          p = std::clamp(p, 0.0, 1.0);
          img.at(c, y, x) = static_cast<float>((p - kImageMean[c]) / kImageStd[c]);
        }
      }
    }
    return img;
  };

  Dataset ds;
  ds.layout = DatasetLayout::synthetic;
  ds.root = "synthetic";
  auto add = [&](Split split, std::size_t id, std::size_t k, int cam) {
    PersonImageRecord r;
    r.person_id = static_cast<int>(id) + 1;
    r.camera_id = cam;
    r.split = split;
    r.path = "synthetic/" + std::string(to_string(split)) + "/" + std::to_string(r.person_id) + "_c" +
             std::to_string(cam) + "_" + std::to_string(k);
    r.pixel_index = ds.pixels.size();
    ds.pixels.push_back(render(looks[id], cam));
    (split == Split::train ? ds.train : split == Split::query ? ds.query : ds.gallery).push_back(r);
  };
  for (std::size_t id = 0; id < cfg.num_ids; ++id)
    for (std::size_t k = 0; k < cfg.imgs_per_id; ++k) add(Split::train, id, k, static_cast<int>(k % 2));
  for (std::size_t id = 0; id < cfg.num_ids; ++id) {
    for (std::size_t k = 0; k < cfg.query_per_id; ++k) add(Split::query, id, k, 0);
    for (std::size_t k = 0; k < cfg.gallery_per_id; ++k) add(Split::gallery, id, k, 1);
  }
  assign_train_labels(ds);
  return ds;
}

}  // namespace bcosnet
