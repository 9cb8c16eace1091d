#pragma once

#include "bcosnet/errors.hpp"
#include "bcosnet/layers.hpp"
#include "bcosnet/losses.hpp"
#include "bcosnet/optim.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcosnet {

// Checkpoint container (all integers little-endian):
//   char[8]  magic "BCOSCKPT"
//   u32      version (1)
//   u32      metadata count, then per entry: u32 len, key bytes, u32 len, value bytes
//   u32      tensor count, then per entry: u32 len, key bytes, u32 rank,
//            u64 dims[rank], f32 values[prod(dims)]
// Tensor keys are module paths ("trunk.conv1.conv.weight", "head.local.bias",
// "centers.gcp", "adam.m.<param path>", ...).

struct StoredTensor {
  std::vector<std::size_t> dims;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, StoredTensor> tensors;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'C', 'O', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (!is) throw DataError("truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get_le<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("truncated checkpoint");
  return s;
}

inline std::string dims_str(const std::vector<std::size_t>& d) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? " x " : "") << d[i];
  os << "]";
  return os.str();
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
      detail::put_string(os, k);
      detail::put_string(os, v);
    }
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [k, t] : ckpt.tensors) {
      detail::put_string(os, k);
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
      for (auto d : t.dims) detail::put_le<std::uint64_t>(os, d);
      for (float f : t.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        detail::put_le<std::uint32_t>(os, bits);
      }
    }
    if (!os) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw DataError(path.string() + " is not a checkpoint file");
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion)
    throw DataError("unsupported checkpoint version in " + path.string());
  Checkpoint ckpt;
  const auto nmeta = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    auto k = detail::get_string(is);
    ckpt.meta[k] = detail::get_string(is);
  }
  const auto ntensors = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    StoredTensor t;
    auto k = detail::get_string(is);
    const auto rank = detail::get_le<std::uint32_t>(is);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(detail::get_le<std::uint64_t>(is));
      n *= t.dims.back();
    }
    t.values.resize(n);
    for (auto& f : t.values) {
      const auto bits = detail::get_le<std::uint32_t>(is);
      std::memcpy(&f, &bits, sizeof(f));
    }
    ckpt.tensors.emplace(std::move(k), std::move(t));
  }
  return ckpt;
}

template <typename T>
void export_parameters(const ParameterList<T>& params, Checkpoint& ckpt) {
  for (const auto& [path, p] : params) {
    StoredTensor t{p->dims, {}};
    t.values.reserve(p->size());
    for (T v : p->value) t.values.push_back(static_cast<float>(v));
    ckpt.tensors[path] = std::move(t);
  }
}

/// Copies stored values into `params`. Every parameter must be present with
/// identical dimensions.
template <typename T>
void import_parameters(const Checkpoint& ckpt, ParameterList<T>& params) {
  for (auto& [path, p] : params) {
    auto it = ckpt.tensors.find(path);
    if (it == ckpt.tensors.end()) throw DataError("checkpoint is missing parameter '" + path + "'");
    if (it->second.dims != p->dims) {
      throw DataError("dimension mismatch for '" + path + "': checkpoint " +
                      detail::dims_str(it->second.dims) + " vs config " + detail::dims_str(p->dims));
    }
    for (std::size_t i = 0; i < p->size(); ++i) p->value[i] = static_cast<T>(it->second.values[i]);
  }
}

template <typename T>
void export_matrix(const std::string& key, const Matrix<T>& m, Checkpoint& ckpt) {
  StoredTensor t{{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, {}};
  for (Eigen::Index i = 0; i < m.size(); ++i) t.values.push_back(static_cast<float>(m.data()[i]));
  ckpt.tensors[key] = std::move(t);
}

template <typename T>
void import_matrix(const Checkpoint& ckpt, const std::string& key, Matrix<T>& m) {
  auto it = ckpt.tensors.find(key);
  if (it == ckpt.tensors.end()) throw DataError("checkpoint is missing '" + key + "'");
  const std::vector<std::size_t> want{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  if (it->second.dims != want) {
    throw DataError("dimension mismatch for '" + key + "': checkpoint " + detail::dims_str(it->second.dims) +
                    " vs config " + detail::dims_str(want));
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(it->second.values[static_cast<std::size_t>(i)]);
}

template <typename T>
void export_optimizer(const Adam<T>& adam, Checkpoint& ckpt) {
  ckpt.meta["adam.steps"] = std::to_string(adam.steps());
  for (const auto& [path, st] : adam.state()) {
    StoredTensor m{{st.m.size()}, {}}, v{{st.v.size()}, {}};
    for (T x : st.m) m.values.push_back(static_cast<float>(x));
    for (T x : st.v) v.values.push_back(static_cast<float>(x));
    ckpt.tensors["adam.m." + path] = std::move(m);
    ckpt.tensors["adam.v." + path] = std::move(v);
  }
}

template <typename T>
void import_optimizer(const Checkpoint& ckpt, Adam<T>& adam) {
  auto it = ckpt.meta.find("adam.steps");
  if (it == ckpt.meta.end()) throw DataError("checkpoint has no optimizer state");
  adam.set_steps(std::stoull(it->second));
  adam.state().clear();
  const std::string mprefix = "adam.m.";
  for (const auto& [key, t] : ckpt.tensors) {
    if (key.rfind(mprefix, 0) != 0) continue;
    const std::string path = key.substr(mprefix.size());
    auto vit = ckpt.tensors.find("adam.v." + path);
    if (vit == ckpt.tensors.end()) throw DataError("checkpoint is missing 'adam.v." + path + "'");
    auto& st = adam.state()[path];
    st.m.assign(t.values.begin(), t.values.end());
    st.v.assign(vit->second.values.begin(), vit->second.values.end());
  }
}

}  // namespace bcosnet
