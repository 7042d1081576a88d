#pragma once

// Checkpoints are NumPy .npz archives (an uncompressed zip of .npy arrays)
// plus a `manifest.json` member, so they open directly with numpy.load.

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "treediff/errors.hpp"

namespace treediff {

struct NamedArray {
  std::vector<std::int64_t> shape;
  /// NumPy descr, "<f4" or "<f8" (or "<i8" for integer tables).
  std::string dtype;
  /// Raw little-endian payload in C order.
  std::vector<unsigned char> data;

  bool operator==(const NamedArray&) const = default;
};

template <typename S>
constexpr const char* numpy_descr() {
  if constexpr (std::is_same_v<S, float>) return "<f4";
  else if constexpr (std::is_same_v<S, double>) return "<f8";
  else return "<i8";
}

template <typename S>
NamedArray to_named_array(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& m) {
  NamedArray a;
  a.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  a.dtype = numpy_descr<S>();
  a.data.resize(sizeof(S) * static_cast<size_t>(m.size()));
  size_t off = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const S v = m(i, j);
      std::memcpy(a.data.data() + off, &v, sizeof(S));
      off += sizeof(S);
    }
  return a;
}

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> from_named_array(const NamedArray& a) {
  if (a.dtype != numpy_descr<S>()) throw CompatibilityError("array dtype " + a.dtype + " does not match model scalar");
  if (a.shape.size() != 2) throw IntegrityError("expected a 2-d array");
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> m(a.shape[0], a.shape[1]);
  if (a.data.size() != sizeof(S) * static_cast<size_t>(m.size())) throw IntegrityError("array payload size mismatch");
  size_t off = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      S v;
      std::memcpy(&v, a.data.data() + off, sizeof(S));
      m(i, j) = v;
      off += sizeof(S);
    }
  return m;
}

struct Manifest {
  /// One of "tree", "diffusion", "classifier".
  std::string stage;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  /// Stage-specific metadata (tree topology, conditioning variant, ...).
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  Manifest manifest;
  std::map<std::string, NamedArray> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Loads and integrity-checks an archive. When `expected_hash` is given and
/// differs from the manifest, throws CompatibilityError unless
/// `allow_mismatch` is set.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = {},
                           bool allow_mismatch = false);

/// In-memory variants used by save/load; exposed for corruption tests.
std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

/// FNV-1a over all array names and payloads; identifies parameter state.
std::uint64_t parameter_hash(const Checkpoint& ckpt);

}  // namespace treediff
