#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bimm/param_store.hpp"

namespace bimm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

// ---------------------------------------------------------------------------
// Binary checkpoint layout (all integers little-endian):
//   magic "BIMM" | u32 version | u64 config_len | config bytes (JSON)
//   u32 n_tensors
//   per tensor: u32 name_len | name | u8 dtype (0 f32, 1 f64)
//               u32 ndim | u64 dims[ndim] | u64 offset | u64 nbytes
//   payload (offsets relative to payload start, contiguous ascending)
// ---------------------------------------------------------------------------
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CorruptionError("checkpoint: truncated while reading a header field");
  return v;
}

inline std::string read_bytes(std::istream& is, size_t n, const char* what) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw CorruptionError(std::string("checkpoint: truncated while reading ") + what);
  return s;
}

template <class Real>
constexpr uint8_t dtype_tag() {
  return sizeof(Real) == 4 ? 0 : 1;
}

inline const char* dtype_name(uint8_t tag) { return tag == 0 ? "f32" : "f64"; }

}  // namespace detail

template <class Real>
void save_checkpoint(const std::string& path, const ParamStore<Real>& store,
                     const std::string& config_json) {
  static_assert(sizeof(Real) == 4 || sizeof(Real) == 8);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("save_checkpoint: cannot open " + path);

  os.write("BIMM", 4);
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  detail::write_pod<uint64_t>(os, config_json.size());
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(store.size()));

  uint64_t offset = 0;
  for (size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store.name(i);
    const Tensor<Real>& t = store.tensor(i);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint8_t>(os, detail::dtype_tag<Real>());
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.ndim()));
    for (size_t d = 0; d < t.ndim(); ++d) detail::write_pod<uint64_t>(os, t.dim(d));
    uint64_t nbytes = static_cast<uint64_t>(t.size()) * sizeof(Real);
    detail::write_pod<uint64_t>(os, offset);
    detail::write_pod<uint64_t>(os, nbytes);
    offset += nbytes;
  }
  for (size_t i = 0; i < store.size(); ++i) {
    const Tensor<Real>& t = store.tensor(i);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(Real)));
  }
  if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

// Loads a checkpoint whose payload dtype matches Real. The returned store
// reproduces names, shapes, and bytes exactly in the saved order.
template <class Real>
ParamStore<Real> load_checkpoint(const std::string& path, std::string* config_json = nullptr) {
  static_assert(sizeof(Real) == 4 || sizeof(Real) == 8);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_checkpoint: cannot open " + path);

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "BIMM", 4) != 0) {
    throw FormatError("load_checkpoint: bad magic in " + path);
  }
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw VersionError("load_checkpoint: version " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  }
  uint64_t config_len = detail::read_pod<uint64_t>(is);
  std::string config = detail::read_bytes(is, config_len, "the config blob");
  if (config_json) *config_json = config;

  uint32_t n_tensors = detail::read_pod<uint32_t>(is);
  std::vector<std::string> names(n_tensors);
  std::vector<Shape> shapes(n_tensors);
  std::vector<uint64_t> lengths(n_tensors);
  uint64_t expected_offset = 0;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    uint32_t name_len = detail::read_pod<uint32_t>(is);
    names[i] = detail::read_bytes(is, name_len, "a tensor name");
    uint8_t dtype = detail::read_pod<uint8_t>(is);
    if (dtype != detail::dtype_tag<Real>()) {
      throw FormatError("load_checkpoint: tensor " + names[i] + " stored as " +
                        detail::dtype_name(dtype) + ", requested " +
                        detail::dtype_name(detail::dtype_tag<Real>()));
    }
    uint32_t ndim = detail::read_pod<uint32_t>(is);
    uint64_t count = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      uint64_t dim = detail::read_pod<uint64_t>(is);
      shapes[i].push_back(static_cast<size_t>(dim));
      count *= dim;
    }
    uint64_t offset = detail::read_pod<uint64_t>(is);
    uint64_t nbytes = detail::read_pod<uint64_t>(is);
    if (offset != expected_offset || nbytes != count * sizeof(Real)) {
      throw CorruptionError("load_checkpoint: inconsistent directory entry for " + names[i]);
    }
    expected_offset += nbytes;
    lengths[i] = count;
  }

  ParamStore<Real> store;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::vector<Real> data(lengths[i]);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(lengths[i] * sizeof(Real)));
    if (!is) throw CorruptionError("load_checkpoint: truncated payload at " + names[i]);
    store.add(names[i], Tensor<Real>(shapes[i], std::move(data)));
  }
  is.peek();
  if (!is.eof()) throw CorruptionError("load_checkpoint: trailing bytes after the payload");
  return store;
}

// The config blob alone; cheap because the payload is never touched.
inline std::string read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_checkpoint_config: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "BIMM", 4) != 0) {
    throw FormatError("read_checkpoint_config: bad magic in " + path);
  }
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw VersionError("read_checkpoint_config: version " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  }
  uint64_t config_len = detail::read_pod<uint64_t>(is);
  return detail::read_bytes(is, config_len, "the config blob");
}

}  // namespace bimm
