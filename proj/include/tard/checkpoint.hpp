#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "tard/backbone.hpp"
#include "tard/error.hpp"

namespace tard {

// Binary layout, little-endian:
//   "TARD" | u32 version | u64 config digest | u64 seed | u32 epoch
//   | u32 config text length | config text
//   | u32 array count | per array: u32 name length | name | u32 rank
//     | u32 dims[rank] | float32 values (row-major)
inline constexpr char kCheckpointMagic[4] = {'T', 'A', 'R', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
};

struct Checkpoint {
  CheckpointHeader header;
  std::string config_text;  // effective configuration, canonical form
  ModelParams params;
  std::vector<std::string> warnings;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  void put_bytes(const std::string& s) { bytes_.append(s); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorKind::kFormat, "checkpoint truncated");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Values are stored as float32; training keeps parameters float32-exact so
// the round trip is bit-identical.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(std::string(kCheckpointMagic, 4));
  w.put<std::uint32_t>(ck.header.version);
  w.put<std::uint64_t>(ck.header.config_digest);
  w.put<std::uint64_t>(ck.header.seed);
  w.put<std::uint32_t>(ck.header.epoch);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.config_text.size()));
  w.put_bytes(ck.config_text);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size()));
  for (const Param& p : ck.params.params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.put_bytes(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) w.put<float>(static_cast<float>(p.value[i]));
  }
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes,
                                         std::optional<std::uint64_t> expected_digest = std::nullopt) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail(ErrorKind::kFormat, "not a checkpoint (bad magic)");
  r.get_bytes(4);
  Checkpoint ck;
  ck.header.version = r.get<std::uint32_t>();
  if (ck.header.version != kCheckpointVersion)
    fail(ErrorKind::kIncompatible, "checkpoint format version " + std::to_string(ck.header.version) +
                                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  ck.header.config_digest = r.get<std::uint64_t>();
  ck.header.seed = r.get<std::uint64_t>();
  ck.header.epoch = r.get<std::uint32_t>();
  ck.config_text = r.get_bytes(r.get<std::uint32_t>());
  const std::uint32_t count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    Param p;
    p.name = r.get_bytes(r.get<std::uint32_t>());
    const std::uint32_t rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) fail(ErrorKind::kFormat, "bad rank for array '" + p.name + "'");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.get<std::uint32_t>();
      if (dim == 0 || dim > (1u << 24)) fail(ErrorKind::kFormat, "bad dimension for array '" + p.name + "'");
      p.shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    if (n > bytes.size()) fail(ErrorKind::kFormat, "checkpoint truncated");
    p.value.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) p.value[static_cast<Eigen::Index>(i)] = r.get<float>();
    ck.params.params.push_back(std::move(p));
  }
  if (!r.done()) fail(ErrorKind::kFormat, "trailing bytes after checkpoint payload");
  if (expected_digest && *expected_digest != ck.header.config_digest)
    ck.warnings.push_back("checkpoint config digest differs from the current configuration");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::kIo, "failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::kIo, "cannot move checkpoint into place: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<std::uint64_t> expected_digest = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected_digest);
}

}  // namespace tard
