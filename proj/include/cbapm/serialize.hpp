#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbapm/linalg.hpp"

namespace cbapm {

/*
 Checkpoint container: versioned header, rng seed, training-control
 state, then named tensors with explicit little-endian 64-bit float
 payloads. The byte layout is fixed so files round-trip across
 platforms.

   magic   8 bytes  "CBAPMCK\1"
   u32     format version
   u64     rng seed
   f64     lr, f64 best_val
   u32     bad_epochs_sched, u32 bad_epochs_stop
   u32     tensor count
   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
               rows*cols f64 little-endian (column-major)
*/

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }

  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return v;
  }

  double get_f64() {
    std::uint64_t bits = get_u64();
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw std::runtime_error("checkpoint: truncated file");
  }
  unsigned char byte() { return static_cast<unsigned char>(data_[pos_++]); }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

} // namespace detail

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t seed = 0;
  double lr = 0.0;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint32_t bad_epochs_sched = 0;
  std::uint32_t bad_epochs_stop = 0;
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
};

inline constexpr char kCheckpointMagic[8] = {'C', 'B', 'A', 'P', 'M', 'C', 'K', '\1'};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 8);
  detail::put_u32(out, ck.version);
  detail::put_u64(out, ck.seed);
  detail::put_f64(out, ck.lr);
  detail::put_f64(out, ck.best_val);
  detail::put_u32(out, ck.bad_epochs_sched);
  detail::put_u32(out, ck.bad_epochs_stop);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index c = 0; c < t.value.cols(); ++c)
      for (Eigen::Index r = 0; r < t.value.rows(); ++r) detail::put_f64(out, t.value(r, c));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  detail::ByteReader rd(bytes.data() + 8, bytes.size() - 8);
  Checkpoint ck;
  ck.version = rd.get_u32();
  if (ck.version != 1) throw std::runtime_error("checkpoint: unsupported version");
  ck.seed = rd.get_u64();
  ck.lr = rd.get_f64();
  ck.best_val = rd.get_f64();
  ck.bad_epochs_sched = rd.get_u32();
  ck.bad_epochs_stop = rd.get_u32();
  std::uint32_t count = rd.get_u32();
  ck.tensors.resize(count);
  for (auto& t : ck.tensors) {
    std::uint32_t name_len = rd.get_u32();
    t.name = rd.get_bytes(name_len);
    std::uint32_t rows = rd.get_u32();
    std::uint32_t cols = rd.get_u32();
    t.value.resize(rows, cols);
    for (std::uint32_t c = 0; c < cols; ++c)
      for (std::uint32_t r = 0; r < rows; ++r) t.value(r, c) = rd.get_f64();
  }
  return ck;
}

// Atomic write: stage into a temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

} // namespace cbapm
