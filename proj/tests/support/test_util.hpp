#pragma once

// Helpers shared by the unit and acceptance tests: byte buffers, a plain
// in-memory reference file, and small log configurations.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nvcache/write_log.hpp"

namespace nvtest {

using Bytes = std::vector<std::byte>;

inline Bytes bytes_of(std::string_view s) {
  Bytes b(s.size());
  std::memcpy(b.data(), s.data(), s.size());
  return b;
}

inline std::string string_of(std::span<const std::byte> b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

inline Bytes filled(std::size_t n, std::uint8_t v) { return Bytes(n, std::byte{v}); }

inline Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  Bytes b(n);
  for (auto& x : b) x = static_cast<std::byte>(rng() & 0xFF);
  return b;
}

/// The simplest possible file: a growable byte vector with POSIX pread/pwrite
/// semantics (holes read as zeros).
class ReferenceFile {
 public:
  void pwrite(std::uint64_t off, std::span<const std::byte> b) {
    if (b.empty()) return;
    if (data_.size() < off + b.size()) data_.resize(off + b.size());
    std::copy(b.begin(), b.end(), data_.begin() + static_cast<std::ptrdiff_t>(off));
  }
  std::size_t pread(std::uint64_t off, std::span<std::byte> out) const {
    if (off >= data_.size()) return 0;
    const std::size_t n = std::min<std::size_t>(out.size(), data_.size() - off);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(off), n, out.begin());
    return n;
  }
  std::uint64_t size() const { return data_.size(); }
  const Bytes& data() const { return data_; }

 private:
  Bytes data_;
};

inline nvcache::wlog::LogGeometry small_geometry(std::uint64_t eds = 256, std::uint64_t nb = 32) {
  nvcache::wlog::LogGeometry g;
  g.entry_data_size = eds;
  g.nb_entries = nb;
  g.fd_max = 8;
  g.path_max = 128;
  return g;
}

}  // namespace nvtest
