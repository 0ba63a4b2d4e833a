#pragma once

// Circular persistent write log.
//
// On-media layout (little-endian, every block line-aligned):
//
//   line 0      header: "NVCL", pad, version, entry_data_size, nb_entries,
//               line_size, fd_max, path_max (64-bit each after the magic)
//   line 1      persistent tail (monotone entry counter)
//   line 2..    path table: fd_max slots of path_max bytes, zero-terminated
//   then        nb_entries entries. Each entry is one header line followed
//               by entry_data_size payload bytes rounded up to whole lines.
//
// Entry header line: meta, file_id, offset, length, index. `meta` packs the
// commit flag (bit 0), the signed 32-bit group index (bits 1..32) and an
// in-use marker (bit 63). A free entry has meta == 0. `index` is the
// monotone log position the entry was written at, which lets recovery tell a
// live entry from one left behind by a consumed generation.
//
// head and the volatile tail are monotone counters; slot = counter % nb_entries.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nvcache/pmem.hpp"

namespace nvcache::wlog {

inline constexpr char kMagic[4] = {'N', 'V', 'C', 'L'};
inline constexpr std::uint64_t kVersion = 1;

struct LogGeometry {
  std::uint64_t entry_data_size = 4096;
  std::uint64_t nb_entries = 1024;
  std::uint64_t line_size = pmem::kDefaultLineSize;
  std::uint64_t fd_max = 1024;
  std::uint64_t path_max = 4096;

  void validate() const;

  std::uint64_t tail_offset() const { return line_size; }
  std::uint64_t path_table_offset() const { return 2 * line_size; }
  std::uint64_t entries_offset() const;
  std::uint64_t entry_stride() const;
  std::uint64_t entry_offset(std::uint64_t index) const {
    return entries_offset() + (index % nb_entries) * entry_stride();
  }
  std::uint64_t data_offset(std::uint64_t index) const { return entry_offset(index) + line_size; }
  /// Bytes a region needs to hold this log.
  std::uint64_t region_size() const;

  friend bool operator==(const LogGeometry&, const LogGeometry&) = default;
};

namespace meta {
inline constexpr std::uint64_t kCommit = 1;
inline constexpr std::uint64_t kInUse = std::uint64_t{1} << 63;
inline constexpr std::int32_t kStandalone = -1;

constexpr std::uint64_t pack(bool commit, std::int32_t group) {
  return kInUse | (std::uint64_t{static_cast<std::uint32_t>(group)} << 1) | (commit ? kCommit : 0);
}
constexpr bool committed(std::uint64_t m) { return (m & kCommit) != 0; }
constexpr bool in_use(std::uint64_t m) { return (m & kInUse) != 0; }
constexpr std::int32_t group(std::uint64_t m) { return static_cast<std::int32_t>(static_cast<std::uint32_t>(m >> 1)); }
}  // namespace meta

struct EntryHeader {
  std::uint64_t meta = 0;
  std::uint64_t file_id = 0;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t index = 0;

  bool committed() const { return meta::committed(meta); }
  bool in_use() const { return meta::in_use(meta); }
  std::int32_t group() const { return meta::group(meta); }
  bool is_first() const { return in_use() && group() == meta::kStandalone; }
};

// Byte offsets of the header fields inside an entry's first line.
inline constexpr std::size_t kMetaField = 0;
inline constexpr std::size_t kFileIdField = 8;
inline constexpr std::size_t kOffsetField = 16;
inline constexpr std::size_t kLengthField = 24;
inline constexpr std::size_t kIndexField = 32;

/// One piece of a logged write; never longer than entry_data_size.
struct Segment {
  std::uint64_t offset;
  std::span<const std::byte> data;
};

/// Reads and validates the header. Returns nullopt for a never-formatted
/// (all-zero magic) region; throws HeaderMismatch for anything else invalid.
std::optional<LogGeometry> read_header(const pmem::Region& region);

class WriteLog {
 public:
  /// Writes a fresh, empty log into `region`.
  static std::unique_ptr<WriteLog> format(pmem::Region& region, const LogGeometry& geometry);
  /// Attaches to an existing log; head and volatile tail start at the persistent tail.
  static std::unique_ptr<WriteLog> attach(pmem::Region& region);

  WriteLog(const WriteLog&) = delete;
  WriteLog& operator=(const WriteLog&) = delete;

  const LogGeometry& geometry() const noexcept { return geo_; }
  pmem::Region& region() noexcept { return region_; }
  const pmem::Region& region() const noexcept { return region_; }

  /// One free entry; waits while the log is full.
  std::uint64_t next_entry() { return reserve(1); }
  /// `count` contiguous free entries; returns the first index.
  std::uint64_t reserve(std::uint64_t count);

  std::uint64_t append_single(std::uint64_t file_id, std::uint64_t offset, std::span<const std::byte> payload);
  /// Splits `payload` at file offsets aligned to entry_data_size and commits
  /// the pieces as one group.
  std::uint64_t append_group(std::uint64_t file_id, std::uint64_t offset, std::span<const std::byte> payload);
  /// Commits `segments` atomically: followers and first entry are filled and
  /// flushed, one fence, then the first entry's commit flag. Durable on return.
  std::uint64_t append(std::uint64_t file_id, std::span<const Segment> segments);

  void bind_path(std::uint64_t file_id, std::string_view path);
  std::string lookup_path(std::uint64_t file_id) const;
  void release_path(std::uint64_t file_id);

  /// Clears [first, first + count) and advances both tails. The persistent
  /// tail moves first, then the commit words, then (after psync) the volatile
  /// tail that writers wait on.
  void consume_mark(std::uint64_t first, std::uint64_t count);

  EntryHeader header(std::uint64_t index) const;
  /// Header of entry `index` if the slot currently holds that generation.
  /// The index field is read first, so the other fields are at least as new
  /// as the writer's fill of this generation.
  std::optional<EntryHeader> live_header(std::uint64_t index) const;
  void read_payload(std::uint64_t index, std::span<std::byte> out) const;

  std::uint64_t head() const noexcept { return head_.load(std::memory_order_acquire); }
  std::uint64_t volatile_tail() const noexcept { return vtail_.load(std::memory_order_acquire); }
  std::uint64_t persistent_tail() const;
  std::uint64_t occupancy() const noexcept { return head() - volatile_tail(); }

  /// Cleaner progress: every entry below this index has been written to the
  /// backing store (not necessarily synced).
  std::uint64_t propagated() const noexcept { return propagated_.load(std::memory_order_acquire); }
  void mark_propagated(std::uint64_t index) noexcept { propagated_.store(index, std::memory_order_release); }

  /// Called repeatedly by writers waiting for space.
  void set_wait_handler(std::function<void()> handler) { wait_handler_ = std::move(handler); }
  void set_wait_timeout(std::optional<std::chrono::nanoseconds> timeout) { wait_timeout_ = timeout; }
  std::uint64_t waiting_writers() const noexcept { return waiting_.load(std::memory_order_acquire); }
  /// Total number of reserve() calls that found the log full.
  std::uint64_t full_waits() const noexcept { return full_waits_.load(std::memory_order_relaxed); }

  /// Entries one write of `length` bytes at `offset` occupies.
  std::uint64_t entries_for(std::uint64_t offset, std::uint64_t length) const;

 private:
  WriteLog(pmem::Region& region, const LogGeometry& geometry, std::uint64_t tail);

  void fill(std::uint64_t index, std::uint64_t meta_word, std::uint64_t file_id, const Segment& seg);

  pmem::Region& region_;
  LogGeometry geo_;
  alignas(64) std::atomic<std::uint64_t> head_;
  alignas(64) std::atomic<std::uint64_t> vtail_;
  alignas(64) std::atomic<std::uint64_t> propagated_;
  alignas(64) std::atomic<std::uint64_t> waiting_{0};
  std::atomic<std::uint64_t> full_waits_{0};
  std::function<void()> wait_handler_;
  std::optional<std::chrono::nanoseconds> wait_timeout_;
};

}  // namespace nvcache::wlog
