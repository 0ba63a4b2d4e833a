#include "nvcache/write_log.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "nvcache/errors.hpp"

namespace nvcache::wlog {
namespace {

constexpr bool is_pow2(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

// Header field offsets inside line 0.
constexpr std::size_t kHdrVersion = 8;
constexpr std::size_t kHdrEntryDataSize = 16;
constexpr std::size_t kHdrNbEntries = 24;
constexpr std::size_t kHdrLineSize = 32;
constexpr std::size_t kHdrFdMax = 40;
constexpr std::size_t kHdrPathMax = 48;
constexpr std::size_t kHdrBytes = 56;

void put_u64(std::byte* dst, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) dst[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_u64(const std::byte* src) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{std::to_integer<std::uint8_t>(src[i])} << (8 * i);
  return v;
}

}  // namespace

void LogGeometry::validate() const {
  if (!is_pow2(entry_data_size) || entry_data_size < 8) {
    throw std::invalid_argument("wlog: entry_data_size must be a power of two >= 8");
  }
  if (nb_entries == 0 || nb_entries > (std::uint64_t{1} << 31)) {
    throw std::invalid_argument("wlog: nb_entries must be in [1, 2^31]");
  }
  if (!is_pow2(line_size) || line_size < 64) throw std::invalid_argument("wlog: line_size must be a power of two >= 64");
  if (fd_max == 0) throw std::invalid_argument("wlog: fd_max must be positive");
  if (path_max < 2) throw std::invalid_argument("wlog: path_max must be at least 2");
}

std::uint64_t LogGeometry::entries_offset() const { return align_up(path_table_offset() + fd_max * path_max, line_size); }

std::uint64_t LogGeometry::entry_stride() const { return line_size + align_up(entry_data_size, line_size); }

std::uint64_t LogGeometry::region_size() const { return entries_offset() + nb_entries * entry_stride(); }

std::optional<LogGeometry> read_header(const pmem::Region& region) {
  if (region.size() < 2 * pmem::kDefaultLineSize) throw HeaderMismatch("wlog: region too small for a log header");
  std::array<std::byte, kHdrBytes> raw{};
  region.load(0, raw);
  if (std::all_of(raw.begin(), raw.end(), [](std::byte b) { return b == std::byte{0}; })) return std::nullopt;
  if (std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0) throw HeaderMismatch("wlog: bad magic");
  if (get_u64(raw.data() + kHdrVersion) != kVersion) throw HeaderMismatch("wlog: unsupported log version");
  LogGeometry g;
  g.entry_data_size = get_u64(raw.data() + kHdrEntryDataSize);
  g.nb_entries = get_u64(raw.data() + kHdrNbEntries);
  g.line_size = get_u64(raw.data() + kHdrLineSize);
  g.fd_max = get_u64(raw.data() + kHdrFdMax);
  g.path_max = get_u64(raw.data() + kHdrPathMax);
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw HeaderMismatch(std::string("wlog: corrupt header: ") + e.what());
  }
  if (g.line_size != region.line_size()) throw HeaderMismatch("wlog: header line size differs from region");
  if (g.region_size() > region.size()) throw HeaderMismatch("wlog: header describes a log larger than the region");
  return g;
}

WriteLog::WriteLog(pmem::Region& region, const LogGeometry& geometry, std::uint64_t tail)
    : region_(region), geo_(geometry), head_(tail), vtail_(tail), propagated_(tail) {}

std::unique_ptr<WriteLog> WriteLog::format(pmem::Region& region, const LogGeometry& geometry) {
  geometry.validate();
  if (geometry.line_size != region.line_size()) throw std::invalid_argument("wlog: geometry line size differs from region");
  if (geometry.region_size() > region.size()) throw std::invalid_argument("wlog: region too small for geometry");

  // Everything but the header first, so a torn format never looks valid.
  const std::vector<std::byte> zeros(std::min<std::uint64_t>(geometry.fd_max * geometry.path_max, 1 << 16));
  for (std::uint64_t off = 0; off < geometry.fd_max * geometry.path_max; off += zeros.size()) {
    const auto n = std::min<std::uint64_t>(zeros.size(), geometry.fd_max * geometry.path_max - off);
    region.store(geometry.path_table_offset() + off, std::span(zeros).first(n));
  }
  region.pwb_range(geometry.path_table_offset(), geometry.fd_max * geometry.path_max);
  for (std::uint64_t i = 0; i < geometry.nb_entries; ++i) {
    region.store_word(geometry.entry_offset(i) + kMetaField, 0);
    region.pwb(geometry.entry_offset(i));
  }
  region.store_word(geometry.tail_offset(), 0);
  region.pwb(geometry.tail_offset());
  region.pfence();

  std::array<std::byte, kHdrBytes> raw{};
  std::memcpy(raw.data(), kMagic, sizeof kMagic);
  put_u64(raw.data() + kHdrVersion, kVersion);
  put_u64(raw.data() + kHdrEntryDataSize, geometry.entry_data_size);
  put_u64(raw.data() + kHdrNbEntries, geometry.nb_entries);
  put_u64(raw.data() + kHdrLineSize, geometry.line_size);
  put_u64(raw.data() + kHdrFdMax, geometry.fd_max);
  put_u64(raw.data() + kHdrPathMax, geometry.path_max);
  region.store(0, raw);
  region.pwb(0);
  region.psync();
  return std::unique_ptr<WriteLog>(new WriteLog(region, geometry, 0));
}

std::unique_ptr<WriteLog> WriteLog::attach(pmem::Region& region) {
  const auto geometry = read_header(region);
  if (!geometry) throw HeaderMismatch("wlog: region holds no log");
  const std::uint64_t tail = region.load_word(geometry->tail_offset());
  return std::unique_ptr<WriteLog>(new WriteLog(region, *geometry, tail));
}

std::uint64_t WriteLog::persistent_tail() const { return region_.load_word(geo_.tail_offset()); }

std::uint64_t WriteLog::reserve(std::uint64_t count) {
  if (count == 0 || count > geo_.nb_entries) throw std::invalid_argument("wlog: reservation size out of range");
  std::uint64_t h = head_.load(std::memory_order_acquire);
  bool waited = false;
  std::chrono::steady_clock::time_point started;
  unsigned spins = 0;
  for (;;) {
    const std::uint64_t vt = vtail_.load(std::memory_order_acquire);
    if (h + count - vt <= geo_.nb_entries) {
      if (head_.compare_exchange_weak(h, h + count, std::memory_order_acq_rel, std::memory_order_acquire)) break;
      continue;
    }
    if (!waited) {
      waited = true;
      waiting_.fetch_add(1, std::memory_order_acq_rel);
      full_waits_.fetch_add(1, std::memory_order_relaxed);
      started = std::chrono::steady_clock::now();
    }
    if (wait_handler_) wait_handler_();
    if (++spins > 16) std::this_thread::yield();
    if (wait_timeout_ && std::chrono::steady_clock::now() - started > *wait_timeout_) {
      waiting_.fetch_sub(1, std::memory_order_acq_rel);
      throw SaturationTimeout("wlog: timed out waiting for a free log entry");
    }
    h = head_.load(std::memory_order_acquire);
  }
  if (waited) waiting_.fetch_sub(1, std::memory_order_acq_rel);
  return h;
}

void WriteLog::fill(std::uint64_t index, std::uint64_t meta_word, std::uint64_t file_id, const Segment& seg) {
  const std::uint64_t base = geo_.entry_offset(index);
  region_.store(geo_.data_offset(index), seg.data);
  region_.store_word(base + kFileIdField, file_id);
  region_.store_word(base + kOffsetField, seg.offset);
  region_.store_word(base + kLengthField, seg.data.size());
  region_.store_word(base + kIndexField, index);
  region_.store_word(base + kMetaField, meta_word);
  region_.pwb_range(base, geo_.line_size + seg.data.size());
}

std::uint64_t WriteLog::append(std::uint64_t file_id, std::span<const Segment> segments) {
  if (segments.empty()) throw std::invalid_argument("wlog: empty append");
  if (file_id >= geo_.fd_max) throw std::out_of_range("wlog: file id beyond path table");
  for (const Segment& s : segments) {
    if (s.data.empty() || s.data.size() > geo_.entry_data_size) {
      throw std::invalid_argument("wlog: segment length must be in [1, entry_data_size]");
    }
  }
  const std::uint64_t k = segments.size();
  const std::uint64_t first = reserve(k);
  const auto first_slot = static_cast<std::int32_t>(first % geo_.nb_entries);
  for (std::uint64_t j = 1; j < k; ++j) fill(first + j, meta::pack(false, first_slot), file_id, segments[j]);
  fill(first, meta::pack(false, meta::kStandalone), file_id, segments[0]);
  region_.pfence();
  const std::uint64_t meta_off = geo_.entry_offset(first) + kMetaField;
  region_.store_word(meta_off, meta::pack(true, meta::kStandalone));
  region_.pwb(meta_off);
  region_.psync();
  return first;
}

std::uint64_t WriteLog::append_single(std::uint64_t file_id, std::uint64_t offset, std::span<const std::byte> payload) {
  if (payload.empty() || payload.size() > geo_.entry_data_size) {
    throw std::invalid_argument("wlog: single-entry payload must be in [1, entry_data_size]");
  }
  const Segment seg{offset, payload};
  return append(file_id, std::span(&seg, 1));
}

std::uint64_t WriteLog::entries_for(std::uint64_t offset, std::uint64_t length) const {
  if (length == 0) return 0;
  return (offset + length - 1) / geo_.entry_data_size - offset / geo_.entry_data_size + 1;
}

std::uint64_t WriteLog::append_group(std::uint64_t file_id, std::uint64_t offset, std::span<const std::byte> payload) {
  if (payload.empty()) throw std::invalid_argument("wlog: empty append");
  std::vector<Segment> segments;
  segments.reserve(entries_for(offset, payload.size()));
  std::size_t done = 0;
  while (done < payload.size()) {
    const std::uint64_t at = offset + done;
    const std::size_t n = std::min<std::uint64_t>(payload.size() - done, geo_.entry_data_size - at % geo_.entry_data_size);
    segments.push_back(Segment{at, payload.subspan(done, n)});
    done += n;
  }
  return append(file_id, segments);
}

void WriteLog::bind_path(std::uint64_t file_id, std::string_view path) {
  if (file_id >= geo_.fd_max) throw std::out_of_range("wlog: path table full");
  if (path.empty()) throw std::invalid_argument("wlog: empty path");
  if (path.size() + 1 > geo_.path_max) throw std::length_error("wlog: path longer than path_max");
  std::vector<std::byte> slot(path.size() + 1);
  std::memcpy(slot.data(), path.data(), path.size());
  const std::uint64_t off = geo_.path_table_offset() + file_id * geo_.path_max;
  region_.store(off, slot);
  region_.pwb_range(off, slot.size());
  region_.psync();
}

std::string WriteLog::lookup_path(std::uint64_t file_id) const {
  if (file_id >= geo_.fd_max) throw std::out_of_range("wlog: file id beyond path table");
  std::vector<std::byte> slot(geo_.path_max);
  region_.load(geo_.path_table_offset() + file_id * geo_.path_max, slot);
  const auto end = std::find(slot.begin(), slot.end(), std::byte{0});
  if (end == slot.begin()) throw std::out_of_range("wlog: path slot " + std::to_string(file_id) + " not bound");
  return std::string(reinterpret_cast<const char*>(slot.data()), static_cast<std::size_t>(end - slot.begin()));
}

void WriteLog::release_path(std::uint64_t file_id) {
  if (file_id >= geo_.fd_max) throw std::out_of_range("wlog: file id beyond path table");
  const std::uint64_t off = geo_.path_table_offset() + file_id * geo_.path_max;
  const std::byte zero{0};
  region_.store(off, std::span(&zero, 1));
  region_.pwb(off);
  region_.psync();
}

void WriteLog::consume_mark(std::uint64_t first, std::uint64_t count) {
  if (count == 0) return;
  if (first != persistent_tail()) throw std::invalid_argument("wlog: consume must start at the persistent tail");
  if (first + count > head()) throw std::invalid_argument("wlog: consume beyond head");
  const std::uint64_t end = first + count;
  region_.store_word(geo_.tail_offset(), end);
  region_.pwb(geo_.tail_offset());
  region_.pfence();
  for (std::uint64_t i = first; i < end; ++i) {
    const std::uint64_t off = geo_.entry_offset(i) + kMetaField;
    region_.store_word(off, 0);
    region_.pwb(off);
  }
  region_.psync();
  vtail_.store(end, std::memory_order_release);
}

EntryHeader WriteLog::header(std::uint64_t index) const {
  const std::uint64_t base = geo_.entry_offset(index);
  EntryHeader h;
  h.meta = region_.load_word(base + kMetaField);
  h.file_id = region_.load_word(base + kFileIdField);
  h.offset = region_.load_word(base + kOffsetField);
  h.length = region_.load_word(base + kLengthField);
  h.index = region_.load_word(base + kIndexField);
  return h;
}

std::optional<EntryHeader> WriteLog::live_header(std::uint64_t index) const {
  const std::uint64_t base = geo_.entry_offset(index);
  EntryHeader h;
  h.index = region_.load_word(base + kIndexField);
  if (h.index != index) return std::nullopt;
  h.meta = region_.load_word(base + kMetaField);
  if (!h.in_use()) return std::nullopt;
  h.file_id = region_.load_word(base + kFileIdField);
  h.offset = region_.load_word(base + kOffsetField);
  h.length = region_.load_word(base + kLengthField);
  return h;
}

void WriteLog::read_payload(std::uint64_t index, std::span<std::byte> out) const {
  if (out.size() > geo_.entry_data_size) throw std::out_of_range("wlog: payload read beyond entry");
  region_.load(geo_.data_offset(index), out);
}

}  // namespace nvcache::wlog
