#pragma once

// POSIX-like file API on top of the write log, read cache and cleaner.
//
// Descriptor numbers are path-table slots and double as the file id logged
// with every entry. Files are identified by (device, inode); every
// descriptor of one file shares a FileRecord holding the authoritative size
// and the page tree, and carries its own cursor.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nvcache/backstore.hpp"
#include "nvcache/cleaner.hpp"
#include "nvcache/read_cache.hpp"
#include "nvcache/recovery.hpp"
#include "nvcache/write_log.hpp"

namespace nvcache {

namespace pmem {
class Region;
}

struct CacheConfig {
  /// Geometry to format an empty region with. When set and the region already
  /// holds a log, the two must agree.
  std::optional<wlog::LogGeometry> log = wlog::LogGeometry{};
  std::size_t page_size = 4096;
  std::size_t read_cache_pages = 1024;
  cleaner::BatchPolicy batch{};
  cleaner::RetryPolicy retry{};
  /// false: no cleaner thread; entries are consumed by Cache::cleaner().step()
  /// or, when the log is full or a barrier waits, inline by the blocked caller.
  bool background_cleaner = true;
  std::optional<std::chrono::nanoseconds> log_wait_timeout;
};

struct OpenMode {
  bool read = true;
  bool write = false;
  bool create = false;
  bool truncate = false;
  bool append = false;

  static OpenMode read_only() { return {}; }
  static OpenMode write_only() { return {false, true}; }
  static OpenMode read_write() { return {true, true}; }
  static OpenMode create_rw() { return {true, true, true}; }
};

enum class Whence { set, cur, end };
enum class FlockOp { shared, exclusive, unlock };

struct FileStat {
  std::uint64_t dev = 0;
  std::uint64_t ino = 0;
  std::uint64_t size = 0;
  bool regular = true;
};

/// Unbuffered stream handle of the fopen family.
struct Stream {
  int fd = -1;
  bool eof = false;
};

class Cache {
 public:
  Cache(pmem::Region& region, backstore::Backstore& store, CacheConfig config = {});
  ~Cache();
  Cache(const Cache&) = delete;
  Cache& operator=(const Cache&) = delete;

  /// Throws std::system_error: ENOENT, EMFILE (path table full), EBUSY
  /// (truncating a file with live descriptors).
  int open(std::string_view path, OpenMode mode = {});
  void close(int fd);

  std::size_t read(int fd, std::span<std::byte> out);
  std::size_t write(int fd, std::span<const std::byte> bytes);
  std::size_t pread(int fd, std::span<std::byte> out, std::uint64_t offset);
  std::size_t pwrite(int fd, std::span<const std::byte> bytes, std::uint64_t offset);

  std::uint64_t seek(int fd, std::int64_t delta, Whence whence);
  std::uint64_t tell(int fd);
  FileStat stat(std::string_view path);
  FileStat fstat(int fd);

  /// Writes are durable when they return; these do nothing.
  void fsync(int fd);
  void fdatasync(int fd) { fsync(fd); }
  void sync() {}

  /// Unlock first drains every pending entry of the file to the backing store.
  void flock(int fd, FlockOp op);

  /// fopen-family modes "r", "r+", "w", "w+", "a", "a+" ("b" ignored).
  Stream fopen(std::string_view path, std::string_view mode);
  std::size_t fread(void* ptr, std::size_t size, std::size_t count, Stream& s);
  std::size_t fwrite(const void* ptr, std::size_t size, std::size_t count, Stream& s);
  int fseek(Stream& s, std::int64_t offset, Whence whence);
  std::int64_t ftell(Stream& s);
  int fflush(Stream&) { return 0; }
  int fclose(Stream& s);

  /// Present when construction found and replayed an existing log.
  const std::optional<recovery::Report>& recovery_report() const noexcept { return recovered_; }

  wlog::WriteLog& log() noexcept { return *log_; }
  cleaner::Cleaner& cleaner() noexcept { return *cleaner_; }
  rcache::ReadCache& read_cache() noexcept { return rcache_; }
  backstore::Backstore& store() noexcept { return store_; }
  std::size_t page_size() const noexcept { return page_size_; }

  /// Called for every page atomic lock the read and write paths take, in
  /// acquisition order. Test hook.
  void set_lock_trace(std::function<void(int fd, std::uint64_t page)> trace) { lock_trace_ = std::move(trace); }

  /// Number of distinct files with live descriptors.
  std::size_t open_files() const;
  /// Whether the file behind `fd` has a page tree (false for files only
  /// ever opened read-only, whose reads bypass the read cache).
  bool has_page_tree(int fd);

 private:
  struct FileRecord;
  struct OpenedFile;
  class Source;

  std::shared_ptr<OpenedFile> handle(int fd) const;
  int allocate_slot();
  void free_slot(int fd);
  std::size_t do_pread(OpenedFile& of, std::span<std::byte> out, std::uint64_t offset);
  std::size_t do_pwrite(OpenedFile& of, std::span<const std::byte> bytes, std::uint64_t offset);
  void read_pages(OpenedFile& of, FileRecord& rec, std::span<std::byte> out, std::uint64_t offset);
  cleaner::Target resolve(std::uint64_t file_id) const;

  pmem::Region& region_;
  backstore::Backstore& store_;
  const std::size_t page_size_;
  std::unique_ptr<wlog::WriteLog> log_;
  std::optional<recovery::Report> recovered_;
  rcache::ReadCache rcache_;
  std::unique_ptr<cleaner::Cleaner> cleaner_;
  std::uint64_t segment_limit_;  // no log entry crosses a multiple of this

  mutable std::shared_mutex fds_mu_;
  std::vector<std::shared_ptr<OpenedFile>> fds_;
  std::vector<int> free_slots_;
  std::unique_ptr<std::atomic<FileRecord*>[]> slot_owner_;

  mutable std::mutex files_mu_;  // file table and FileRecord refcounts
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::shared_ptr<FileRecord>> files_;

  std::function<void(int, std::uint64_t)> lock_trace_;
};

}  // namespace nvcache
