#pragma once

// Backing mass storage. PosixBackstore maps logical paths under a root
// directory onto the real filesystem; SimBackstore is an in-memory disk with
// a configurable cost model and a volatile write cache that only sync makes
// durable.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace nvcache::backstore {

struct OpenFlags {
  bool read = true;
  bool write = false;
  bool create = false;
  bool truncate = false;
};

struct FileInfo {
  std::uint64_t dev = 0;
  std::uint64_t ino = 0;
  std::uint64_t size = 0;
  bool regular = true;
};

class BackingFile {
 public:
  virtual ~BackingFile() = default;
  /// Returns the bytes read; short only at end of file.
  virtual std::size_t pread(std::uint64_t offset, std::span<std::byte> out) = 0;
  virtual void pwrite(std::uint64_t offset, std::span<const std::byte> bytes) = 0;
  virtual void sync() = 0;
  virtual FileInfo info() const = 0;
  virtual void lock(bool exclusive) = 0;
  virtual void unlock() = 0;
};

struct Counters {
  std::uint64_t preads = 0;
  std::uint64_t pwrites = 0;
  std::uint64_t syncs = 0;
  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
};

class Backstore {
 public:
  virtual ~Backstore() = default;
  /// Throws std::system_error (ENOENT, EACCES, ...) like open(2).
  virtual std::unique_ptr<BackingFile> open(std::string_view path, const OpenFlags& flags) = 0;
  virtual std::optional<FileInfo> stat(std::string_view path) const = 0;

  Counters counters() const;
  std::uint64_t sync_calls() const noexcept { return syncs_.load(std::memory_order_relaxed); }

 protected:
  void count_pread(std::size_t n) {
    preads_.fetch_add(1, std::memory_order_relaxed);
    bytes_read_.fetch_add(n, std::memory_order_relaxed);
  }
  void count_pwrite(std::size_t n) {
    pwrites_.fetch_add(1, std::memory_order_relaxed);
    bytes_written_.fetch_add(n, std::memory_order_relaxed);
  }
  void count_sync() { syncs_.fetch_add(1, std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> preads_{0}, pwrites_{0}, syncs_{0}, bytes_read_{0}, bytes_written_{0};
};

class PosixBackstore final : public Backstore {
 public:
  /// Logical path "/a/b" resolves to root/a/b. An empty root uses paths as given.
  explicit PosixBackstore(std::filesystem::path root = {});

  std::unique_ptr<BackingFile> open(std::string_view path, const OpenFlags& flags) override;
  std::optional<FileInfo> stat(std::string_view path) const override;

  std::filesystem::path resolve(std::string_view path) const;

 private:
  friend class PosixFile;
  std::filesystem::path root_;
};

// -- simulated disk -------------------------------------------------------------

enum class TimeMode {
  real_sleep,  // costs are slept, the device is a single serial resource
  virtual_time,  // costs accumulate and are collected with take_virtual_cost()
};

struct SimDiskConfig {
  double throughput = 0;  // bytes per second; 0 means infinitely fast
  std::chrono::nanoseconds per_sync_latency{0};
  std::chrono::nanoseconds per_op_latency{0};
  std::size_t page_size = 4096;
  bool store_data = true;
  TimeMode time = TimeMode::real_sleep;
};

enum class DiskCrash {
  lose_unsynced,  // only synced bytes survive
  keep_all,       // the volatile disk cache made it out too
};

struct SimFileImage {
  std::uint64_t ino = 0;
  bool regular = true;
  std::uint64_t size = 0;
  std::vector<std::byte> data;
};
using DiskSnapshot = std::map<std::string, SimFileImage, std::less<>>;

class SimBackstore final : public Backstore {
 public:
  explicit SimBackstore(SimDiskConfig config = {});
  SimBackstore(SimDiskConfig config, const DiskSnapshot& restore);
  ~SimBackstore() override;

  std::unique_ptr<BackingFile> open(std::string_view path, const OpenFlags& flags) override;
  std::optional<FileInfo> stat(std::string_view path) const override;

  const SimDiskConfig& config() const noexcept { return config_; }

  /// A non-regular file (device, pipe): reads return zeros, writes vanish.
  void create_special(std::string_view path);
  /// Direct, cost-free view of the current (volatile) content.
  std::optional<std::vector<std::byte>> contents(std::string_view path) const;
  /// Adds or replaces a file with the given durable content.
  void put(std::string_view path, std::span<const std::byte> bytes);
  void remove(std::string_view path);
  std::vector<std::string> paths() const;

  DiskSnapshot crash(DiskCrash policy) const;

  /// Makes the next `count` pwrite calls fail with EIO; negative fails forever.
  void inject_write_faults(std::int64_t count);

  /// Virtual cost accumulated since the previous call.
  std::chrono::nanoseconds take_virtual_cost();
  /// Total modeled device time so far.
  std::chrono::nanoseconds busy_time() const;

 private:
  struct File;
  class Handle;
  friend class Handle;

  void charge(std::chrono::nanoseconds cost);
  std::chrono::nanoseconds transfer_cost(std::uint64_t pages) const;
  std::shared_ptr<File> find(std::string_view path) const;

  SimDiskConfig config_;
  mutable std::mutex mu_;  // guards files_ map and every File
  std::map<std::string, std::shared_ptr<File>, std::less<>> files_;
  std::uint64_t next_ino_ = 1;
  std::int64_t write_faults_ = 0;

  std::mutex device_mu_;
  std::chrono::steady_clock::time_point busy_until_{};
  std::atomic<std::int64_t> pending_virtual_ns_{0};
  std::atomic<std::int64_t> busy_ns_{0};
};

}  // namespace nvcache::backstore
