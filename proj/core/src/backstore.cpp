#include "nvcache/backstore.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <system_error>
#include <thread>

namespace nvcache::backstore {
namespace {

constexpr std::uint64_t kSimDevice = 0x51D0;

[[noreturn]] void throw_errno(int err, const std::string& what) {
  throw std::system_error(err, std::generic_category(), what);
}

}  // namespace

Counters Backstore::counters() const {
  Counters c;
  c.preads = preads_.load(std::memory_order_relaxed);
  c.pwrites = pwrites_.load(std::memory_order_relaxed);
  c.syncs = syncs_.load(std::memory_order_relaxed);
  c.bytes_read = bytes_read_.load(std::memory_order_relaxed);
  c.bytes_written = bytes_written_.load(std::memory_order_relaxed);
  return c;
}

// -- POSIX ---------------------------------------------------------------------

class PosixFile final : public BackingFile {
 public:
  PosixFile(PosixBackstore& owner, int fd, std::string path) : owner_(owner), fd_(fd), path_(std::move(path)) {}
  ~PosixFile() override { ::close(fd_); }

  std::size_t pread(std::uint64_t offset, std::span<std::byte> out) override {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw_errno(errno, "pread " + path_);
      }
      if (n == 0) break;
      done += static_cast<std::size_t>(n);
    }
    owner_.count_pread(done);
    return done;
  }

  void pwrite(std::uint64_t offset, std::span<const std::byte> bytes) override {
    std::size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = ::pwrite(fd_, bytes.data() + done, bytes.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        throw_errno(errno, "pwrite " + path_);
      }
      done += static_cast<std::size_t>(n);
    }
    owner_.count_pwrite(done);
  }

  void sync() override {
    if (::fdatasync(fd_) != 0 && errno != EINVAL) throw_errno(errno, "fdatasync " + path_);
    owner_.count_sync();
  }

  FileInfo info() const override {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw_errno(errno, "fstat " + path_);
    return FileInfo{static_cast<std::uint64_t>(st.st_dev), static_cast<std::uint64_t>(st.st_ino),
                    static_cast<std::uint64_t>(st.st_size), S_ISREG(st.st_mode)};
  }

  void lock(bool exclusive) override {
    while (::flock(fd_, exclusive ? LOCK_EX : LOCK_SH) != 0) {
      if (errno != EINTR) throw_errno(errno, "flock " + path_);
    }
  }

  void unlock() override {
    if (::flock(fd_, LOCK_UN) != 0) throw_errno(errno, "flock " + path_);
  }

 private:
  PosixBackstore& owner_;
  int fd_;
  std::string path_;
};

PosixBackstore::PosixBackstore(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path PosixBackstore::resolve(std::string_view path) const {
  if (root_.empty()) return std::filesystem::path(path);
  std::filesystem::path rel(path);
  return root_ / rel.relative_path();
}

std::unique_ptr<BackingFile> PosixBackstore::open(std::string_view path, const OpenFlags& flags) {
  int oflags = O_CLOEXEC;
  if (flags.read && flags.write) {
    oflags |= O_RDWR;
  } else if (flags.write) {
    oflags |= O_WRONLY;
  } else {
    oflags |= O_RDONLY;
  }
  if (flags.create) oflags |= O_CREAT;
  if (flags.truncate) oflags |= O_TRUNC;
  const auto real = resolve(path);
  int fd;
  do {
    fd = ::open(real.c_str(), oflags, 0644);
  } while (fd < 0 && errno == EINTR);
  if (fd < 0) throw_errno(errno, "open " + real.string());
  return std::make_unique<PosixFile>(*this, fd, real.string());
}

std::optional<FileInfo> PosixBackstore::stat(std::string_view path) const {
  struct stat st {};
  if (::stat(resolve(path).c_str(), &st) != 0) return std::nullopt;
  return FileInfo{static_cast<std::uint64_t>(st.st_dev), static_cast<std::uint64_t>(st.st_ino),
                  static_cast<std::uint64_t>(st.st_size), S_ISREG(st.st_mode)};
}

// -- simulated -------------------------------------------------------------------

struct SimBackstore::File {
  std::uint64_t ino = 0;
  bool regular = true;
  std::uint64_t size = 0;          // what reads see
  std::uint64_t durable_size = 0;  // what a disk crash keeps
  std::vector<std::byte> data;
  std::vector<std::byte> durable;
  std::unordered_set<std::uint64_t> dirty;   // pages written since the last sync
  std::unordered_set<std::uint64_t> cached;  // pages in the kernel page cache
};

class SimBackstore::Handle final : public BackingFile {
 public:
  Handle(SimBackstore& owner, std::shared_ptr<File> file, OpenFlags flags)
      : owner_(owner), file_(std::move(file)), flags_(flags) {}

  std::size_t pread(std::uint64_t offset, std::span<std::byte> out) override {
    if (!flags_.read) throw_errno(EBADF, "pread on write-only handle");
    const std::size_t ps = owner_.config_.page_size;
    std::uint64_t misses = 0;
    std::size_t n = 0;
    {
      std::lock_guard g(owner_.mu_);
      File& f = *file_;
      if (!f.regular) {
        std::fill(out.begin(), out.end(), std::byte{0});
        n = out.size();
      } else {
        n = offset >= f.size ? 0 : static_cast<std::size_t>(std::min<std::uint64_t>(out.size(), f.size - offset));
        if (n > 0) {
          if (owner_.config_.store_data) {
            const std::size_t have = f.data.size() > offset ? std::min<std::size_t>(n, f.data.size() - offset) : 0;
            if (have > 0) std::memcpy(out.data(), f.data.data() + offset, have);
            std::fill(out.begin() + static_cast<std::ptrdiff_t>(have), out.begin() + static_cast<std::ptrdiff_t>(n),
                      std::byte{0});
          } else {
            std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n), std::byte{0});
          }
          for (std::uint64_t p = offset / ps; p <= (offset + n - 1) / ps; ++p) {
            if (f.cached.insert(p).second) ++misses;
          }
        }
      }
    }
    owner_.count_pread(n);
    owner_.charge(owner_.config_.per_op_latency + owner_.transfer_cost(misses));
    return n;
  }

  void pwrite(std::uint64_t offset, std::span<const std::byte> bytes) override {
    if (!flags_.write) throw_errno(EBADF, "pwrite on read-only handle");
    {
      std::lock_guard g(owner_.mu_);
      if (owner_.write_faults_ != 0) {
        if (owner_.write_faults_ > 0) --owner_.write_faults_;
        throw_errno(EIO, "simulated write fault");
      }
      File& f = *file_;
      if (f.regular && !bytes.empty()) {
        const std::size_t ps = owner_.config_.page_size;
        const std::uint64_t end = offset + bytes.size();
        if (owner_.config_.store_data) {
          if (f.data.size() < end) f.data.resize(end);
          std::memcpy(f.data.data() + offset, bytes.data(), bytes.size());
        }
        f.size = std::max(f.size, end);
        for (std::uint64_t p = offset / ps; p <= (end - 1) / ps; ++p) {
          f.dirty.insert(p);
          f.cached.insert(p);
        }
      }
    }
    owner_.count_pwrite(bytes.size());
    owner_.charge(owner_.config_.per_op_latency);
  }

  void sync() override {
    std::uint64_t pages = 0;
    {
      std::lock_guard g(owner_.mu_);
      File& f = *file_;
      pages = f.dirty.size();
      if (owner_.config_.store_data) {
        const std::size_t ps = owner_.config_.page_size;
        if (f.durable.size() < f.data.size()) f.durable.resize(f.data.size());
        for (const std::uint64_t p : f.dirty) {
          const std::uint64_t lo = p * ps;
          if (lo >= f.data.size()) continue;
          const std::uint64_t hi = std::min<std::uint64_t>(lo + ps, f.data.size());
          std::memcpy(f.durable.data() + lo, f.data.data() + lo, hi - lo);
        }
      }
      f.dirty.clear();
      f.durable_size = f.size;
    }
    owner_.count_sync();
    owner_.charge(owner_.config_.per_sync_latency + owner_.transfer_cost(pages));
  }

  FileInfo info() const override {
    std::lock_guard g(owner_.mu_);
    return FileInfo{kSimDevice, file_->ino, file_->size, file_->regular};
  }

  void lock(bool) override {}
  void unlock() override {}

 private:
  SimBackstore& owner_;
  std::shared_ptr<File> file_;
  OpenFlags flags_;
};

SimBackstore::SimBackstore(SimDiskConfig config) : config_(config) {
  if (config_.page_size == 0) throw std::invalid_argument("backstore: page size must be positive");
  if (config_.throughput < 0 || config_.per_op_latency.count() < 0 || config_.per_sync_latency.count() < 0) {
    throw std::invalid_argument("backstore: disk costs must be non-negative");
  }
}

SimBackstore::SimBackstore(SimDiskConfig config, const DiskSnapshot& restore) : SimBackstore(config) {
  for (const auto& [path, img] : restore) {
    auto f = std::make_shared<File>();
    f->ino = img.ino;
    f->regular = img.regular;
    f->size = f->durable_size = img.size;
    if (config_.store_data) f->data = f->durable = img.data;
    next_ino_ = std::max(next_ino_, img.ino + 1);
    files_.emplace(path, std::move(f));
  }
}

SimBackstore::~SimBackstore() = default;

std::shared_ptr<SimBackstore::File> SimBackstore::find(std::string_view path) const {
  const auto it = files_.find(path);
  return it == files_.end() ? nullptr : it->second;
}

std::unique_ptr<BackingFile> SimBackstore::open(std::string_view path, const OpenFlags& flags) {
  std::lock_guard g(mu_);
  auto f = find(path);
  if (!f) {
    if (!flags.create) throw_errno(ENOENT, "open " + std::string(path));
    f = std::make_shared<File>();
    f->ino = next_ino_++;
    files_.emplace(std::string(path), f);
  }
  if (flags.truncate && flags.write && f->regular) {
    f->size = 0;
    f->data.clear();
    f->dirty.clear();
    f->cached.clear();
    // truncation is a metadata operation; treat it as immediately durable
    f->durable_size = 0;
    f->durable.clear();
  }
  return std::make_unique<Handle>(*this, std::move(f), flags);
}

std::optional<FileInfo> SimBackstore::stat(std::string_view path) const {
  std::lock_guard g(mu_);
  const auto f = find(path);
  if (!f) return std::nullopt;
  return FileInfo{kSimDevice, f->ino, f->size, f->regular};
}

void SimBackstore::create_special(std::string_view path) {
  std::lock_guard g(mu_);
  auto f = std::make_shared<File>();
  f->ino = next_ino_++;
  f->regular = false;
  files_[std::string(path)] = std::move(f);
}

std::optional<std::vector<std::byte>> SimBackstore::contents(std::string_view path) const {
  std::lock_guard g(mu_);
  const auto f = find(path);
  if (!f) return std::nullopt;
  std::vector<std::byte> out(f->size);
  if (config_.store_data) std::copy_n(f->data.begin(), std::min<std::size_t>(f->data.size(), out.size()), out.begin());
  return out;
}

void SimBackstore::put(std::string_view path, std::span<const std::byte> bytes) {
  std::lock_guard g(mu_);
  auto f = find(path);
  if (!f) {
    f = std::make_shared<File>();
    f->ino = next_ino_++;
    files_.emplace(std::string(path), f);
  }
  f->size = f->durable_size = bytes.size();
  if (config_.store_data) {
    f->data.assign(bytes.begin(), bytes.end());
    f->durable = f->data;
  }
  f->dirty.clear();
  f->cached.clear();
}

void SimBackstore::remove(std::string_view path) {
  std::lock_guard g(mu_);
  const auto it = files_.find(path);
  if (it != files_.end()) files_.erase(it);
}

std::vector<std::string> SimBackstore::paths() const {
  std::lock_guard g(mu_);
  std::vector<std::string> out;
  for (const auto& [p, f] : files_) out.push_back(p);
  return out;
}

DiskSnapshot SimBackstore::crash(DiskCrash policy) const {
  std::lock_guard g(mu_);
  DiskSnapshot out;
  for (const auto& [path, f] : files_) {
    SimFileImage img;
    img.ino = f->ino;
    img.regular = f->regular;
    if (policy == DiskCrash::keep_all) {
      img.size = f->size;
      img.data = f->data;
    } else {
      img.size = f->durable_size;
      img.data = f->durable;
    }
    if (config_.store_data) img.data.resize(img.size);
    out.emplace(path, std::move(img));
  }
  return out;
}

void SimBackstore::inject_write_faults(std::int64_t count) {
  std::lock_guard g(mu_);
  write_faults_ = count;
}

std::chrono::nanoseconds SimBackstore::transfer_cost(std::uint64_t pages) const {
  if (config_.throughput <= 0 || pages == 0) return std::chrono::nanoseconds{0};
  const double seconds = static_cast<double>(pages * config_.page_size) / config_.throughput;
  return std::chrono::nanoseconds{static_cast<std::int64_t>(seconds * 1e9 + 0.5)};
}

void SimBackstore::charge(std::chrono::nanoseconds cost) {
  if (cost.count() <= 0) return;
  busy_ns_.fetch_add(cost.count(), std::memory_order_relaxed);
  if (config_.time == TimeMode::virtual_time) {
    pending_virtual_ns_.fetch_add(cost.count(), std::memory_order_relaxed);
    return;
  }
  // One device: requests are served back to back. A schedule that fell a
  // little behind (oversleeping) is kept so sleep overshoot does not add up.
  std::lock_guard g(device_mu_);
  const auto now = std::chrono::steady_clock::now();
  if (busy_until_ + std::chrono::milliseconds(2) < now) busy_until_ = now;
  busy_until_ += cost;
  if (busy_until_ > now) std::this_thread::sleep_until(busy_until_);
}

std::chrono::nanoseconds SimBackstore::take_virtual_cost() {
  return std::chrono::nanoseconds{pending_virtual_ns_.exchange(0, std::memory_order_relaxed)};
}

std::chrono::nanoseconds SimBackstore::busy_time() const {
  return std::chrono::nanoseconds{busy_ns_.load(std::memory_order_relaxed)};
}

}  // namespace nvcache::backstore
