#include "nvcache/pmem.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <system_error>

#include <fcntl.h>
#include <sys/mman.h>
#include <unistd.h>

#if defined(__x86_64__)
#include <cpuid.h>
#include <immintrin.h>
#endif

#ifndef MAP_SYNC
#define MAP_SYNC 0x80000
#endif
#ifndef MAP_SHARED_VALIDATE
#define MAP_SHARED_VALIDATE 0x03
#endif

namespace nvcache::pmem {

std::uint32_t this_thread_token() noexcept {
  static std::atomic<std::uint32_t> next{1};
  thread_local const std::uint32_t token = next.fetch_add(1, std::memory_order_relaxed);
  return token;
}

std::vector<std::uint64_t> enumerate_crash_points(std::span<const Event> trace) {
  std::vector<std::uint64_t> points;
  points.reserve(trace.size() + 1);
  points.push_back(0);
  for (const Event& e : trace) points.push_back(e.ordinal);
  return points;
}

// ---------------------------------------------------------------------------
// Region

Region::Region(std::size_t size, std::size_t line_size) : size_(size), line_size_(line_size) {
  if (line_size == 0 || (line_size & (line_size - 1)) != 0 || line_size < 8) {
    throw std::invalid_argument("pmem: line size must be a power of two >= 8");
  }
  if (size == 0 || size % line_size != 0) {
    throw std::invalid_argument("pmem: region size must be a non-zero multiple of the line size");
  }
}

void Region::check_range(std::size_t offset, std::size_t length) const {
  if (offset > size_ || length > size_ - offset) {
    throw std::out_of_range("pmem: access [" + std::to_string(offset) + ", +" + std::to_string(length) +
                            ") outside region of " + std::to_string(size_) + " bytes");
  }
}

void Region::check_word(std::size_t offset) const {
  check_range(offset, sizeof(std::uint64_t));
  if (offset % alignof(std::uint64_t) != 0) throw std::invalid_argument("pmem: unaligned word access");
}

void Region::pwb_range(std::size_t offset, std::size_t length) {
  if (length == 0) return;
  check_range(offset, length);
  const std::size_t first = offset / line_size_;
  const std::size_t last = (offset + length - 1) / line_size_;
  for (std::size_t line = first; line <= last; ++line) pwb(line * line_size_);
}

// ---------------------------------------------------------------------------
// MappedRegion

namespace {

struct FlushSupport {
  bool clwb = false;
  bool clflushopt = false;
};

FlushSupport detect_flush_support() {
  FlushSupport s;
#if defined(__x86_64__)
  unsigned eax = 0, ebx = 0, ecx = 0, edx = 0;
  if (__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) {
    s.clflushopt = (ebx >> 23) & 1U;
    s.clwb = (ebx >> 24) & 1U;
  }
#endif
  return s;
}

const FlushSupport& flush_support() {
  static const FlushSupport s = detect_flush_support();
  return s;
}

#if defined(__x86_64__)
__attribute__((target("clwb"))) void flush_clwb(void* p) { _mm_clwb(p); }
__attribute__((target("clflushopt"))) void flush_clflushopt(void* p) { _mm_clflushopt(p); }
#endif

void flush_line(void* p) {
#if defined(__x86_64__)
  const auto& s = flush_support();
  if (s.clwb) {
    flush_clwb(p);
  } else if (s.clflushopt) {
    flush_clflushopt(p);
  } else {
    _mm_clflush(p);
  }
#else
  (void)p;
#endif
}

void store_fence() {
#if defined(__x86_64__)
  _mm_sfence();
#else
  std::atomic_thread_fence(std::memory_order_seq_cst);
#endif
}

// Pages queued by pwb in msync mode, per thread.
thread_local std::vector<std::uintptr_t> t_msync_pages;

std::size_t os_page_size() {
  static const std::size_t ps = static_cast<std::size_t>(::sysconf(_SC_PAGESIZE));
  return ps;
}

}  // namespace

MappedRegion::MappedRegion(std::byte* base, std::size_t size, std::size_t line_size, FlushMode mode, int fd)
    : Region(size, line_size), base_(base), mode_(mode), fd_(fd) {}

MappedRegion::~MappedRegion() {
  ::munmap(base_, size());
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<MappedRegion> MappedRegion::anonymous(std::size_t size, FlushMode mode, std::size_t line_size) {
  if (mode == FlushMode::automatic || mode == FlushMode::msync) mode = FlushMode::cache_line;
  void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) throw std::system_error(errno, std::generic_category(), "pmem: anonymous mmap");
  return std::unique_ptr<MappedRegion>(new MappedRegion(static_cast<std::byte*>(p), size, line_size, mode, -1));
}

std::unique_ptr<MappedRegion> MappedRegion::open_file(const std::filesystem::path& path, std::size_t size,
                                                      FlushMode mode, std::size_t line_size) {
  const int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "pmem: open " + path.string());
  const off_t current = ::lseek(fd, 0, SEEK_END);
  if (current < 0 || static_cast<std::size_t>(current) < size) {
    if (::ftruncate(fd, static_cast<off_t>(size)) != 0) {
      const int err = errno;
      ::close(fd);
      throw std::system_error(err, std::generic_category(), "pmem: size " + path.string());
    }
  }
  void* p = MAP_FAILED;
  if (mode == FlushMode::automatic || mode == FlushMode::cache_line) {
    p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED_VALIDATE | MAP_SYNC, fd, 0);
    if (p != MAP_FAILED) mode = FlushMode::cache_line;
  }
  if (p == MAP_FAILED) {
    p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (mode == FlushMode::automatic) mode = FlushMode::msync;
  }
  if (p == MAP_FAILED) {
    const int err = errno;
    ::close(fd);
    throw std::system_error(err, std::generic_category(), "pmem: mmap " + path.string());
  }
  return std::unique_ptr<MappedRegion>(new MappedRegion(static_cast<std::byte*>(p), size, line_size, mode, fd));
}

void MappedRegion::store(std::size_t offset, std::span<const std::byte> bytes) {
  check_range(offset, bytes.size());
  std::memcpy(base_ + offset, bytes.data(), bytes.size());
}

void MappedRegion::load(std::size_t offset, std::span<std::byte> out) const {
  check_range(offset, out.size());
  std::memcpy(out.data(), base_ + offset, out.size());
}

void MappedRegion::store_word(std::size_t offset, std::uint64_t value) {
  check_word(offset);
  std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_ + offset))
      .store(value, std::memory_order_release);
}

std::uint64_t MappedRegion::load_word(std::size_t offset) const {
  check_word(offset);
  return std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_ + offset))
      .load(std::memory_order_acquire);
}

void MappedRegion::pwb(std::size_t offset) {
  check_range(offset, 1);
  switch (mode_) {
    case FlushMode::cache_line:
      flush_line(base_ + offset - offset % line_size());
      break;
    case FlushMode::msync: {
      const auto addr = reinterpret_cast<std::uintptr_t>(base_ + offset);
      t_msync_pages.push_back(addr - addr % os_page_size());
      break;
    }
    default:
      break;
  }
}

void MappedRegion::pfence() { store_fence(); }

void MappedRegion::psync() {
  store_fence();
  if (mode_ != FlushMode::msync || t_msync_pages.empty()) return;
  auto& pages = t_msync_pages;
  std::sort(pages.begin(), pages.end());
  pages.erase(std::unique(pages.begin(), pages.end()), pages.end());
  for (std::uintptr_t page : pages) {
    if (::msync(reinterpret_cast<void*>(page), os_page_size(), MS_SYNC) != 0) {
      pages.clear();
      throw std::system_error(errno, std::generic_category(), "pmem: msync");
    }
  }
  pages.clear();
}

// ---------------------------------------------------------------------------
// SimulatedRegion

SimulatedRegion::SimulatedRegion(std::size_t size, std::size_t line_size)
    : Region(size, line_size), volatile_(size), persisted_(size) {}

SimulatedRegion::SimulatedRegion(Image image, std::size_t line_size)
    : Region(image.size(), line_size), volatile_(image), persisted_(std::move(image)) {}

SimulatedRegion::ThreadState& SimulatedRegion::self() { return threads_[this_thread_token()]; }

void SimulatedRegion::emit(EventKind kind, std::size_t line) {
  Event e{++events_, kind, this_thread_token(), line};
  if (tracing_) trace_.push_back(e);
  if (hook_) hook_(e);
}

void SimulatedRegion::record_store(std::size_t offset, std::size_t length) {
  const std::size_t ls = line_size();
  const std::size_t first = offset / ls;
  const std::size_t last = (offset + length - 1) / ls;
  ThreadState& ts = self();
  for (std::size_t line = first; line <= last; ++line) {
    const auto begin = volatile_.begin() + static_cast<std::ptrdiff_t>(line * ls);
    pending_[line].push_back(
        Version{next_seq_++, this_thread_token(), ts.epoch, std::vector<std::byte>(begin, begin + ls)});
  }
}

void SimulatedRegion::store(std::size_t offset, std::span<const std::byte> bytes) {
  std::lock_guard lk(mu_);
  check_range(offset, bytes.size());
  if (bytes.empty()) return;
  std::memcpy(volatile_.data() + offset, bytes.data(), bytes.size());
  record_store(offset, bytes.size());
  emit(EventKind::store, offset / line_size());
}

void SimulatedRegion::load(std::size_t offset, std::span<std::byte> out) const {
  std::lock_guard lk(mu_);
  check_range(offset, out.size());
  std::memcpy(out.data(), volatile_.data() + offset, out.size());
}

void SimulatedRegion::store_word(std::size_t offset, std::uint64_t value) {
  std::lock_guard lk(mu_);
  check_word(offset);
  std::memcpy(volatile_.data() + offset, &value, sizeof value);
  record_store(offset, sizeof value);
  emit(EventKind::store, offset / line_size());
}

std::uint64_t SimulatedRegion::load_word(std::size_t offset) const {
  std::lock_guard lk(mu_);
  check_word(offset);
  std::uint64_t v;
  std::memcpy(&v, volatile_.data() + offset, sizeof v);
  return v;
}

void SimulatedRegion::pwb(std::size_t offset) {
  std::lock_guard lk(mu_);
  check_range(offset, 1);
  const std::size_t line = offset / line_size();
  if (auto it = pending_.find(line); it != pending_.end()) {
    ThreadState& ts = self();
    const std::uint64_t seq = it->second.back().seq;
    const bool already = std::any_of(ts.queued.begin(), ts.queued.end(),
                                     [&](const Queued& q) { return q.line == line && q.seq == seq; });
    if (!already) ts.queued.push_back(Queued{line, seq, ts.epoch});
  }
  emit(EventKind::pwb, line);
}

void SimulatedRegion::pfence() {
  std::lock_guard lk(mu_);
  ++self().epoch;
  emit(EventKind::pfence, 0);
}

void SimulatedRegion::persist_line(std::size_t line, std::uint64_t seq) {
  auto it = pending_.find(line);
  if (it == pending_.end()) return;
  auto& versions = it->second;
  auto v = std::find_if(versions.begin(), versions.end(), [&](const Version& x) { return x.seq == seq; });
  if (v == versions.end()) return;  // already persisted through a newer version
  std::memcpy(persisted_.data() + line * line_size(), v->data.data(), line_size());
  versions.erase(versions.begin(), v + 1);
  if (versions.empty()) pending_.erase(it);
}

void SimulatedRegion::psync() {
  std::lock_guard lk(mu_);
  ThreadState& ts = self();
  for (const Queued& q : ts.queued) persist_line(q.line, q.seq);
  ts.queued.clear();
  ++ts.epoch;
  emit(EventKind::psync, 0);
}

Image SimulatedRegion::crash(const CrashSchedule& schedule) const {
  std::lock_guard lk(mu_);
  switch (schedule.policy) {
    case CrashPolicy::persist_all:
      return volatile_;
    case CrashPolicy::drop_all_unflushed:
      return persisted_;
    case CrashPolicy::adversarial_subset:
      break;
  }

  // choice[line]: 0 keeps the persisted bytes, j > 0 takes pending version j-1.
  std::mt19937_64 rng(schedule.seed ^ (schedule.crash_point * 0x9E3779B97F4A7C15ULL));
  std::map<std::size_t, std::size_t> choice;
  for (const auto& [line, versions] : pending_) {
    choice[line] = std::uniform_int_distribution<std::size_t>(0, versions.size())(rng);
  }

  // Raise lines until every chosen version has its pre-fence dependencies.
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& [line, c] : choice) {
      if (c == 0) continue;
      const Version& v = pending_.at(line)[c - 1];
      const auto ts = threads_.find(v.thread);
      if (ts == threads_.end()) continue;
      for (const Queued& q : ts->second.queued) {
        if (q.epoch >= v.epoch) continue;
        const auto dep = pending_.find(q.line);
        if (dep == pending_.end()) continue;
        const auto& dv = dep->second;
        const auto pos = std::find_if(dv.begin(), dv.end(), [&](const Version& x) { return x.seq == q.seq; });
        if (pos == dv.end()) continue;
        const std::size_t need = static_cast<std::size_t>(pos - dv.begin()) + 1;
        if (choice[q.line] < need) {
          choice[q.line] = need;
          changed = true;
        }
      }
    }
  }

  Image img = persisted_;
  for (const auto& [line, c] : choice) {
    if (c == 0) continue;
    const auto& data = pending_.at(line)[c - 1].data;
    std::memcpy(img.data() + line * line_size(), data.data(), line_size());
  }
  return img;
}

Image SimulatedRegion::volatile_image() const {
  std::lock_guard lk(mu_);
  return volatile_;
}

Image SimulatedRegion::persisted_image() const {
  std::lock_guard lk(mu_);
  return persisted_;
}

std::uint64_t SimulatedRegion::event_count() const {
  std::lock_guard lk(mu_);
  return events_;
}

void SimulatedRegion::set_event_hook(EventHook hook) {
  std::lock_guard lk(mu_);
  hook_ = std::move(hook);
}

void SimulatedRegion::set_trace_enabled(bool enabled) {
  std::lock_guard lk(mu_);
  tracing_ = enabled;
  if (!enabled) trace_.clear();
}

std::vector<Event> SimulatedRegion::trace() const {
  std::lock_guard lk(mu_);
  return trace_;
}

std::size_t SimulatedRegion::dirty_lines() const {
  std::lock_guard lk(mu_);
  return pending_.size();
}

std::size_t SimulatedRegion::queued_lines() const {
  std::lock_guard lk(mu_);
  const auto it = threads_.find(this_thread_token());
  return it == threads_.end() ? 0 : it->second.queued.size();
}

}  // namespace nvcache::pmem
