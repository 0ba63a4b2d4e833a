#pragma once

// Persistence-domain abstraction.
//
// A Region is a byte-addressable range with the three ordering primitives a
// persistent-memory program needs:
//
//   pwb(addr)  queue the cache line holding addr for write-back
//   pfence()   order: lines queued before the fence reach the persistence
//              domain before any later store of the same thread does
//   psync()    pfence + wait until every queued line is drained
//
// MappedRegion runs against real memory (anonymous or a mapped file).
// SimulatedRegion keeps a volatile and a persisted image per byte and can
// produce the image a crash would leave behind, which is what the recovery
// tests are built on.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <vector>

namespace nvcache::pmem {

inline constexpr std::size_t kDefaultLineSize = 64;

using Image = std::vector<std::byte>;

enum class CrashPolicy {
  drop_all_unflushed,  // only drained lines survive
  adversarial_subset,  // seeded subset of un-drained lines, fence order respected
  persist_all,         // every store survives
};

struct CrashSchedule {
  std::uint64_t seed = 0;
  CrashPolicy policy = CrashPolicy::drop_all_unflushed;
  std::uint64_t crash_point = 0;
};

enum class EventKind : std::uint8_t { store, pwb, pfence, psync };

/// One persistence-visible event. A crash at ordinal k observes the effects
/// of events 1..k.
struct Event {
  std::uint64_t ordinal = 0;
  EventKind kind = EventKind::store;
  std::uint32_t thread = 0;
  std::size_t line = 0;
};

/// Crash-injection points for a recorded trace: 0 (before anything) followed by
/// the ordinal of every event.
std::vector<std::uint64_t> enumerate_crash_points(std::span<const Event> trace);

class Region {
 public:
  Region(const Region&) = delete;
  Region& operator=(const Region&) = delete;
  virtual ~Region() = default;

  std::size_t size() const noexcept { return size_; }
  std::size_t line_size() const noexcept { return line_size_; }

  virtual void store(std::size_t offset, std::span<const std::byte> bytes) = 0;
  virtual void load(std::size_t offset, std::span<std::byte> out) const = 0;

  // 8-byte aligned words with release/acquire semantics; used for fields that
  // other threads poll (commit words, tails).
  virtual void store_word(std::size_t offset, std::uint64_t value) = 0;
  virtual std::uint64_t load_word(std::size_t offset) const = 0;

  virtual void pwb(std::size_t offset) = 0;
  virtual void pfence() = 0;
  virtual void psync() = 0;

  /// Queues every line overlapping [offset, offset + length).
  void pwb_range(std::size_t offset, std::size_t length);

 protected:
  Region(std::size_t size, std::size_t line_size);
  void check_range(std::size_t offset, std::size_t length) const;
  void check_word(std::size_t offset) const;

 private:
  std::size_t size_;
  std::size_t line_size_;
};

enum class FlushMode {
  automatic,   // cache-line flushes when the mapping is synchronous, msync otherwise
  cache_line,  // clwb / clflushopt / clflush + sfence
  msync,       // file-range synchronization of queued pages
  none,        // fences only; unconstrained memory for benchmarks
};

class MappedRegion final : public Region {
 public:
  /// Private anonymous memory. Nothing survives the process.
  static std::unique_ptr<MappedRegion> anonymous(std::size_t size, FlushMode mode = FlushMode::none,
                                                 std::size_t line_size = kDefaultLineSize);

  /// Maps `path` (a DAX file or device, or any regular file), creating and
  /// sizing it when needed.
  static std::unique_ptr<MappedRegion> open_file(const std::filesystem::path& path, std::size_t size,
                                                 FlushMode mode = FlushMode::automatic,
                                                 std::size_t line_size = kDefaultLineSize);

  ~MappedRegion() override;

  void store(std::size_t offset, std::span<const std::byte> bytes) override;
  void load(std::size_t offset, std::span<std::byte> out) const override;
  void store_word(std::size_t offset, std::uint64_t value) override;
  std::uint64_t load_word(std::size_t offset) const override;
  void pwb(std::size_t offset) override;
  void pfence() override;
  void psync() override;

  FlushMode flush_mode() const noexcept { return mode_; }
  std::span<const std::byte> bytes() const noexcept { return {base_, size()}; }
  Image snapshot() const { return Image(base_, base_ + size()); }

 private:
  MappedRegion(std::byte* base, std::size_t size, std::size_t line_size, FlushMode mode, int fd);

  std::byte* base_;
  FlushMode mode_;
  int fd_;
};

/// Crash-simulating region.
///
/// Every store creates a new version of each touched line. A version becomes
/// part of the persisted image once the storing thread has pwb'd it and
/// issued psync. Any later version may or may not survive a crash; the only
/// constraint is per-thread fence order: if a version stored by thread T in
/// fence epoch e survives, every line T queued in an epoch before e survives
/// at least at its queued version. Lines persist atomically.
///
/// All operations serialize on one recursive mutex; the event hook runs under
/// it, so a hook may call crash() to capture an image at that exact point.
class SimulatedRegion final : public Region {
 public:
  using EventHook = std::function<void(const Event&)>;

  explicit SimulatedRegion(std::size_t size, std::size_t line_size = kDefaultLineSize);
  /// Restart from a crash image: both images start equal to `image`.
  explicit SimulatedRegion(Image image, std::size_t line_size = kDefaultLineSize);

  void store(std::size_t offset, std::span<const std::byte> bytes) override;
  void load(std::size_t offset, std::span<std::byte> out) const override;
  void store_word(std::size_t offset, std::uint64_t value) override;
  std::uint64_t load_word(std::size_t offset) const override;
  void pwb(std::size_t offset) override;
  void pfence() override;
  void psync() override;

  /// Image a restart would observe if power failed now.
  Image crash(const CrashSchedule& schedule) const;

  Image volatile_image() const;
  Image persisted_image() const;

  std::uint64_t event_count() const;
  void set_event_hook(EventHook hook);
  void set_trace_enabled(bool enabled);
  std::vector<Event> trace() const;

  /// Lines with at least one version newer than the persisted image.
  std::size_t dirty_lines() const;
  /// Lines the calling thread has queued but not yet drained.
  std::size_t queued_lines() const;

 private:
  struct Version {
    std::uint64_t seq;
    std::uint32_t thread;
    std::uint64_t epoch;
    std::vector<std::byte> data;
  };
  struct Queued {
    std::size_t line;
    std::uint64_t seq;
    std::uint64_t epoch;
  };
  struct ThreadState {
    std::uint64_t epoch = 0;
    std::vector<Queued> queued;
  };

  void record_store(std::size_t offset, std::size_t length);
  void persist_line(std::size_t line, std::uint64_t seq);
  void emit(EventKind kind, std::size_t line);
  ThreadState& self();

  mutable std::recursive_mutex mu_;
  Image volatile_;
  Image persisted_;
  std::map<std::size_t, std::vector<Version>> pending_;  // ordered for replayable crashes
  std::unordered_map<std::uint32_t, ThreadState> threads_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t events_ = 0;
  bool tracing_ = false;
  std::vector<Event> trace_;
  EventHook hook_;
};

/// Small per-thread integer identity shared by the simulator and lock
/// instrumentation. Never 0.
std::uint32_t this_thread_token() noexcept;

}  // namespace nvcache::pmem
