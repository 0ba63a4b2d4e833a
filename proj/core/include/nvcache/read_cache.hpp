#pragma once

// Volatile read cache: page descriptors in a lock-free radix tree, page
// contents recycled through a second-chance LRU approximation, and the
// miss paths that rebuild a page from the backing store plus pending log
// entries.
//
// Page states:
//
//                      content present     content absent
//   dirty_counter > 0  loaded              unloaded-dirty
//   dirty_counter <= 0 loaded              unloaded-clean
//
// Lock order: atomic_lock (ascending page order) -> cleanup_lock -> lru_lock.
// Eviction runs with lru_lock held and needs the victim's atomic lock, which
// is the reverse direction, so it only ever try-locks the victim and moves on
// when that fails.

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace nvcache::wlog {
class WriteLog;
}

namespace nvcache::rcache {

enum class PageState : std::uint8_t { loaded, unloaded_clean, unloaded_dirty };
const char* to_string(PageState s);

// -- lock instrumentation ----------------------------------------------------

enum class Role : std::uint8_t { none = 0, writer, reader, cleaner };
inline constexpr std::size_t kRoles = 4;

enum class LockKind : std::uint8_t { atomic = 0, cleanup = 1 };

Role current_role() noexcept;

/// Tags the calling thread for lock-contention accounting while in scope.
class ScopedRole {
 public:
  explicit ScopedRole(Role role) noexcept;
  ~ScopedRole();
  ScopedRole(const ScopedRole&) = delete;
  ScopedRole& operator=(const ScopedRole&) = delete;

 private:
  Role previous_;
};

/// Global count of lock acquisitions that had to wait, by lock kind, waiting
/// role and the role of the holder observed at the time.
struct LockStats {
  std::uint64_t waits[2][kRoles][kRoles] = {};
  std::uint64_t acquisitions[2][kRoles] = {};

  std::uint64_t waited_on(LockKind kind, Role waiter, Role holder) const {
    return waits[static_cast<int>(kind)][static_cast<int>(waiter)][static_cast<int>(holder)];
  }
};
LockStats lock_stats();
void reset_lock_stats();

/// Mutex that remembers its holder's thread and role.
class PageLock {
 public:
  explicit PageLock(LockKind kind) noexcept : kind_(kind) {}
  void lock();
  bool try_lock();
  void unlock();
  bool held_by_me() const noexcept;
  Role holder_role() const noexcept { return holder_role_.load(std::memory_order_relaxed); }

 private:
  std::mutex m_;
  std::atomic<std::uint32_t> holder_{0};
  std::atomic<Role> holder_role_{Role::none};
  LockKind kind_;
};

// -- descriptors and contents ------------------------------------------------

struct PageDescriptor;

struct PageContent {
  explicit PageContent(std::size_t page_size) : data(new std::byte[page_size]()) {}
  std::unique_ptr<std::byte[]> data;
  PageDescriptor* back = nullptr;
  // intrusive LRU queue links, guarded by the lru lock
  PageContent* prev = nullptr;
  PageContent* next = nullptr;
  bool queued = false;
};

struct PageDescriptor {
  explicit PageDescriptor(std::uint64_t page) noexcept : page_no(page) {}

  PageLock atomic_lock{LockKind::atomic};
  PageLock cleanup_lock{LockKind::cleanup};
  std::atomic<std::int64_t> dirty_counter{0};
  std::atomic<bool> accessed{false};
  std::atomic<PageContent*> content{nullptr};
  const std::uint64_t page_no;

  PageState state() const noexcept;
};

/// Records every page state transition. Debug/test aid; not thread-exact
/// under concurrent writers and cleaner.
class TransitionRecorder {
 public:
  struct Transition {
    std::uint64_t page;
    PageState from;
    PageState to;
  };
  void record(std::uint64_t page, PageState from, PageState to);
  std::vector<Transition> snapshot() const;
  void clear();
  /// The arcs a page may take; self-loops are not recorded.
  static bool allowed(PageState from, PageState to);

 private:
  mutable std::mutex mu_;
  std::vector<Transition> log_;
};

/// Page-number keyed tree; fanout 512, seven levels, nodes only ever added.
class RadixTree {
 public:
  static constexpr unsigned kBits = 9;
  static constexpr std::size_t kFanout = std::size_t{1} << kBits;
  static constexpr unsigned kDepth = 7;
  static constexpr std::uint64_t kMaxPage = (std::uint64_t{1} << (kBits * kDepth)) - 1;

  RadixTree() = default;
  ~RadixTree();
  RadixTree(const RadixTree&) = delete;
  RadixTree& operator=(const RadixTree&) = delete;

  PageDescriptor& get_or_create(std::uint64_t page_no);
  PageDescriptor* find(std::uint64_t page_no) const noexcept;
  void for_each(const std::function<void(PageDescriptor&)>& fn) const;
  std::size_t size() const noexcept { return count_.load(std::memory_order_relaxed); }
  std::size_t nodes() const noexcept { return nodes_.load(std::memory_order_relaxed); }

 private:
  struct Node {
    std::array<std::atomic<void*>, kFanout> slots{};
  };
  static void free_node(Node* node, unsigned level);
  static void visit(const Node* node, unsigned level, const std::function<void(PageDescriptor&)>& fn);

  std::atomic<Node*> root_{nullptr};
  std::atomic<std::size_t> count_{0};
  std::atomic<std::size_t> nodes_{0};
};

/// Second-chance queue of page contents, bounded by `capacity`.
class LruQueue {
 public:
  LruQueue(std::size_t capacity, std::size_t page_size);
  ~LruQueue();
  LruQueue(const LruQueue&) = delete;
  LruQueue& operator=(const LruQueue&) = delete;

  /// A content not attached to any descriptor: fresh, from the free pool, or
  /// recycled by eviction. nullptr when every queued page is pinned by
  /// its atomic lock; the caller then reads through a scratch page.
  PageContent* acquire(class ReadCache& cache);
  /// Evicts one page (second chance). nullptr when nothing is evictable.
  PageContent* evict_one(class ReadCache& cache);
  void enqueue(PageContent* content);
  /// Detaches `content` from the queue and returns it to the free pool.
  void release(PageContent* content);
  /// Releases every content held by descriptors of `tree`.
  void release_tree(const RadixTree& tree);

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t page_size() const noexcept { return page_size_; }
  std::size_t loaded() const;
  std::size_t queued() const;
  std::uint64_t evictions() const noexcept { return evictions_.load(std::memory_order_relaxed); }
  /// Checks queue links and back references; test aid.
  bool consistent() const;

 private:
  void unlink(PageContent* c);
  void push_back(PageContent* c);

  const std::size_t capacity_;
  const std::size_t page_size_;
  mutable std::mutex lru_lock_;
  PageContent* head_ = nullptr;
  PageContent* tail_ = nullptr;
  std::size_t queued_ = 0;
  std::size_t allocated_ = 0;
  std::vector<PageContent*> free_;
  std::vector<std::unique_ptr<PageContent>> owned_;
  std::atomic<std::uint64_t> evictions_{0};
};

/// What the miss paths need from the file owning a page.
class PageSource {
 public:
  virtual ~PageSource() = default;
  /// Fills `out` with the backing bytes of `page_no`, zero beyond EOF.
  virtual void read_backing_page(std::uint64_t page_no, std::span<std::byte> out) = 0;
  /// True when log entries tagged with `file_id` belong to this file.
  virtual bool owns(std::uint64_t file_id) const = 0;
};

class ReadCache {
 public:
  ReadCache(std::size_t capacity, std::size_t page_size) : lru(capacity, page_size) {}

  LruQueue lru;
  TransitionRecorder* recorder = nullptr;

  std::size_t page_size() const noexcept { return lru.page_size(); }
  void note(std::uint64_t page, PageState from, PageState to) {
    if (recorder != nullptr && from != to) recorder->record(page, from, to);
  }
};

// -- miss paths and write-through ---------------------------------------------

/// unloaded-clean -> loaded. Caller holds desc.atomic_lock; dirty_counter is
/// not positive, so no propagation of this page can be in flight.
void load_clean(ReadCache& cache, PageDescriptor& desc, PageContent& content, PageSource& source);

/// unloaded-dirty -> loaded: backing page plus every pending committed entry
/// for the page, in log order. Caller holds both page locks. Throws
/// InvariantViolation if fewer than dirty_counter entries are found.
void dirty_miss(ReadCache& cache, PageDescriptor& desc, PageContent& content, PageSource& source,
                const wlog::WriteLog& log);

/// Rebuilds the page into `out` without touching the descriptor's state.
/// Used by both miss paths and by readers that could not get a content.
void reconstruct(ReadCache& cache, const PageDescriptor& desc, std::span<std::byte> out, PageSource& source,
                 const wlog::WriteLog& log);

/// Updates the cached bytes if the page is loaded. Caller holds the atomic lock.
void apply_write_to_loaded(PageDescriptor& desc, std::size_t in_page_offset, std::span<const std::byte> bytes);

/// Attaches `content` to `desc` and queues it (the final step of both misses).
void attach(ReadCache& cache, PageDescriptor& desc, PageContent& content);

}  // namespace nvcache::rcache
