#include "nvcache/read_cache.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <string>

#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/write_log.hpp"

namespace nvcache::rcache {
namespace {

thread_local Role t_role = Role::none;

struct AtomicStats {
  std::atomic<std::uint64_t> waits[2][kRoles][kRoles] = {};
  std::atomic<std::uint64_t> acquisitions[2][kRoles] = {};
};
AtomicStats g_stats;

}  // namespace

const char* to_string(PageState s) {
  switch (s) {
    case PageState::loaded:
      return "loaded";
    case PageState::unloaded_clean:
      return "unloaded-clean";
    case PageState::unloaded_dirty:
      return "unloaded-dirty";
  }
  return "?";
}

Role current_role() noexcept { return t_role; }

ScopedRole::ScopedRole(Role role) noexcept : previous_(t_role) { t_role = role; }
ScopedRole::~ScopedRole() { t_role = previous_; }

LockStats lock_stats() {
  LockStats out;
  for (int k = 0; k < 2; ++k) {
    for (std::size_t w = 0; w < kRoles; ++w) {
      out.acquisitions[k][w] = g_stats.acquisitions[k][w].load(std::memory_order_relaxed);
      for (std::size_t h = 0; h < kRoles; ++h) out.waits[k][w][h] = g_stats.waits[k][w][h].load(std::memory_order_relaxed);
    }
  }
  return out;
}

void reset_lock_stats() {
  for (auto& kind : g_stats.waits)
    for (auto& row : kind)
      for (auto& cell : row) cell.store(0, std::memory_order_relaxed);
  for (auto& kind : g_stats.acquisitions)
    for (auto& cell : kind) cell.store(0, std::memory_order_relaxed);
}

void PageLock::lock() {
  const auto k = static_cast<int>(kind_);
  const auto me = static_cast<int>(t_role);
  if (!m_.try_lock()) {
    // Racy by nature: the holder seen here may already be gone. It is the
    // holder at some point while this thread was blocked.
    const auto holder = static_cast<int>(holder_role_.load(std::memory_order_relaxed));
    g_stats.waits[k][me][holder].fetch_add(1, std::memory_order_relaxed);
    m_.lock();
  }
  holder_.store(pmem::this_thread_token(), std::memory_order_relaxed);
  holder_role_.store(t_role, std::memory_order_relaxed);
  g_stats.acquisitions[k][me].fetch_add(1, std::memory_order_relaxed);
}

bool PageLock::try_lock() {
  if (held_by_me()) return false;
  if (!m_.try_lock()) return false;
  holder_.store(pmem::this_thread_token(), std::memory_order_relaxed);
  holder_role_.store(t_role, std::memory_order_relaxed);
  g_stats.acquisitions[static_cast<int>(kind_)][static_cast<int>(t_role)].fetch_add(1, std::memory_order_relaxed);
  return true;
}

void PageLock::unlock() {
  holder_.store(0, std::memory_order_relaxed);
  holder_role_.store(Role::none, std::memory_order_relaxed);
  m_.unlock();
}

bool PageLock::held_by_me() const noexcept {
  return holder_.load(std::memory_order_relaxed) == pmem::this_thread_token();
}

PageState PageDescriptor::state() const noexcept {
  if (content.load(std::memory_order_acquire) != nullptr) return PageState::loaded;
  return dirty_counter.load(std::memory_order_acquire) > 0 ? PageState::unloaded_dirty : PageState::unloaded_clean;
}

// -- transition recorder -------------------------------------------------------

void TransitionRecorder::record(std::uint64_t page, PageState from, PageState to) {
  std::lock_guard g(mu_);
  log_.push_back({page, from, to});
}

std::vector<TransitionRecorder::Transition> TransitionRecorder::snapshot() const {
  std::lock_guard g(mu_);
  return log_;
}

void TransitionRecorder::clear() {
  std::lock_guard g(mu_);
  log_.clear();
}

bool TransitionRecorder::allowed(PageState from, PageState to) {
  using S = PageState;
  if (from == S::loaded) return to == S::unloaded_clean || to == S::unloaded_dirty;
  if (from == S::unloaded_clean) return to == S::loaded || to == S::unloaded_dirty;
  // unloaded-dirty: a dirty miss, or the cleaner propagating the last entry
  return to == S::loaded || to == S::unloaded_clean;
}

// -- radix tree ----------------------------------------------------------------

RadixTree::~RadixTree() {
  if (Node* root = root_.load(std::memory_order_acquire)) free_node(root, 0);
}

void RadixTree::free_node(Node* node, unsigned level) {
  for (auto& slot : node->slots) {
    void* child = slot.load(std::memory_order_relaxed);
    if (child == nullptr) continue;
    if (level + 1 == kDepth) {
      delete static_cast<PageDescriptor*>(child);
    } else {
      free_node(static_cast<Node*>(child), level + 1);
    }
  }
  delete node;
}

PageDescriptor& RadixTree::get_or_create(std::uint64_t page_no) {
  if (page_no > kMaxPage) throw std::out_of_range("rcache: page number beyond radix tree range");
  Node* node = root_.load(std::memory_order_acquire);
  if (node == nullptr) {
    auto* fresh = new Node;
    if (root_.compare_exchange_strong(node, fresh, std::memory_order_acq_rel, std::memory_order_acquire)) {
      node = fresh;
      nodes_.fetch_add(1, std::memory_order_relaxed);
    } else {
      delete fresh;
    }
  }
  for (unsigned level = 0;; ++level) {
    const unsigned shift = kBits * (kDepth - 1 - level);
    auto& slot = node->slots[(page_no >> shift) & (kFanout - 1)];
    void* child = slot.load(std::memory_order_acquire);
    if (level + 1 == kDepth) {
      if (child == nullptr) {
        auto* fresh = new PageDescriptor(page_no);
        if (slot.compare_exchange_strong(child, fresh, std::memory_order_acq_rel, std::memory_order_acquire)) {
          count_.fetch_add(1, std::memory_order_relaxed);
          return *fresh;
        }
        delete fresh;
      }
      return *static_cast<PageDescriptor*>(child);
    }
    if (child == nullptr) {
      auto* fresh = new Node;
      if (slot.compare_exchange_strong(child, fresh, std::memory_order_acq_rel, std::memory_order_acquire)) {
        child = fresh;
        nodes_.fetch_add(1, std::memory_order_relaxed);
      } else {
        delete fresh;
      }
    }
    node = static_cast<Node*>(child);
  }
}

PageDescriptor* RadixTree::find(std::uint64_t page_no) const noexcept {
  if (page_no > kMaxPage) return nullptr;
  const Node* node = root_.load(std::memory_order_acquire);
  for (unsigned level = 0; node != nullptr; ++level) {
    const unsigned shift = kBits * (kDepth - 1 - level);
    void* child = node->slots[(page_no >> shift) & (kFanout - 1)].load(std::memory_order_acquire);
    if (level + 1 == kDepth) return static_cast<PageDescriptor*>(child);
    node = static_cast<const Node*>(child);
  }
  return nullptr;
}

void RadixTree::visit(const Node* node, unsigned level, const std::function<void(PageDescriptor&)>& fn) {
  for (const auto& slot : node->slots) {
    void* child = slot.load(std::memory_order_acquire);
    if (child == nullptr) continue;
    if (level + 1 == kDepth) {
      fn(*static_cast<PageDescriptor*>(child));
    } else {
      visit(static_cast<const Node*>(child), level + 1, fn);
    }
  }
}

void RadixTree::for_each(const std::function<void(PageDescriptor&)>& fn) const {
  if (const Node* root = root_.load(std::memory_order_acquire)) visit(root, 0, fn);
}

// -- LRU -----------------------------------------------------------------------

LruQueue::LruQueue(std::size_t capacity, std::size_t page_size) : capacity_(capacity), page_size_(page_size) {
  if (page_size == 0 || (page_size & (page_size - 1)) != 0) {
    throw std::invalid_argument("rcache: page size must be a power of two");
  }
}

LruQueue::~LruQueue() = default;

void LruQueue::unlink(PageContent* c) {
  if (c->prev != nullptr) c->prev->next = c->next; else head_ = c->next;
  if (c->next != nullptr) c->next->prev = c->prev; else tail_ = c->prev;
  c->prev = c->next = nullptr;
  c->queued = false;
  --queued_;
}

void LruQueue::push_back(PageContent* c) {
  c->prev = tail_;
  c->next = nullptr;
  if (tail_ != nullptr) tail_->next = c; else head_ = c;
  tail_ = c;
  c->queued = true;
  ++queued_;
}

PageContent* LruQueue::evict_one(ReadCache& cache) {
  // Each page is looked at no more than twice: once to clear its accessed
  // flag, once to evict it. Pages whose atomic lock is busy are rotated.
  for (std::size_t budget = 2 * queued_ + 1; budget > 0 && head_ != nullptr; --budget) {
    PageContent* c = head_;
    PageDescriptor* d = c->back;
    unlink(c);
    if (d->accessed.exchange(false, std::memory_order_acq_rel)) {
      push_back(c);
      continue;
    }
    if (!d->atomic_lock.try_lock()) {
      push_back(c);
      continue;
    }
    d->content.store(nullptr, std::memory_order_release);
    cache.note(d->page_no, PageState::loaded, d->state());
    d->atomic_lock.unlock();
    c->back = nullptr;
    evictions_.fetch_add(1, std::memory_order_relaxed);
    return c;
  }
  return nullptr;
}

PageContent* LruQueue::acquire(ReadCache& cache) {
  std::lock_guard g(lru_lock_);
  if (!free_.empty()) {
    PageContent* c = free_.back();
    free_.pop_back();
    return c;
  }
  if (allocated_ < capacity_) {
    owned_.push_back(std::make_unique<PageContent>(page_size_));
    ++allocated_;
    return owned_.back().get();
  }
  return evict_one(cache);
}

void LruQueue::enqueue(PageContent* content) {
  std::lock_guard g(lru_lock_);
  push_back(content);
}

void LruQueue::release(PageContent* content) {
  std::lock_guard g(lru_lock_);
  if (content->queued) unlink(content);
  content->back = nullptr;
  free_.push_back(content);
}

void LruQueue::release_tree(const RadixTree& tree) {
  std::lock_guard g(lru_lock_);
  tree.for_each([&](PageDescriptor& d) {
    PageContent* c = d.content.exchange(nullptr, std::memory_order_acq_rel);
    if (c == nullptr) return;
    if (c->queued) unlink(c);
    c->back = nullptr;
    free_.push_back(c);
  });
}

std::size_t LruQueue::loaded() const {
  std::lock_guard g(lru_lock_);
  return queued_;
}

std::size_t LruQueue::queued() const {
  std::lock_guard g(lru_lock_);
  return queued_;
}

bool LruQueue::consistent() const {
  std::lock_guard g(lru_lock_);
  std::size_t n = 0;
  const PageContent* prev = nullptr;
  for (const PageContent* c = head_; c != nullptr; c = c->next) {
    if (c->prev != prev || !c->queued || c->back == nullptr) return false;
    if (c->back->content.load(std::memory_order_acquire) != c) return false;
    prev = c;
    if (++n > queued_) return false;
  }
  return prev == tail_ && n == queued_ && queued_ <= capacity_;
}

// -- miss paths ------------------------------------------------------------------

void attach(ReadCache& cache, PageDescriptor& desc, PageContent& content) {
  const PageState before = desc.state();
  content.back = &desc;
  desc.accessed.store(false, std::memory_order_relaxed);
  desc.content.store(&content, std::memory_order_release);
  cache.lru.enqueue(&content);
  cache.note(desc.page_no, before, PageState::loaded);
}

void reconstruct(ReadCache& cache, const PageDescriptor& desc, std::span<std::byte> out, PageSource& source,
                 const wlog::WriteLog& log) {
  const std::size_t ps = cache.page_size();
  source.read_backing_page(desc.page_no, out.first(ps));
  std::int64_t want = desc.dirty_counter.load(std::memory_order_acquire);
  if (want <= 0) return;
  const std::uint64_t page_start = desc.page_no * ps;
  const std::uint64_t head = log.head();
  std::int64_t found = 0;
  for (std::uint64_t i = log.propagated(); i < head && found < want; ++i) {
    const auto h = log.live_header(i);
    if (!h || !source.owns(h->file_id)) continue;
    if (h->offset < page_start || h->offset >= page_start + ps) continue;
    if (h->length == 0 || h->offset + h->length > page_start + ps) {
      throw InvariantViolation("rcache: log entry crosses a page boundary");
    }
    log.read_payload(i, out.subspan(h->offset - page_start, h->length));
    ++found;
  }
  if (found < want) {
    throw InvariantViolation("rcache: dirty miss on page " + std::to_string(desc.page_no) + " found " +
                             std::to_string(found) + " of " + std::to_string(want) + " pending entries");
  }
}

void load_clean(ReadCache& cache, PageDescriptor& desc, PageContent& content, PageSource& source) {
  source.read_backing_page(desc.page_no, std::span(content.data.get(), cache.page_size()));
  attach(cache, desc, content);
}

void dirty_miss(ReadCache& cache, PageDescriptor& desc, PageContent& content, PageSource& source,
                const wlog::WriteLog& log) {
  reconstruct(cache, desc, std::span(content.data.get(), cache.page_size()), source, log);
  attach(cache, desc, content);
}

void apply_write_to_loaded(PageDescriptor& desc, std::size_t in_page_offset, std::span<const std::byte> bytes) {
  PageContent* c = desc.content.load(std::memory_order_acquire);
  if (c == nullptr) return;
  std::memcpy(c->data.get() + in_page_offset, bytes.data(), bytes.size());
  desc.accessed.store(true, std::memory_order_relaxed);
}

}  // namespace nvcache::rcache
