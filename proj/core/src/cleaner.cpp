#include "nvcache/cleaner.hpp"

#include <algorithm>
#include <stdexcept>
#include <system_error>
#include <vector>

#include "nvcache/backstore.hpp"
#include "nvcache/errors.hpp"
#include "nvcache/read_cache.hpp"
#include "nvcache/write_log.hpp"

namespace nvcache::cleaner {

void BatchPolicy::validate() const {
  if (min_batch < 1 || min_batch > max_batch) throw std::invalid_argument("cleaner: need 1 <= min_batch <= max_batch");
  if (poll_interval.count() < 0) throw std::invalid_argument("cleaner: negative poll interval");
}

Cleaner::Cleaner(wlog::WriteLog& log, std::size_t page_size, Resolver resolver, BatchPolicy policy, RetryPolicy retry,
                 rcache::ReadCache* cache)
    : log_(log), page_size_(page_size), resolver_(std::move(resolver)), policy_(policy), retry_(retry), cache_(cache) {
  policy_.validate();
  if (page_size_ == 0) throw std::invalid_argument("cleaner: page size must be positive");
}

Cleaner::~Cleaner() {
  if (running()) {
    try {
      stop();
    } catch (...) {
    }
  }
}

void Cleaner::start() {
  if (running()) return;
  {
    std::lock_guard g(mu_);
    stop_ = false;
  }
  thread_ = std::thread([this] { run(); });
}

void Cleaner::stop() {
  if (!running()) return;
  {
    std::lock_guard g(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  thread_.join();
}

bool Cleaner::triggered() const {
  std::lock_guard g(mu_);
  // A waiting writer may need more room than a partial batch would leave.
  return stop_ || drain_target_ > log_.volatile_tail() || log_.waiting_writers() > 0;
}

std::uint64_t Cleaner::committed_run(std::uint64_t from, std::uint64_t head, std::uint64_t cap) const {
  const std::uint64_t nb = log_.geometry().nb_entries;
  std::uint64_t i = from;
  while (i < head) {
    const auto first = log_.live_header(i);
    if (!first || !first->is_first() || !first->committed()) break;
    // Followers were flushed and made visible before the first entry's
    // commit word, so after reading a set commit flag they can be trusted.
    const auto slot = static_cast<std::int32_t>(i % nb);
    std::uint64_t end = i + 1;
    while (end < head) {
      const auto f = log_.live_header(end);
      if (!f || f->is_first() || f->group() != slot) break;
      ++end;
    }
    if (end - from > cap && i != from) break;
    i = end;
    if (i - from >= cap) break;
  }
  return i - from;
}

std::uint64_t Cleaner::step(bool force, std::optional<std::uint64_t> limit) {
  std::lock_guard s(step_mu_);
  {
    std::lock_guard g(mu_);
    if (fault_) throw CleanerFault("cleaner: " + *fault_);
  }
  const std::uint64_t first = log_.volatile_tail();
  const std::uint64_t head = log_.head();
  if (head == first) return 0;
  const std::uint64_t cap = std::min(policy_.max_batch, limit.value_or(policy_.max_batch));
  const std::uint64_t n = committed_run(first, head, std::max<std::uint64_t>(cap, 1));
  if (n == 0) return 0;
  // A log smaller than min_batch could otherwise never fill a batch.
  const std::uint64_t min_batch = std::min(policy_.min_batch, log_.geometry().nb_entries);
  if (!force && n < min_batch && !triggered()) return 0;
  return consume(first, n);
}

template <class Fn>
void Cleaner::with_retry(Fn&& fn) {
  auto backoff = retry_.first_backoff;
  for (unsigned attempt = 1;; ++attempt) {
    try {
      fn();
      return;
    } catch (const std::system_error& e) {
      if (attempt >= retry_.attempts) {
        enter_fault(e.what());
        throw CleanerFault(std::string("cleaner: backing store keeps failing: ") + e.what());
      }
      {
        std::lock_guard g(mu_);
        ++m_.write_retries;
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
}

std::uint64_t Cleaner::consume(std::uint64_t first, std::uint64_t count) {
  rcache::ScopedRole role(rcache::Role::cleaner);
  std::vector<std::byte> buf(log_.geometry().entry_data_size);
  std::vector<backstore::BackingFile*> touched;

  for (std::uint64_t i = first; i < first + count; ++i) {
    const wlog::EntryHeader h = log_.header(i);
    const auto payload = std::span(buf).first(h.length);
    log_.read_payload(i, payload);
    const Target t = resolver_(h.file_id);
    if (t.file == nullptr) throw InvariantViolation("cleaner: log entry for unknown file id " + std::to_string(h.file_id));
    rcache::PageDescriptor* d = t.tree != nullptr ? t.tree->find(h.offset / page_size_) : nullptr;

    std::unique_lock<rcache::PageLock> held;
    if (d != nullptr) held = std::unique_lock(d->cleanup_lock);
    with_retry([&] { t.file->pwrite(h.offset, payload); });
    if (d != nullptr) {
      const std::int64_t before = d->dirty_counter.fetch_sub(1, std::memory_order_acq_rel);
      if (cache_ != nullptr && before == 1 && d->content.load(std::memory_order_acquire) == nullptr) {
        cache_->note(d->page_no, rcache::PageState::unloaded_dirty, rcache::PageState::unloaded_clean);
      }
    }
    log_.mark_propagated(i + 1);
    held = {};
    if (std::find(touched.begin(), touched.end(), t.file) == touched.end()) touched.push_back(t.file);
  }

  for (backstore::BackingFile* f : touched) with_retry([&] { f->sync(); });
  log_.consume_mark(first, count);

  {
    std::lock_guard g(mu_);
    m_.sync_calls += touched.size();
    m_.entries_consumed += count;
    ++m_.batches;
    m_.largest_batch = std::max(m_.largest_batch, count);
  }
  drained_.notify_all();
  return count;
}

void Cleaner::drain(std::uint64_t target) {
  if (!running()) {
    {
      std::lock_guard g(mu_);
      ++m_.drain_requests;
    }
    while (log_.volatile_tail() < target) {
      if (step(true) == 0) std::this_thread::yield();  // the next entry is still being written
    }
    return;
  }
  std::unique_lock l(mu_);
  ++m_.drain_requests;
  drain_target_ = std::max(drain_target_, target);
  wake_.notify_all();
  drained_.wait(l, [&] { return log_.volatile_tail() >= target || fault_.has_value(); });
  if (log_.volatile_tail() < target) throw CleanerFault("cleaner: " + *fault_);
}

void Cleaner::drain_all() { drain(log_.head()); }

void Cleaner::run() {
  rcache::ScopedRole role(rcache::Role::cleaner);
  for (;;) {
    std::uint64_t n = 0;
    try {
      n = step(false);
    } catch (const CleanerFault&) {
      return;
    }
    if (n != 0) continue;
    std::unique_lock l(mu_);
    if (stop_) return;
    wake_.wait_for(l, policy_.poll_interval, [&] { return stop_ || drain_target_ > log_.volatile_tail(); });
  }
}

void Cleaner::enter_fault(const std::string& why) {
  {
    std::lock_guard g(mu_);
    if (!fault_) fault_ = why;
  }
  drained_.notify_all();
}

Metrics Cleaner::metrics() const {
  std::lock_guard g(mu_);
  Metrics out = m_;
  out.occupancy = log_.occupancy();
  out.faulted = fault_.has_value();
  return out;
}

bool Cleaner::healthy() const {
  std::lock_guard g(mu_);
  return !fault_.has_value();
}

std::string Cleaner::fault_reason() const {
  std::lock_guard g(mu_);
  return fault_.value_or("");
}

}  // namespace nvcache::cleaner
