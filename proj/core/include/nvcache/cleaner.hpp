#pragma once

// Propagates committed log entries to the backing store.
//
// A batch is a run of whole committed groups taken strictly in log order
// starting at the tail. For each entry, step one takes the page's cleanup
// lock, writes the payload, decrements the page's dirty counter and releases
// the lock; the batch ends with one sync per touched file. Step two frees
// the batch in the persisted log, step three in the volatile one.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

namespace nvcache::backstore {
class BackingFile;
}
namespace nvcache::rcache {
class RadixTree;
class ReadCache;
}  // namespace nvcache::rcache
namespace nvcache::wlog {
class WriteLog;
}

namespace nvcache::cleaner {

struct BatchPolicy {
  std::uint64_t min_batch = 1000;
  std::uint64_t max_batch = 10000;
  std::chrono::nanoseconds poll_interval = std::chrono::milliseconds(1);

  void validate() const;
};

struct RetryPolicy {
  unsigned attempts = 5;
  std::chrono::nanoseconds first_backoff = std::chrono::milliseconds(1);
};

struct Metrics {
  std::uint64_t sync_calls = 0;
  std::uint64_t entries_consumed = 0;
  std::uint64_t batches = 0;
  std::uint64_t drain_requests = 0;
  std::uint64_t write_retries = 0;
  std::uint64_t largest_batch = 0;
  std::uint64_t occupancy = 0;
  bool faulted = false;
};

/// Where the entries of one file id go.
struct Target {
  backstore::BackingFile* file = nullptr;
  rcache::RadixTree* tree = nullptr;
};

class Cleaner {
 public:
  using Resolver = std::function<Target(std::uint64_t file_id)>;

  Cleaner(wlog::WriteLog& log, std::size_t page_size, Resolver resolver, BatchPolicy policy = {},
          RetryPolicy retry = {}, rcache::ReadCache* cache = nullptr);
  ~Cleaner();
  Cleaner(const Cleaner&) = delete;
  Cleaner& operator=(const Cleaner&) = delete;

  /// Runs the consumer on its own thread until stop().
  void start();
  /// Consumes what is committed, then joins the thread.
  void stop();
  bool running() const noexcept { return thread_.joinable(); }

  /// One batch, on the calling thread. `force` ignores min_batch; `limit`
  /// lowers max_batch. Returns the number of entries consumed.
  /// Throws CleanerFault once the cleaner has given up on the backing store.
  std::uint64_t step(bool force = false, std::optional<std::uint64_t> limit = std::nullopt);

  /// Returns once every entry below `target` is synced and freed.
  void drain(std::uint64_t target);
  void drain_all();

  Metrics metrics() const;
  const BatchPolicy& policy() const noexcept { return policy_; }
  bool healthy() const;
  std::string fault_reason() const;

 private:
  std::uint64_t committed_run(std::uint64_t from, std::uint64_t head, std::uint64_t cap) const;
  std::uint64_t consume(std::uint64_t first, std::uint64_t count);
  template <class Fn>
  void with_retry(Fn&& fn);
  bool triggered() const;
  void run();
  void enter_fault(const std::string& why);

  wlog::WriteLog& log_;
  const std::size_t page_size_;
  Resolver resolver_;
  BatchPolicy policy_;
  RetryPolicy retry_;
  rcache::ReadCache* cache_;

  std::mutex step_mu_;  // one consumer at a time

  mutable std::mutex mu_;
  std::condition_variable wake_;     // cleaner side
  std::condition_variable drained_;  // barrier side
  std::uint64_t drain_target_ = 0;
  bool stop_ = false;
  std::optional<std::string> fault_;
  Metrics m_;

  std::thread thread_;
};

}  // namespace nvcache::cleaner
