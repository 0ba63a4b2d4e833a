#include "nvcache/bench/workload.hpp"

#include <algorithm>
#include <cstring>
#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

#include "nvcache/backstore.hpp"
#include "nvcache/cache.hpp"
#include "nvcache/pmem.hpp"

namespace nvcache::bench {

std::string_view to_string(Mix m) {
  switch (m) {
    case Mix::rand_write: return "rand-write";
    case Mix::rand_rw: return "rand-rw";
    case Mix::seq_write: return "seq-write";
    case Mix::seq_read: return "seq-read";
  }
  return "?";
}

Mix parse_mix(std::string_view s) {
  if (s == "rand-write" || s == "randwrite") return Mix::rand_write;
  if (s == "rand-rw" || s == "rand-rw-50/50" || s == "randrw") return Mix::rand_rw;
  if (s == "seq-write" || s == "write") return Mix::seq_write;
  if (s == "seq-read" || s == "read") return Mix::seq_read;
  throw std::invalid_argument("unknown mix '" + std::string(s) + "'");
}

double WorkloadResult::phase1_throughput() const {
  if (!saturation_onset) return throughput();
  return *saturation_onset > 0 ? static_cast<double>(bytes_before_onset) / *saturation_onset : 0;
}

double WorkloadResult::post_saturation_throughput() const {
  if (!saturation_onset || elapsed <= *saturation_onset) return 0;
  return static_cast<double>(bytes_written + bytes_read - bytes_before_onset) / (elapsed - *saturation_onset);
}

namespace {

constexpr char kPath[] = "/bench.dat";
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Op {
  bool write = true;
  std::uint64_t offset = 0;
  std::size_t length = 0;
};

class Generator {
 public:
  Generator(const WorkloadSpec& s, unsigned index) : spec_(s), rng_(s.seed * 0x9E3779B97F4A7C15ull + index) {
    const std::uint64_t blocks = s.file_size / s.block_size;
    quota_ = s.total_bytes / s.threads + (index == 0 ? s.total_bytes % s.threads : 0);
    const std::uint64_t slice = std::max<std::uint64_t>(1, blocks / s.threads);
    slice_first_ = std::min<std::uint64_t>(index * slice, blocks - 1);
    slice_blocks_ = std::max<std::uint64_t>(1, std::min(slice, blocks - slice_first_));
    blocks_ = blocks;
  }

  std::optional<Op> next() {
    if (issued_ >= quota_) return std::nullopt;
    Op op;
    op.length = static_cast<std::size_t>(std::min<std::uint64_t>(spec_.block_size, quota_ - issued_));
    switch (spec_.mix) {
      case Mix::rand_write:
        op.offset = rng_() % blocks_ * spec_.block_size;
        break;
      case Mix::rand_rw:
        op.write = (rng_() & 1) != 0;
        op.offset = rng_() % blocks_ * spec_.block_size;
        break;
      case Mix::seq_write:
      case Mix::seq_read:
        op.write = spec_.mix == Mix::seq_write;
        op.offset = (slice_first_ + cursor_++ % slice_blocks_) * spec_.block_size;
        break;
    }
    issued_ += op.length;
    return op;
  }

 private:
  const WorkloadSpec& spec_;
  std::mt19937_64 rng_;
  std::uint64_t quota_ = 0, issued_ = 0, blocks_ = 1;
  std::uint64_t slice_first_ = 0, slice_blocks_ = 1, cursor_ = 0;
};

struct Completion {
  double t;
  std::uint64_t bytes;
  double latency;
  bool write;
};

void validate(const WorkloadSpec& s) {
  if (s.block_size == 0 || s.threads == 0 || s.total_bytes == 0) throw std::invalid_argument("workload: empty run");
  if (s.file_size < s.block_size) throw std::invalid_argument("workload: file smaller than one block");
  if (s.disk_mbps <= 0 || s.pmem_mbps <= 0) throw std::invalid_argument("workload: bandwidths must be positive");
  if (s.sample_period <= 0) throw std::invalid_argument("workload: sample period must be positive");
}

CacheConfig cache_config(const WorkloadSpec& s, bool background) {
  CacheConfig c;
  wlog::LogGeometry g;
  g.entry_data_size = s.entry_size;
  g.nb_entries = s.log_entries;
  g.fd_max = std::max<std::uint64_t>(64, s.threads + 1);
  c.log = g;
  c.page_size = s.page_size;
  c.read_cache_pages = s.read_cache_pages;
  c.batch = {s.min_batch, s.max_batch, std::chrono::milliseconds(1)};
  c.background_cleaner = background;
  return c;
}

backstore::SimDiskConfig disk_config(const WorkloadSpec& s, bool virtual_time) {
  backstore::SimDiskConfig d;
  d.throughput = s.disk_mbps * 1e6;
  d.per_sync_latency = s.disk_sync_latency;
  d.per_op_latency = s.disk_op_latency;
  d.page_size = s.page_size;
  d.store_data = false;
  d.time = virtual_time ? backstore::TimeMode::virtual_time : backstore::TimeMode::real_sleep;
  return d;
}

void presize(backstore::SimBackstore& disk, std::uint64_t size) {
  auto f = disk.open(kPath, {true, true, true, false});
  const std::byte last{0};
  f->pwrite(size - 1, std::span(&last, 1));
  f->sync();
  disk.take_virtual_cost();
}

double seconds(std::chrono::nanoseconds ns) { return static_cast<double>(ns.count()) * 1e-9; }

/// Builds the sampled series from completions and counter timelines.
std::vector<Sample> build_series(std::vector<Completion> done, double elapsed, double period,
                                 std::vector<std::pair<double, std::uint64_t>> occupancy,
                                 std::vector<std::pair<double, std::uint64_t>> syncs) {
  std::sort(done.begin(), done.end(), [](const Completion& a, const Completion& b) { return a.t < b.t; });
  std::sort(occupancy.begin(), occupancy.end());
  std::sort(syncs.begin(), syncs.end());
  const auto bins = static_cast<std::size_t>(std::ceil(elapsed / period));
  std::vector<Sample> out;
  out.reserve(bins);
  std::size_t di = 0, oi = 0, si = 0;
  std::uint64_t cum = 0, ops = 0, occ = 0, sc = 0;
  double lat = 0;
  for (std::size_t b = 0; b < std::max<std::size_t>(bins, 1); ++b) {
    const double end = std::min(elapsed, static_cast<double>(b + 1) * period);
    const double start = static_cast<double>(b) * period;
    std::uint64_t in_bin = 0;
    while (di < done.size() && done[di].t <= end) {
      in_bin += done[di].bytes;
      lat += done[di].latency;
      ++ops;
      ++di;
    }
    while (oi < occupancy.size() && occupancy[oi].first <= end) occ = occupancy[oi++].second;
    while (si < syncs.size() && syncs[si].first <= end) sc = syncs[si++].second;
    cum += in_bin;
    Sample s;
    s.t_seconds = end;
    s.inst_throughput_bytes_s = end > start ? static_cast<double>(in_bin) / (end - start) : 0;
    s.avg_latency_us = ops > 0 ? lat / static_cast<double>(ops) * 1e6 : 0;
    s.cumulative_bytes = cum;
    s.log_occupancy = occ;
    s.sync_calls = sc;
    out.push_back(s);
  }
  return out;
}

void summarize(WorkloadResult& r, const std::vector<Completion>& done) {
  double lat = 0;
  for (const auto& c : done) {
    lat += c.latency;
    r.elapsed = std::max(r.elapsed, c.t);
    if (r.saturation_onset && c.t <= *r.saturation_onset) r.bytes_before_onset += c.bytes;
  }
  r.ops = done.size();
  r.avg_latency_us = done.empty() ? 0 : lat / static_cast<double>(done.size()) * 1e6;
}

// -- virtual time -------------------------------------------------------------------

class Simulation {
 public:
  explicit Simulation(const WorkloadSpec& s)
      : spec_(s),
        disk_(disk_config(s, true)),
        region_(pmem::MappedRegion::anonymous(cache_config(s, false).log->region_size())),
        nb_(s.log_entries),
        eff_min_(std::min(s.min_batch, s.log_entries)),
        piece_(std::min<std::uint64_t>(s.page_size, s.entry_size)),
        buffer_(s.block_size) {
    presize(disk_, s.file_size);
    cache_ = std::make_unique<Cache>(*region_, disk_, cache_config(s, false));
    if (pieces(0, s.block_size) > nb_) throw std::invalid_argument("workload: one block needs more entries than the log holds");
    for (unsigned i = 0; i < s.threads; ++i) {
      Writer w(Generator(s, i));
      w.fd = cache_->open(kPath, s.mix == Mix::seq_read ? OpenMode::read_only() : OpenMode::read_write());
      writers_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < buffer_.size(); ++i) buffer_[i] = static_cast<std::byte>(i * 131 + 7);
  }

  WorkloadResult run() {
    for (;;) {
      Writer* next = nullptr;
      for (auto& w : writers_) {
        if (!w.done && !w.blocked && (next == nullptr || w.t < next->t)) next = &w;
      }
      const bool any_left = std::any_of(writers_.begin(), writers_.end(), [](const Writer& w) { return !w.done; });
      if (!any_left) break;
      if (next == nullptr || cleaner_t_ <= next->t) {
        if (cleaner_t_ == kInf) throw std::logic_error("workload: every actor is waiting");
        clean();
      } else {
        act(*next);
      }
    }
    WorkloadResult r;
    r.saturation_onset = onset_;
    summarize(r, done_);
    if (onset_) {
      for (const auto& [t, n] : sync_timeline_) r.syncs_after_onset += t >= *onset_ ? 1 : 0;
    }
    const auto m = cache_->cleaner().metrics();
    r.sync_calls = disk_.sync_calls() - 1;  // minus the presize sync
    r.batches = m.batches;
    r.entries_consumed = m.entries_consumed;
    r.read_cache_loaded = cache_->read_cache().lru.loaded();
    for (auto& s : sync_timeline_) s.second -= 1;
    r.series = build_series(done_, r.elapsed, spec_.sample_period, occupancy_, sync_timeline_);
    r.bytes_written = written_;
    r.bytes_read = read_;
    return r;
  }

  ~Simulation() {
    // Entries still in the log are drained by the cache on destruction; that
    // work is outside the measured run.
    for (auto& w : writers_) cache_->close(w.fd);
    cache_.reset();
  }

 private:
  struct Writer {
    explicit Writer(Generator g) : gen(std::move(g)) {}
    Generator gen;
    int fd = -1;
    double t = 0;
    double arrival = 0;
    std::optional<Op> pending;
    bool done = false;
    bool blocked = false;
    double blocked_at = 0;
  };

  std::uint64_t pieces(std::uint64_t off, std::uint64_t len) const { return (off + len - 1) / piece_ - off / piece_ + 1; }

  void act(Writer& w) {
    if (!w.pending) {
      w.pending = w.gen.next();
      w.arrival = w.t;
      if (!w.pending) {
        w.done = true;
        return;
      }
    }
    const Op op = *w.pending;
    double cost = seconds(spec_.pmem_op_latency) + static_cast<double>(op.length) / (spec_.pmem_mbps * 1e6);
    if (op.write) {
      const std::uint64_t k = pieces(op.offset, op.length);
      if (appended_ + k > nb_) {
        const std::uint64_t need = appended_ + k - nb_;  // entries that must be free first
        while (free_cursor_ < frees_.size() && frees_[free_cursor_].first < need) ++free_cursor_;
        if (free_cursor_ == frees_.size()) {
          if (!onset_) onset_ = w.t;
          w.blocked = true;
          w.blocked_at = w.t;
          if (cleaner_asleep_) wake_cleaner(w.t, 1);
          return;
        }
        if (frees_[free_cursor_].second > w.t) {
          if (!onset_) onset_ = w.t;
          w.t = frees_[free_cursor_].second;
          return;
        }
      }
      // stamp the block so consecutive writes differ
      const std::uint64_t stamp = ++op_seq_;
      std::memcpy(buffer_.data(), &stamp, std::min<std::size_t>(sizeof stamp, buffer_.size()));
      cache_->pwrite(w.fd, std::span(buffer_).first(op.length), op.offset);
      cost += seconds(disk_.take_virtual_cost());  // nonzero only if the real log ever filled
      const double complete = w.t + cost;
      for (std::uint64_t i = 0; i < k; ++i) commits_.push_back(complete);
      appended_ += k;
      occupancy_.emplace_back(complete, appended_ - freed_scheduled_);
      written_ += op.length;
      done_.push_back({complete, op.length, complete - w.arrival, true});
      w.t = complete;
      if (cleaner_asleep_ && commits_.size() >= eff_min_) wake_cleaner(asleep_since_, eff_min_);
    } else {
      std::vector<std::byte>& out = read_buf_;
      out.resize(op.length);
      const std::size_t n = cache_->pread(w.fd, out, op.offset);
      cost += seconds(disk_.take_virtual_cost());
      const double complete = w.t + cost;
      read_ += n;
      done_.push_back({complete, n, complete - w.arrival, false});
      w.t = complete;
    }
    w.pending.reset();
  }

  /// When the first `want` unconsumed entries are all committed.
  double ready_time(std::uint64_t want) const {
    double t = 0;
    for (std::uint64_t i = 0; i < want; ++i) t = std::max(t, commits_[i]);
    return t;
  }

  void wake_cleaner(double not_before, std::uint64_t want) {
    cleaner_t_ = std::max({asleep_since_, not_before, ready_time(want)});
    cleaner_asleep_ = false;
  }

  void clean() {
    const double now = cleaner_t_;
    std::uint64_t prefix = 0;
    while (prefix < commits_.size() && prefix < spec_.max_batch && commits_[prefix] <= now) ++prefix;
    const bool writer_waits = std::any_of(writers_.begin(), writers_.end(), [](const Writer& w) { return w.blocked; });
    if (prefix == 0 || (prefix < eff_min_ && !writer_waits)) {
      // a blocked writer lowers the threshold to one entry
      const std::uint64_t want = writer_waits ? 1 : eff_min_;
      asleep_since_ = now;
      if (commits_.size() >= want) {
        cleaner_t_ = ready_time(want);  // later than now, or the prefix would have sufficed
      } else {
        cleaner_t_ = kInf;
        cleaner_asleep_ = true;
      }
      return;
    }
    const std::uint64_t n = cache_->cleaner().step(true, prefix);
    if (n == 0) throw std::logic_error("workload: cleaner found nothing committed");
    sync_timeline_.emplace_back(now, disk_.sync_calls());
    for (std::uint64_t i = 0; i < n; ++i) commits_.pop_front();
    const double end = now + seconds(disk_.take_virtual_cost());
    freed_scheduled_ += n;
    frees_.emplace_back(freed_scheduled_, end);
    occupancy_.emplace_back(end, appended_ - freed_scheduled_);
    cleaner_t_ = end;
    for (auto& w : writers_) {
      if (w.blocked) {
        w.blocked = false;
        w.t = w.blocked_at;
      }
    }
  }

  const WorkloadSpec& spec_;
  backstore::SimBackstore disk_;
  std::unique_ptr<pmem::MappedRegion> region_;
  std::unique_ptr<Cache> cache_;
  const std::uint64_t nb_;
  const std::uint64_t eff_min_;
  const std::uint64_t piece_;
  std::vector<std::byte> buffer_;
  std::vector<std::byte> read_buf_;
  std::vector<Writer> writers_;

  std::uint64_t appended_ = 0;
  std::uint64_t freed_scheduled_ = 0;
  std::deque<double> commits_;  // commit times of entries not yet consumed, in log order
  std::vector<std::pair<std::uint64_t, double>> frees_;  // (entries freed in total, time)
  std::size_t free_cursor_ = 0;
  double cleaner_t_ = 0;
  bool cleaner_asleep_ = false;
  double asleep_since_ = 0;
  std::optional<double> onset_;
  std::uint64_t op_seq_ = 0;
  std::uint64_t written_ = 0, read_ = 0;
  std::vector<Completion> done_;
  std::vector<std::pair<double, std::uint64_t>> occupancy_;
  std::vector<std::pair<double, std::uint64_t>> sync_timeline_;
};

// -- real time -----------------------------------------------------------------------

WorkloadResult run_real(const WorkloadSpec& s) {
  backstore::SimBackstore disk(disk_config(s, false));
  presize(disk, s.file_size);
  const CacheConfig cfg = cache_config(s, true);
  auto region = pmem::MappedRegion::anonymous(cfg.log->region_size());
  auto cache = std::make_unique<Cache>(*region, disk, cfg);
  const std::uint64_t syncs0 = disk.sync_calls();

  using clk = std::chrono::steady_clock;
  const auto t0 = clk::now();
  auto since = [&](clk::time_point t) { return std::chrono::duration<double>(t - t0).count(); };

  std::vector<std::vector<Completion>> per_thread(s.threads);
  std::mutex onset_mu;
  std::optional<double> onset;
  std::atomic<unsigned> running{s.threads};
  std::vector<std::pair<double, std::uint64_t>> occ, syncs;

  std::thread sampler([&] {
    const auto step = std::chrono::duration<double>(std::min(s.sample_period / 10, 0.01));
    while (running.load() > 0) {
      const double t = since(clk::now());
      occ.emplace_back(t, cache->log().occupancy());
      syncs.emplace_back(t, disk.sync_calls() - syncs0);
      std::this_thread::sleep_for(step);
    }
  });
  std::vector<std::thread> ts;
  for (unsigned i = 0; i < s.threads; ++i) {
    ts.emplace_back([&, i] {
      Generator gen(s, i);
      const int fd = cache->open(kPath, s.mix == Mix::seq_read ? OpenMode::read_only() : OpenMode::read_write());
      std::vector<std::byte> buf(s.block_size, std::byte{0x5A});
      std::uint64_t seq = 0;
      while (auto op = gen.next()) {
        const auto start = clk::now();
        std::size_t n = op->length;
        if (op->write) {
          const std::uint64_t waits = cache->log().full_waits();
          const std::uint64_t stamp = (std::uint64_t{i} << 48) | ++seq;
          std::memcpy(buf.data(), &stamp, std::min<std::size_t>(sizeof stamp, buf.size()));
          cache->pwrite(fd, std::span(buf).first(n), op->offset);
          if (cache->log().full_waits() != waits) {
            std::lock_guard g(onset_mu);
            if (!onset || since(start) < *onset) onset = since(start);
          }
        } else {
          n = cache->pread(fd, std::span(buf).first(n), op->offset);
        }
        const auto end = clk::now();
        per_thread[i].push_back({since(end), n, std::chrono::duration<double>(end - start).count(), op->write});
      }
      running.fetch_sub(1);
    });
  }
  for (auto& t : ts) t.join();
  sampler.join();

  std::vector<Completion> done;
  WorkloadResult r;
  for (auto& v : per_thread) done.insert(done.end(), v.begin(), v.end());
  r.saturation_onset = onset;
  summarize(r, done);
  for (const auto& c : done) (c.write ? r.bytes_written : r.bytes_read) += c.bytes;
  r.sync_calls = disk.sync_calls() - syncs0;
  if (onset) {
    for (std::size_t i = 0; i < syncs.size(); ++i) {
      if (syncs[i].first >= *onset) {
        r.syncs_after_onset = r.sync_calls - (i == 0 ? 0 : syncs[i - 1].second);
        break;
      }
    }
  }
  const auto m = cache->cleaner().metrics();
  r.batches = m.batches;
  r.entries_consumed = m.entries_consumed;
  r.read_cache_loaded = cache->read_cache().lru.loaded();
  r.series = build_series(done, r.elapsed, s.sample_period, occ, syncs);
  cache.reset();
  return r;
}

}  // namespace

WorkloadResult run_workload(const WorkloadSpec& spec) {
  WorkloadSpec s = spec;
  if (s.file_size == 0) s.file_size = s.total_bytes;
  s.file_size = std::max<std::uint64_t>(s.file_size / s.block_size * s.block_size, s.block_size);
  validate(s);
  if (!s.virtual_time) return run_real(s);
  Simulation sim(s);
  return sim.run();
}

void emit_csv(const std::vector<Sample>& series, std::ostream& out) {
  out << "t_seconds,inst_throughput_bytes_s,avg_latency_us,cumulative_bytes,log_occupancy,sync_calls\n";
  for (const auto& s : series) {
    out << s.t_seconds << ',' << s.inst_throughput_bytes_s << ',' << s.avg_latency_us << ',' << s.cumulative_bytes << ','
        << s.log_occupancy << ',' << s.sync_calls << '\n';
  }
}

void emit_csv(const std::vector<Sample>& series, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  emit_csv(series, f);
}

}  // namespace nvcache::bench
