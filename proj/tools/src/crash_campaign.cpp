#include "nvcache/bench/crash_campaign.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "nvcache/backstore.hpp"
#include "nvcache/cache.hpp"

namespace nvcache::bench {

std::string CampaignReport::to_text() const {
  std::ostringstream os;
  os << "events=" << events << '\n'
     << "crash_points=" << crash_points << '\n'
     << "recoveries=" << recoveries << '\n'
     << "mismatches=" << mismatches << '\n'
     << "partial_writes=" << partial_writes << '\n'
     << "in_flight_applied=" << in_flight_applied << '\n'
     << "entries_replayed=" << entries_replayed << '\n'
     << "seconds=" << seconds << '\n';
  for (const auto& f : failures) os << "failure=" << f << '\n';
  return os.str();
}

namespace {

using Bytes = std::vector<std::byte>;

struct Write {
  unsigned file;
  std::uint64_t offset;
  Bytes data;
  bool clean_after;
  std::uint64_t clean_limit;
  bool reopen_after;
};

std::vector<Write> script(const CampaignSpec& s) {
  std::mt19937_64 rng(s.seed);
  const std::uint64_t eds = s.geometry.entry_data_size;
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Write> out;
  for (std::uint64_t i = 0; i < s.writes; ++i) {
    Write w;
    w.file = static_cast<unsigned>(rng() % s.files);
    const bool group = u(rng) < s.group_fraction;
    const std::uint64_t e = group ? s.group_min_entries + rng() % (s.group_max_entries - s.group_min_entries + 1) : 1;
    const std::uint64_t span = s.file_span > e * eds ? s.file_span - e * eds : 1;
    w.offset = rng() % span;
    const std::uint64_t head = eds - w.offset % eds;  // bytes up to the first entry boundary
    std::uint64_t len = 0;
    if (e == 1) {
      len = 1 + rng() % head;
    } else {
      len = head + (e - 2) * eds + 1 + rng() % eds;
    }
    w.data.resize(len);
    for (auto& b : w.data) b = static_cast<std::byte>(rng());
    w.clean_after = u(rng) < s.clean_probability;
    w.clean_limit = 1 + rng() % s.geometry.nb_entries;
    w.reopen_after = u(rng) < s.reopen_probability;
    out.push_back(std::move(w));
  }
  return out;
}

std::string path_of(unsigned f) { return "/crash/f" + std::to_string(f); }

CacheConfig config_for(const CampaignSpec& s) {
  CacheConfig c;
  c.log = s.geometry;
  c.page_size = 4096;
  c.read_cache_pages = 4;
  c.batch = {1, s.geometry.nb_entries, std::chrono::milliseconds(1)};
  c.background_cleaner = false;
  return c;
}

class Runner {
 public:
  Runner(const CampaignSpec& spec, const std::vector<Write>& writes) : spec_(spec), writes_(writes) {
    // states_[k][f]: file f after the first k writes
    std::vector<Bytes> cur(spec.files);
    states_.push_back(cur);
    for (const auto& w : writes_) {
      Bytes& b = cur[w.file];
      if (b.size() < w.offset + w.data.size()) b.resize(w.offset + w.data.size());
      std::copy(w.data.begin(), w.data.end(), b.begin() + static_cast<std::ptrdiff_t>(w.offset));
      states_.push_back(cur);
    }
  }

  /// Runs the script; `check` is called at every event with its ordinal.
  template <class Check>
  std::uint64_t run(Check&& check) {
    const CacheConfig cfg = config_for(spec_);
    pmem::SimulatedRegion region(cfg.log->region_size());
    backstore::SimBackstore disk;
    Cache cache(region, disk, cfg);
    std::vector<int> fds;
    for (unsigned f = 0; f < spec_.files; ++f) fds.push_back(cache.open(path_of(f), OpenMode::create_rw()));
    acked_ = 0;
    in_flight_ = false;
    region_ = &region;
    disk_ = &disk;
    const std::uint64_t base = region.event_count();
    check(base);
    region.set_event_hook([&](const pmem::Event& e) { check(e.ordinal); });
    for (std::size_t i = 0; i < writes_.size(); ++i) {
      const Write& w = writes_[i];
      in_flight_ = true;
      cache.pwrite(fds[w.file], w.data, w.offset);
      in_flight_ = false;
      acked_ = i + 1;
      if (w.clean_after) cache.cleaner().step(true, w.clean_limit);
      if (w.reopen_after) {
        cache.close(fds[w.file]);
        fds[w.file] = cache.open(path_of(w.file), OpenMode::read_write());
      }
    }
    region.set_event_hook(nullptr);
    const std::uint64_t events = region.event_count() - base;
    for (int fd : fds) cache.close(fd);
    region_ = nullptr;
    disk_ = nullptr;
    return events;
  }

  void verify(std::uint64_t ordinal, CampaignReport& rep) {
    const backstore::DiskSnapshot snap = disk_->crash(backstore::DiskCrash::lose_unsynced);
    std::vector<pmem::CrashSchedule> schedules;
    for (const auto policy : spec_.policies) {
      if (policy == pmem::CrashPolicy::adversarial_subset) {
        for (unsigned k = 0; k < spec_.adversarial_seeds; ++k) schedules.push_back({spec_.seed * 1000 + k, policy, ordinal});
      } else {
        schedules.push_back({0, policy, ordinal});
      }
    }
    ++rep.crash_points;
    for (const auto& sch : schedules) {
      pmem::SimulatedRegion after(region_->crash(sch));
      backstore::SimBackstore d({}, snap);
      std::vector<Bytes> got(spec_.files);
      {
        Cache restarted(after, d, config_for(spec_));
        if (restarted.recovery_report()) rep.entries_replayed += restarted.recovery_report()->entries_applied;
      }
      for (unsigned f = 0; f < spec_.files; ++f) got[f] = d.contents(path_of(f)).value_or(Bytes{});
      ++rep.recoveries;
      if (got == states_[acked_]) continue;
      if (in_flight_ && got == states_[acked_ + 1]) {
        ++rep.in_flight_applied;
        continue;
      }
      ++rep.mismatches;
      if (in_flight_ && confined_to_in_flight(got)) ++rep.partial_writes;
      if (rep.failures.size() < 8) {
        std::ostringstream os;
        os << "event " << ordinal << " policy " << static_cast<int>(sch.policy) << " seed " << sch.seed << " after "
           << acked_ << " acknowledged writes" << (in_flight_ ? " (one in flight)" : "");
        rep.failures.push_back(os.str());
      }
    }
  }

 private:
  bool confined_to_in_flight(const std::vector<Bytes>& got) const {
    const Write& w = writes_[acked_];
    for (unsigned f = 0; f < spec_.files; ++f) {
      const Bytes& a = states_[acked_][f];
      const Bytes& b = got[f];
      for (std::size_t i = 0, n = std::max(a.size(), b.size()); i < n; ++i) {
        const std::byte x = i < a.size() ? a[i] : std::byte{0};
        const std::byte y = i < b.size() ? b[i] : std::byte{0};
        if (x != y && (f != w.file || i < w.offset || i >= w.offset + w.data.size())) return false;
      }
    }
    return true;
  }

  const CampaignSpec& spec_;
  const std::vector<Write>& writes_;
  std::vector<std::vector<Bytes>> states_;
  std::size_t acked_ = 0;
  bool in_flight_ = false;
  pmem::SimulatedRegion* region_ = nullptr;
  backstore::SimBackstore* disk_ = nullptr;
};

}  // namespace

CampaignReport crash_campaign(const CampaignSpec& spec) {
  if (spec.files == 0 || spec.files > spec.geometry.fd_max) throw std::invalid_argument("campaign: bad file count");
  if (spec.group_min_entries < 2 || spec.group_min_entries > spec.group_max_entries ||
      spec.group_max_entries > spec.geometry.nb_entries) {
    throw std::invalid_argument("campaign: bad group size range");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Write> writes = script(spec);
  Runner runner(spec, writes);
  CampaignReport rep;

  std::set<std::uint64_t> chosen;
  bool everything = spec.crash_points == 0;
  if (!everything) {
    std::uint64_t first = 0;
    const std::uint64_t events = runner.run([&](std::uint64_t o) {
      if (first == 0) first = o;
    });
    if (spec.crash_points > events) {
      everything = true;
    } else {
      std::mt19937_64 rng(spec.seed ^ 0xC4A5);
      while (chosen.size() < spec.crash_points) chosen.insert(first + rng() % (events + 1));
    }
  }
  rep.events = runner.run([&](std::uint64_t o) {
    if (everything || chosen.contains(o)) runner.verify(o, rep);
  });
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace nvcache::bench
