#include <gtest/gtest.h>

#include <cstring>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

#include <unistd.h>

#include "nvcache/pmem.hpp"
#include "test_util.hpp"

using namespace nvcache::pmem;
using nvtest::Bytes;

namespace {

void store_u64(Region& r, std::size_t off, std::uint64_t v) {
  Bytes b(8);
  std::memcpy(b.data(), &v, 8);
  r.store(off, b);
}

std::uint64_t u64_at(const Image& img, std::size_t off) {
  std::uint64_t v;
  std::memcpy(&v, img.data() + off, 8);
  return v;
}

}  // namespace

TEST(Pmem, UnflushedStoreIsLostOnDropPolicy) {
  SimulatedRegion r(4096);
  store_u64(r, 0, 0xAABBCCDD);
  const Image img = r.crash({0, CrashPolicy::drop_all_unflushed, r.event_count()});
  EXPECT_EQ(u64_at(img, 0), 0u);
  EXPECT_EQ(r.dirty_lines(), 1u);
}

TEST(Pmem, DrainedLineSurvivesEveryPolicy) {
  SimulatedRegion r(4096);
  store_u64(r, 64, 42);
  r.pwb(64);
  r.psync();
  for (auto policy : {CrashPolicy::drop_all_unflushed, CrashPolicy::adversarial_subset, CrashPolicy::persist_all}) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const Image img = r.crash({seed, policy, r.event_count()});
      EXPECT_EQ(u64_at(img, 64), 42u);
    }
  }
  EXPECT_EQ(r.persisted_image(), r.volatile_image());
}

TEST(Pmem, FenceOrderAllowsOnlyPrefixes) {
  // Oracle: of the four subsets of {A, B}, only "B without A" breaks the
  // ordering constraint.
  std::set<std::pair<bool, bool>> allowed;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      if (!(b == 1 && a == 0)) allowed.insert({a == 1, b == 1});

  std::set<std::pair<bool, bool>> seen;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    SimulatedRegion r(4096);
    store_u64(r, 0, 1);  // line A
    r.pwb(0);
    r.pfence();
    store_u64(r, 128, 2);  // line B
    r.pwb(128);
    const Image img = r.crash({seed, CrashPolicy::adversarial_subset, r.event_count()});
    const std::pair<bool, bool> got{u64_at(img, 0) == 1, u64_at(img, 128) == 2};
    EXPECT_TRUE(allowed.count(got)) << "seed " << seed;
    seen.insert(got);
  }
  EXPECT_EQ(seen, allowed);
}

TEST(Pmem, PwbOnCleanLineQueuesNothing) {
  SimulatedRegion r(4096);
  r.pwb(0);
  EXPECT_EQ(r.queued_lines(), 0u);
}

TEST(Pmem, PwbRangeQueuesTouchedLines) {
  const std::size_t ls = 64;
  for (std::size_t off : {0, 10, 63, 64, 200}) {
    for (std::size_t len : {1, 64, 65, 300, 4160}) {
      SimulatedRegion r(16384, ls);
      r.store(off, Bytes(len, std::byte{1}));
      r.pwb_range(off, len);
      const std::size_t expected = (off + len - 1) / ls - off / ls + 1;
      EXPECT_EQ(r.queued_lines(), expected) << off << "+" << len;
    }
  }
}

TEST(Pmem, OutOfBoundsIsRangeError) {
  SimulatedRegion r(4096);
  EXPECT_THROW(r.store(4090, Bytes(8)), std::out_of_range);
  EXPECT_THROW(r.pwb(4096), std::out_of_range);
  EXPECT_THROW(r.store_word(4, 1), std::invalid_argument);
  EXPECT_THROW(SimulatedRegion(100), std::invalid_argument);
}

TEST(Pmem, EventsAreNumberedAndEnumerable) {
  SimulatedRegion r(4096);
  r.set_trace_enabled(true);
  store_u64(r, 0, 1);
  r.pwb(0);
  r.pfence();
  r.psync();
  const auto trace = r.trace();
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_EQ(trace[0].kind, EventKind::store);
  EXPECT_EQ(trace[3].kind, EventKind::psync);
  const auto points = enumerate_crash_points(trace);
  EXPECT_EQ(points, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
}

TEST(Pmem, HookCanCaptureImagesMidRun) {
  SimulatedRegion r(4096);
  std::vector<Image> images;
  r.set_event_hook([&](const Event&) { images.push_back(r.crash({0, CrashPolicy::drop_all_unflushed, 0})); });
  store_u64(r, 0, 7);
  r.pwb(0);
  r.psync();
  ASSERT_EQ(images.size(), 3u);
  EXPECT_EQ(u64_at(images[1], 0), 0u);
  EXPECT_EQ(u64_at(images[2], 0), 7u);
}

TEST(Pmem, FenceOrderingPropertyRandomScripts) {
  // Every store writes a unique sequence number into its line. The oracle
  // remembers, per pwb, which sequence number was queued in which epoch and
  // checks the ordering rule on each adversarial image directly.
  constexpr std::size_t kLines = 12;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    std::mt19937_64 rng(seed);
    SimulatedRegion r(kLines * 64);
    struct StoreRec { std::uint64_t epoch; };
    std::map<std::uint64_t, StoreRec> stores;  // seq -> epoch
    struct PwbRec { std::size_t line; std::uint64_t seq; std::uint64_t epoch; };
    std::vector<PwbRec> pwbs;  // not yet drained
    std::vector<std::uint64_t> latest(kLines, 0), drained(kLines, 0);
    std::uint64_t epoch = 0, seq = 0;
    for (int op = 0; op < 80; ++op) {
      const auto kind = rng() % 10;
      const std::size_t line = rng() % kLines;
      if (kind < 5) {
        ++seq;
        store_u64(r, line * 64, seq);
        stores[seq] = {epoch};
        latest[line] = seq;
      } else if (kind < 8) {
        if (latest[line] != 0) pwbs.push_back({line, latest[line], epoch});
        r.pwb(line * 64);
      } else if (kind < 9) {
        r.pfence();
        ++epoch;
      } else {
        r.psync();
        for (const auto& p : pwbs) drained[p.line] = std::max(drained[p.line], p.seq);
        pwbs.clear();
        ++epoch;
      }
      for (std::uint64_t s = 0; s < 4; ++s) {
        const Image img = r.crash({seed * 1000 + s, CrashPolicy::adversarial_subset, r.event_count()});
        for (std::size_t l = 0; l < kLines; ++l) {
          const std::uint64_t got = u64_at(img, l * 64);
          ASSERT_GE(got, drained[l]) << "drained line lost";
          if (got == 0) continue;
          const std::uint64_t e = stores.at(got).epoch;
          for (const auto& p : pwbs) {
            if (p.epoch < e) {
              ASSERT_GE(u64_at(img, p.line * 64), p.seq) << "seed " << seed << " op " << op;
            }
          }
        }
      }
    }
  }
}

TEST(Pmem, MappedAndSimulatedAgreeWithoutCrash) {
  auto mapped = MappedRegion::anonymous(1 << 16, FlushMode::cache_line);
  SimulatedRegion sim(1 << 16);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const std::size_t off = (rng() % ((1 << 16) - 300));
    const Bytes data = nvtest::random_bytes(rng, rng() % 300 + 1);
    for (Region* r : {static_cast<Region*>(mapped.get()), static_cast<Region*>(&sim)}) {
      r->store(off, data);
      r->pwb_range(off, data.size());
      if (i % 7 == 0) r->psync();
      if (i % 5 == 0) r->store_word((off / 8) * 8 % ((1 << 16) - 8), static_cast<std::uint64_t>(i));
    }
  }
  sim.psync();
  mapped->psync();
  EXPECT_EQ(mapped->snapshot(), sim.volatile_image());
}

TEST(Pmem, FileMappedRegionPersistsAcrossReopen) {
  const auto path = std::filesystem::temp_directory_path() / ("nvcache_pmem_" + std::to_string(::getpid()));
  {
    auto r = MappedRegion::open_file(path, 8192);
    store_u64(*r, 128, 0x1234);
    r->pwb(128);
    r->psync();
  }
  {
    auto r = MappedRegion::open_file(path, 8192);
    EXPECT_EQ(r->load_word(128), 0x1234u);
  }
  std::filesystem::remove(path);
}
