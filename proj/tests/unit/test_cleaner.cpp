#include <gtest/gtest.h>

#include <chrono>
#include <map>
#include <thread>

#include "nvcache/backstore.hpp"
#include "nvcache/cleaner.hpp"
#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/read_cache.hpp"
#include "nvcache/write_log.hpp"
#include "test_util.hpp"

using namespace nvcache;
using namespace std::chrono_literals;
using nvtest::Bytes;

namespace {

struct Rig {
  explicit Rig(std::uint64_t nb = 64, std::uint64_t eds = 256, cleaner::BatchPolicy policy = {1, 10000, 1ms},
               cleaner::RetryPolicy retry = {5, 10us})
      : geo(nvtest::small_geometry(eds, nb)), region(geo.region_size()), log(wlog::WriteLog::format(region, geo)) {
    for (std::uint64_t id = 0; id < 4; ++id) files[id] = disk.open("/f" + std::to_string(id), {true, true, true});
    cl = std::make_unique<cleaner::Cleaner>(
        *log, 4096,
        [this](std::uint64_t id) {
          const auto it = files.find(id);
          return cleaner::Target{it == files.end() ? nullptr : it->second.get(), trees.contains(id) ? &trees[id] : nullptr};
        },
        policy, retry, &cache);
  }

  wlog::LogGeometry geo;
  pmem::SimulatedRegion region;
  std::unique_ptr<wlog::WriteLog> log;
  backstore::SimBackstore disk;
  std::map<std::uint64_t, std::unique_ptr<backstore::BackingFile>> files;
  std::map<std::uint64_t, rcache::RadixTree> trees;
  rcache::ReadCache cache{4, 4096};
  std::unique_ptr<cleaner::Cleaner> cl;
};

}  // namespace

TEST(Cleaner, SingleEntryOneSync) {
  Rig r;
  r.log->append_single(0, 10, nvtest::bytes_of("hello"));
  EXPECT_EQ(r.cl->step(), 1u);
  EXPECT_EQ(r.disk.sync_calls(), 1u);
  EXPECT_EQ(r.cl->metrics().sync_calls, 1u);
  const Bytes got = r.disk.contents("/f0").value();
  EXPECT_EQ(nvtest::string_of(std::span(got).subspan(10)), "hello");
  EXPECT_EQ(r.log->volatile_tail(), 1u);
  EXPECT_EQ(r.log->persistent_tail(), 1u);
  // durable on the disk, not just in its cache
  const auto snap = r.disk.crash(backstore::DiskCrash::lose_unsynced);
  EXPECT_EQ(snap.at("/f0").size, 15u);
}

TEST(Cleaner, LargeBacklogIsOneBatchOneSync) {
  Rig r(8192, 64, {1000, 10000, 1ms});
  nvtest::ReferenceFile oracle;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 5000; ++i) {
    const std::uint64_t off = (rng() % 1000) * 64;
    const Bytes b = nvtest::random_bytes(rng, 64);
    r.log->append_single(0, off, b);
    oracle.pwrite(off, b);
  }
  EXPECT_EQ(r.cl->step(), 5000u);
  const auto m = r.cl->metrics();
  EXPECT_EQ(m.batches, 1u);
  EXPECT_EQ(m.sync_calls, 1u);
  EXPECT_EQ(m.largest_batch, 5000u);
  EXPECT_EQ(r.disk.contents("/f0").value(), oracle.data());
}

TEST(Cleaner, BelowMinBatchWaitsUnlessForced) {
  Rig r(2048, 64, {1000, 10000, 1ms});
  for (int i = 0; i < 500; ++i) r.log->append_single(0, i, nvtest::filled(1, 1));
  EXPECT_EQ(r.cl->step(false), 0u);
  EXPECT_EQ(r.disk.sync_calls(), 0u);
  EXPECT_EQ(r.cl->step(true), 500u);
}

TEST(Cleaner, MaxBatchCapsButKeepsGroupsWhole) {
  Rig r(64, 256, {1, 5, 1ms});
  r.log->append_group(0, 0, nvtest::filled(3 * 256, 1));  // 3 entries
  r.log->append_group(0, 0, nvtest::filled(3 * 256, 2));  // 3 entries
  EXPECT_EQ(r.cl->step(), 3u);
  EXPECT_EQ(r.cl->step(), 3u);
  // a group larger than max_batch is still taken whole
  r.log->append_group(0, 0, nvtest::filled(8 * 256, 3));
  EXPECT_EQ(r.cl->step(), 8u);
  EXPECT_EQ(r.disk.contents("/f0").value(), nvtest::filled(8 * 256, 3));
}

TEST(Cleaner, StopsAtFirstUncommittedEntry) {
  Rig r;
  r.log->append_single(0, 0, nvtest::filled(1, 1));
  r.log->append_single(0, 1, nvtest::filled(1, 2));
  const std::uint64_t hole = r.log->reserve(1);  // allocated, never committed
  r.log->append_single(0, 2, nvtest::filled(1, 3));
  EXPECT_EQ(hole, 2u);
  EXPECT_EQ(r.cl->step(true), 2u);
  EXPECT_EQ(r.cl->step(true), 0u);
  EXPECT_EQ(r.log->volatile_tail(), 2u);
  EXPECT_EQ(r.disk.contents("/f0")->size(), 2u);
}

TEST(Cleaner, OneSyncPerTouchedFile) {
  Rig r;
  for (int i = 0; i < 30; ++i) r.log->append_single(i % 3, i, nvtest::filled(1, 1));
  EXPECT_EQ(r.cl->step(), 30u);
  EXPECT_EQ(r.disk.sync_calls(), 3u);
}

TEST(Cleaner, DecrementsDirtyCountersUnderCleanupLock) {
  Rig r;
  rcache::TransitionRecorder rec;
  r.cache.recorder = &rec;
  auto& d = r.trees[0].get_or_create(1);
  r.log->append_single(0, 4096, nvtest::filled(4, 1));
  r.log->append_single(0, 4100, nvtest::filled(4, 1));
  d.dirty_counter = 2;
  EXPECT_EQ(r.cl->step(true, 1), 1u);
  EXPECT_EQ(d.dirty_counter.load(), 1);
  EXPECT_TRUE(rec.snapshot().empty());
  EXPECT_EQ(r.cl->step(true), 1u);
  EXPECT_EQ(d.dirty_counter.load(), 0);
  const auto tr = rec.snapshot();
  ASSERT_EQ(tr.size(), 1u);
  EXPECT_EQ(tr[0].from, rcache::PageState::unloaded_dirty);
  EXPECT_EQ(tr[0].to, rcache::PageState::unloaded_clean);
  EXPECT_FALSE(d.cleanup_lock.held_by_me());
}

TEST(Cleaner, RetriesThenFaults) {
  Rig r(64, 256, {1, 100, 1ms}, {3, 10us});
  r.log->append_single(0, 0, nvtest::filled(1, 1));
  r.disk.inject_write_faults(2);
  EXPECT_EQ(r.cl->step(), 1u);
  EXPECT_EQ(r.cl->metrics().write_retries, 2u);
  EXPECT_TRUE(r.cl->healthy());

  r.log->append_single(0, 0, nvtest::filled(1, 2));
  r.disk.inject_write_faults(-1);
  EXPECT_THROW(r.cl->step(), CleanerFault);
  EXPECT_FALSE(r.cl->healthy());
  EXPECT_TRUE(r.cl->metrics().faulted);
  EXPECT_FALSE(r.cl->fault_reason().empty());
  // nothing was freed; the entry stays for recovery
  EXPECT_EQ(r.log->volatile_tail(), 1u);
  EXPECT_EQ(r.log->persistent_tail(), 1u);
  EXPECT_THROW(r.cl->step(), CleanerFault);
}

TEST(Cleaner, BackgroundHonoursMinBatchAndDrain) {
  Rig r(2048, 64, {1000, 10000, 1ms});
  r.cl->start();
  EXPECT_TRUE(r.cl->running());
  for (int i = 0; i < 10; ++i) r.log->append_single(0, i, nvtest::filled(1, 7));
  std::this_thread::sleep_for(30ms);
  EXPECT_EQ(r.log->occupancy(), 10u);
  r.cl->drain_all();
  EXPECT_EQ(r.log->occupancy(), 0u);
  EXPECT_EQ(r.disk.contents("/f0").value(), nvtest::filled(10, 7));
  EXPECT_EQ(r.cl->metrics().drain_requests, 1u);
  for (int i = 0; i < 1500; ++i) r.log->append_single(0, i, nvtest::filled(1, 8));
  const auto deadline = std::chrono::steady_clock::now() + 5s;
  while (r.log->occupancy() >= 1000 && std::chrono::steady_clock::now() < deadline) std::this_thread::sleep_for(1ms);
  EXPECT_LT(r.log->occupancy(), 1000u);
  r.cl->stop();
  EXPECT_FALSE(r.cl->running());
}

TEST(Cleaner, BatchPolicyValidation) {
  EXPECT_THROW((cleaner::BatchPolicy{0, 10, 1ms}.validate()), std::invalid_argument);
  EXPECT_THROW((cleaner::BatchPolicy{11, 10, 1ms}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((cleaner::BatchPolicy{10, 10, 1ms}.validate()));
}
