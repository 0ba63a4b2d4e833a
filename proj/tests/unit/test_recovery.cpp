#include <gtest/gtest.h>

#include <map>
#include <random>

#include "nvcache/backstore.hpp"
#include "nvcache/cleaner.hpp"
#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/recovery.hpp"
#include "nvcache/write_log.hpp"
#include "test_util.hpp"

using namespace nvcache;
using nvtest::Bytes;

namespace {

Bytes file_or_empty(const backstore::SimBackstore& disk, const std::string& path) {
  return disk.contents(path).value_or(Bytes{});
}

}  // namespace

TEST(Recovery, EmptyLogIsANoop) {
  const auto g = nvtest::small_geometry();
  pmem::SimulatedRegion r(g.region_size());
  wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  const auto rep = recovery::recover(r, disk);
  EXPECT_EQ(rep.entries_applied, 0u);
  EXPECT_EQ(rep.entries_ignored, 0u);
  EXPECT_EQ(rep.files_recovered, 0u);
  EXPECT_EQ(disk.sync_calls(), 0u);
  EXPECT_TRUE(recovery::verify_clean(r));
}

TEST(Recovery, RejectsRegionWithoutLog) {
  pmem::SimulatedRegion r(1 << 16);
  backstore::SimBackstore disk;
  EXPECT_THROW(recovery::recover(r, disk), HeaderMismatch);
  EXPECT_FALSE(recovery::verify_clean(r));
}

TEST(Recovery, ReplaysInOrderAndReports) {
  const auto g = nvtest::small_geometry(256, 32);
  pmem::SimulatedRegion r(g.region_size());
  auto log = wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  disk.put("/a", nvtest::filled(1000, 1));
  disk.put("/b", {});
  log->bind_path(0, "/a");
  log->bind_path(3, "/b");
  nvtest::ReferenceFile a, b;
  a.pwrite(0, nvtest::filled(1000, 1));
  std::mt19937_64 rng(11);
  for (int i = 0; i < 10; ++i) {
    const Bytes p = nvtest::random_bytes(rng, 1 + rng() % 600);
    const std::uint64_t off = rng() % 1500;
    if (i % 2 == 0) {
      log->append_group(0, off, p);
      a.pwrite(off, p);
    } else {
      log->append_group(3, off, p);
      b.pwrite(off, p);
    }
  }
  const std::uint64_t entries = log->head();
  log.reset();
  pmem::SimulatedRegion after(r.crash({0, pmem::CrashPolicy::drop_all_unflushed, r.event_count()}));
  const auto rep = recovery::recover(after, disk);
  EXPECT_EQ(rep.entries_applied, entries);
  EXPECT_EQ(rep.files_recovered, 2u);
  EXPECT_EQ(disk.sync_calls(), 2u);
  EXPECT_EQ(file_or_empty(disk, "/a"), a.data());
  EXPECT_EQ(file_or_empty(disk, "/b"), b.data());
  EXPECT_TRUE(recovery::verify_clean(after));
  // only synced bytes count; the replay was synced
  const auto snap = disk.crash(backstore::DiskCrash::lose_unsynced);
  EXPECT_EQ(snap.at("/a").data, a.data());
  EXPECT_NE(rep.to_text().find("entries_applied=" + std::to_string(entries)), std::string::npos);
}

TEST(Recovery, MissingFileIsReportedAndSkipped) {
  const auto g = nvtest::small_geometry(256, 32);
  pmem::SimulatedRegion r(g.region_size());
  auto log = wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  disk.put("/keep", {});
  log->bind_path(0, "/gone");
  log->bind_path(1, "/keep");
  log->append_single(0, 0, nvtest::filled(10, 1));
  log->append_single(1, 0, nvtest::filled(10, 2));
  log->append_single(0, 10, nvtest::filled(10, 3));
  const auto rep = recovery::recover(r, disk);
  EXPECT_EQ(rep.entries_applied, 1u);
  EXPECT_EQ(rep.entries_ignored, 2u);
  EXPECT_EQ(rep.files_failed, 1u);
  EXPECT_EQ(rep.files_recovered, 1u);
  ASSERT_EQ(rep.failed_paths.size(), 1u);
  EXPECT_EQ(rep.failed_paths[0], "/gone");
  EXPECT_EQ(file_or_empty(disk, "/keep"), nvtest::filled(10, 2));
  EXPECT_FALSE(disk.stat("/gone").has_value());
  EXPECT_TRUE(recovery::verify_clean(r));
}

TEST(Recovery, IsIdempotent) {
  const auto g = nvtest::small_geometry(256, 32);
  pmem::SimulatedRegion r(g.region_size());
  auto log = wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  disk.put("/a", {});
  log->bind_path(0, "/a");
  log->append_group(0, 100, nvtest::filled(700, 4));
  log.reset();
  const auto first = recovery::recover(r, disk);
  const Bytes after_first = file_or_empty(disk, "/a");
  const auto second = recovery::recover(r, disk);
  // [100, 800) split at multiples of 256: four pieces
  EXPECT_EQ(first.entries_applied, 4u);
  EXPECT_EQ(second.entries_applied, 0u);
  EXPECT_EQ(file_or_empty(disk, "/a"), after_first);
  // a log attached after recovery starts empty where the old one ended
  auto reattached = wlog::WriteLog::attach(r);
  EXPECT_EQ(reattached->occupancy(), 0u);
  EXPECT_EQ(reattached->persistent_tail(), 4u);
}

TEST(Recovery, CrashDuringRecoveryThenRecoverAgain) {
  const auto g = nvtest::small_geometry(256, 16);
  pmem::SimulatedRegion r(g.region_size());
  auto log = wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  disk.put("/a", {});
  log->bind_path(0, "/a");
  nvtest::ReferenceFile oracle;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 6; ++i) {
    const Bytes p = nvtest::random_bytes(rng, 1 + rng() % 400);
    const std::uint64_t off = rng() % 2000;
    log->append_group(0, off, p);
    oracle.pwrite(off, p);
  }
  log.reset();
  const pmem::Image image = r.crash({0, pmem::CrashPolicy::drop_all_unflushed, r.event_count()});
  const auto base = disk.crash(backstore::DiskCrash::lose_unsynced);

  // Record every crash point of one recovery run.
  struct Cap {
    pmem::Image image;
    backstore::DiskSnapshot disk;
  };
  std::vector<Cap> caps;
  {
    pmem::SimulatedRegion run(image);
    backstore::SimBackstore d({}, base);
    run.set_event_hook([&](const pmem::Event& e) {
      caps.push_back({run.crash({0, pmem::CrashPolicy::drop_all_unflushed, e.ordinal}), d.crash(backstore::DiskCrash::lose_unsynced)});
      caps.push_back({run.crash({e.ordinal, pmem::CrashPolicy::adversarial_subset, e.ordinal}), d.crash(backstore::DiskCrash::lose_unsynced)});
    });
    recovery::recover(run, d);
  }
  ASSERT_FALSE(caps.empty());
  for (std::size_t i = 0; i < caps.size(); ++i) {
    pmem::SimulatedRegion again(caps[i].image);
    backstore::SimBackstore d({}, caps[i].disk);
    recovery::recover(again, d);
    ASSERT_EQ(file_or_empty(d, "/a"), oracle.data()) << "capture " << i;
    ASSERT_TRUE(recovery::verify_clean(again));
  }
}

// Crash at every persistence event of a mixed append/clean script. After
// recovery each file holds exactly the acknowledged writes, plus possibly the
// one write in flight, applied whole.
TEST(Recovery, EveryCrashPointOfAScriptedWorkload) {
  const auto g = nvtest::small_geometry(256, 16);
  pmem::SimulatedRegion r(g.region_size());
  auto log = wlog::WriteLog::format(r, g);
  backstore::SimBackstore disk;
  const std::vector<std::string> paths = {"/f0", "/f1"};
  std::vector<std::unique_ptr<backstore::BackingFile>> handles;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    handles.push_back(disk.open(paths[i], {true, true, true}));
    log->bind_path(i, paths[i]);
  }
  handles[0]->sync();
  cleaner::Cleaner cl(*log, 4096, [&](std::uint64_t id) { return cleaner::Target{handles.at(id).get(), nullptr}; },
                      {1, 10000, std::chrono::milliseconds(1)});
  log->set_wait_handler([&] { cl.step(true); });

  struct Op {
    std::uint64_t file, off;
    Bytes data;
  };
  std::mt19937_64 rng(21);
  std::vector<Op> ops;
  for (int i = 0; i < 60; ++i) ops.push_back({rng() % 2, rng() % 3000, nvtest::random_bytes(rng, 1 + rng() % 700)});
  // states[k][f]: file f after the first k writes
  std::vector<std::vector<Bytes>> states(1, std::vector<Bytes>(2));
  {
    std::vector<nvtest::ReferenceFile> ref(2);
    for (const auto& op : ops) {
      ref[op.file].pwrite(op.off, op.data);
      states.push_back({ref[0].data(), ref[1].data()});
    }
  }

  struct Cap {
    std::uint64_t ordinal;
    std::size_t acked;
    bool in_flight;
    pmem::Image image;
    backstore::DiskSnapshot disk;
  };
  std::vector<Cap> caps;
  std::size_t acked = 0;
  bool in_flight = false;
  r.set_event_hook([&](const pmem::Event& e) {
    const auto snap = disk.crash(backstore::DiskCrash::lose_unsynced);
    caps.push_back({e.ordinal, acked, in_flight, r.crash({0, pmem::CrashPolicy::drop_all_unflushed, e.ordinal}), snap});
    caps.push_back({e.ordinal, acked, in_flight, r.crash({e.ordinal, pmem::CrashPolicy::adversarial_subset, e.ordinal}), snap});
  });
  for (std::size_t i = 0; i < ops.size(); ++i) {
    in_flight = true;
    log->append_group(ops[i].file, ops[i].off, ops[i].data);
    in_flight = false;
    acked = i + 1;
    if (rng() % 4 == 0) cl.step(true);
  }
  r.set_event_hook(nullptr);
  ASSERT_GT(caps.size(), 1000u);

  std::size_t saw_new = 0;
  for (const auto& c : caps) {
    pmem::SimulatedRegion after(c.image);
    backstore::SimBackstore d({}, c.disk);
    recovery::recover(after, d);
    const std::vector<Bytes> got = {file_or_empty(d, "/f0"), file_or_empty(d, "/f1")};
    if (got == states[c.acked]) continue;
    ASSERT_TRUE(c.in_flight && got == states[c.acked + 1]) << "crash at event " << c.ordinal << " after " << c.acked << " acks";
    ++saw_new;
  }
  EXPECT_GT(saw_new, 0u);
}
