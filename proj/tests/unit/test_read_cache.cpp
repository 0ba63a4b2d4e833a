#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <thread>
#include <vector>

#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/read_cache.hpp"
#include "nvcache/write_log.hpp"
#include "test_util.hpp"

using namespace nvcache;
using namespace nvcache::rcache;
using nvtest::Bytes;

namespace {

constexpr std::size_t kPage = 4096;

class FakeSource : public PageSource {
 public:
  explicit FakeSource(nvtest::ReferenceFile& backing, std::uint64_t file_id = 0) : backing_(backing), id_(file_id) {}
  void read_backing_page(std::uint64_t page_no, std::span<std::byte> out) override {
    ++reads;
    std::fill(out.begin(), out.end(), std::byte{0});
    backing_.pread(page_no * out.size(), out);
  }
  bool owns(std::uint64_t file_id) const override { return file_id == id_; }
  int reads = 0;

 private:
  nvtest::ReferenceFile& backing_;
  std::uint64_t id_;
};

struct LogFixture {
  wlog::LogGeometry geo = [] {
    auto g = nvtest::small_geometry(4096, 64);
    return g;
  }();
  pmem::SimulatedRegion region{geo.region_size()};
  std::unique_ptr<wlog::WriteLog> log = wlog::WriteLog::format(region, geo);
};

}  // namespace

TEST(RadixTree, ConcurrentCreatorsConverge) {
  for (int round = 0; round < 50; ++round) {
    RadixTree tree;
    std::vector<PageDescriptor*> got(8);
    std::atomic<int> ready{0};
    std::vector<std::thread> ts;
    for (int t = 0; t < 8; ++t) {
      ts.emplace_back([&, t] {
        ready.fetch_add(1);
        while (ready.load() < 8) {
        }
        got[t] = &tree.get_or_create(12345 + round);
      });
    }
    for (auto& t : ts) t.join();
    for (auto* p : got) EXPECT_EQ(p, got[0]);
    EXPECT_EQ(tree.size(), 1u);
  }
}

TEST(RadixTree, LookupDoesNotAllocate) {
  RadixTree tree;
  auto& d = tree.get_or_create(7);
  const auto nodes = tree.nodes();
  EXPECT_EQ(&tree.get_or_create(7), &d);
  EXPECT_EQ(tree.find(7), &d);
  EXPECT_EQ(tree.find(8), nullptr);
  EXPECT_EQ(tree.nodes(), nodes);
  EXPECT_EQ(tree.size(), 1u);
}

TEST(RadixTree, SparseKeysCoexist) {
  RadixTree tree;
  auto& a = tree.get_or_create(0);
  auto& b = tree.get_or_create(std::uint64_t{1} << 20);
  auto& c = tree.get_or_create(RadixTree::kMaxPage);
  EXPECT_NE(&a, &b);
  EXPECT_EQ(tree.find(0), &a);
  EXPECT_EQ(tree.find(std::uint64_t{1} << 20), &b);
  EXPECT_EQ(tree.find(RadixTree::kMaxPage), &c);
  EXPECT_EQ(b.page_no, std::uint64_t{1} << 20);
  EXPECT_THROW(tree.get_or_create(RadixTree::kMaxPage + 1), std::out_of_range);
  std::size_t n = 0;
  tree.for_each([&](PageDescriptor&) { ++n; });
  EXPECT_EQ(n, 3u);
}

TEST(PageLock, OwnerCannotTryLockAgain) {
  PageLock l(LockKind::atomic);
  EXPECT_TRUE(l.try_lock());
  EXPECT_TRUE(l.held_by_me());
  EXPECT_FALSE(l.try_lock());
  l.unlock();
  EXPECT_FALSE(l.held_by_me());
}

TEST(PageLock, WaitsAreAttributedToHolderRole) {
  reset_lock_stats();
  PageLock l(LockKind::cleanup);
  std::atomic<bool> held{false};
  std::thread cleaner([&] {
    ScopedRole role(Role::cleaner);
    l.lock();
    held = true;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    l.unlock();
  });
  while (!held.load()) std::this_thread::yield();
  {
    ScopedRole role(Role::reader);
    l.lock();
    l.unlock();
  }
  cleaner.join();
  const auto s = lock_stats();
  EXPECT_EQ(s.waited_on(LockKind::cleanup, Role::reader, Role::cleaner), 1u);
  EXPECT_EQ(s.waited_on(LockKind::atomic, Role::writer, Role::cleaner), 0u);
}

TEST(Lru, SecondChanceSkipsAccessedPageOnce) {
  ReadCache cache(2, kPage);
  nvtest::ReferenceFile file;
  FakeSource src(file);
  RadixTree tree;
  auto& a = tree.get_or_create(0);
  auto& b = tree.get_or_create(1);
  auto& c = tree.get_or_create(2);
  for (auto* d : {&a, &b}) {
    std::lock_guard g(d->atomic_lock);
    load_clean(cache, *d, *cache.lru.acquire(cache), src);
  }
  a.accessed = true;
  // a is at the head but accessed: it goes back, b is evicted.
  PageContent* x = cache.lru.acquire(cache);
  ASSERT_NE(x, nullptr);
  EXPECT_EQ(b.state(), PageState::unloaded_clean);
  EXPECT_EQ(a.state(), PageState::loaded);
  EXPECT_FALSE(a.accessed.load());
  {
    std::lock_guard g(c.atomic_lock);
    load_clean(cache, c, *x, src);
  }
  // a had its second chance; now it goes.
  ASSERT_NE(cache.lru.acquire(cache), nullptr);
  EXPECT_EQ(a.state(), PageState::unloaded_clean);
  EXPECT_EQ(cache.lru.evictions(), 2u);
}

TEST(Lru, AllAccessedStillEvictsAfterOnePass) {
  ReadCache cache(3, kPage);
  nvtest::ReferenceFile file;
  FakeSource src(file);
  RadixTree tree;
  std::vector<PageDescriptor*> ds;
  for (std::uint64_t p = 0; p < 3; ++p) {
    auto& d = tree.get_or_create(p);
    std::lock_guard g(d.atomic_lock);
    load_clean(cache, d, *cache.lru.acquire(cache), src);
    d.accessed = true;
    ds.push_back(&d);
  }
  PageContent* c = cache.lru.acquire(cache);
  ASSERT_NE(c, nullptr);
  EXPECT_EQ(ds[0]->state(), PageState::unloaded_clean);
  EXPECT_EQ(ds[1]->state(), PageState::loaded);
  EXPECT_FALSE(ds[1]->accessed.load());
  cache.lru.release(c);
  EXPECT_TRUE(cache.lru.consistent());
}

TEST(Lru, DirtyEvictionWritesNothing) {
  ReadCache cache(1, kPage);
  nvtest::ReferenceFile file;
  FakeSource src(file);
  RadixTree tree;
  auto& a = tree.get_or_create(0);
  {
    std::lock_guard g(a.atomic_lock);
    load_clean(cache, a, *cache.lru.acquire(cache), src);
  }
  a.dirty_counter = 2;  // as if two writes landed while loaded
  const int reads = src.reads;
  ASSERT_NE(cache.lru.acquire(cache), nullptr);
  EXPECT_EQ(a.state(), PageState::unloaded_dirty);
  EXPECT_EQ(src.reads, reads);
  EXPECT_EQ(file.size(), 0u);
}

TEST(Lru, PinnedPagesAreSkipped) {
  ReadCache cache(2, kPage);
  nvtest::ReferenceFile file;
  FakeSource src(file);
  RadixTree tree;
  auto& a = tree.get_or_create(0);
  auto& b = tree.get_or_create(1);
  for (auto* d : {&a, &b}) {
    std::lock_guard g(d->atomic_lock);
    load_clean(cache, *d, *cache.lru.acquire(cache), src);
  }
  // This thread holds a; another holds b. Nothing can be evicted.
  std::lock_guard ga(a.atomic_lock);
  std::atomic<bool> hold{true}, held{false};
  std::thread other([&] {
    std::lock_guard gb(b.atomic_lock);
    held = true;
    while (hold.load()) std::this_thread::yield();
  });
  while (!held.load()) std::this_thread::yield();
  EXPECT_EQ(cache.lru.acquire(cache), nullptr);
  hold = false;
  other.join();
  EXPECT_NE(cache.lru.acquire(cache), nullptr);
  EXPECT_EQ(b.state(), PageState::unloaded_clean);
  EXPECT_EQ(a.state(), PageState::loaded);
}

TEST(Lru, CapacityAndBackReferences) {
  ReadCache cache(16, kPage);
  nvtest::ReferenceFile file;
  FakeSource src(file);
  RadixTree tree;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    auto& d = tree.get_or_create(rng() % 64);
    std::lock_guard g(d.atomic_lock);
    if (d.content.load() != nullptr) {
      d.accessed = true;
      continue;
    }
    PageContent* c = cache.lru.acquire(cache);
    ASSERT_NE(c, nullptr);
    load_clean(cache, d, *c, src);
    ASSERT_LE(cache.lru.loaded(), 16u);
  }
  EXPECT_TRUE(cache.lru.consistent());
  cache.lru.release_tree(tree);
  EXPECT_EQ(cache.lru.loaded(), 0u);
  EXPECT_TRUE(cache.lru.consistent());
}

TEST(DirtyMiss, SingleEntryOverZeros) {
  LogFixture f;
  nvtest::ReferenceFile backing;
  FakeSource src(backing);
  ReadCache cache(4, kPage);
  RadixTree tree;
  auto& d = tree.get_or_create(0);
  f.log->append_single(0, 100, nvtest::filled(100, 0xAB));
  d.dirty_counter = 1;
  std::scoped_lock g(d.atomic_lock, d.cleanup_lock);
  PageContent* c = cache.lru.acquire(cache);
  dirty_miss(cache, d, *c, src, *f.log);
  Bytes expect(kPage);
  std::fill(expect.begin() + 100, expect.begin() + 200, std::byte{0xAB});
  EXPECT_EQ(Bytes(c->data.get(), c->data.get() + kPage), expect);
  EXPECT_EQ(d.state(), PageState::loaded);
}

TEST(DirtyMiss, LaterEntriesWinAndOnlyThisPageCounts) {
  LogFixture f;
  nvtest::ReferenceFile backing;
  std::mt19937_64 rng(9);
  backing.pwrite(0, nvtest::random_bytes(rng, 3 * kPage));
  nvtest::ReferenceFile oracle = backing;
  FakeSource src(backing, 1);
  ReadCache cache(4, kPage);
  RadixTree tree;
  auto& d = tree.get_or_create(1);
  // three overlapping entries for page 1, interleaved with noise: another
  // page of the same file and another file's entry for page 1
  struct W { std::uint64_t file, off; Bytes data; };
  std::vector<W> ws = {
      {1, kPage + 10, nvtest::random_bytes(rng, 500)},
      {1, 0, nvtest::random_bytes(rng, 300)},
      {1, kPage + 200, nvtest::random_bytes(rng, 1000)},
      {2, kPage, nvtest::random_bytes(rng, 4096)},
      {1, kPage + 400, nvtest::random_bytes(rng, 50)},
  };
  for (const auto& w : ws) {
    f.log->append_single(w.file, w.off, w.data);
    if (w.file == 1) oracle.pwrite(w.off, w.data);
  }
  d.dirty_counter = 3;
  std::scoped_lock g(d.atomic_lock, d.cleanup_lock);
  Bytes out(kPage);
  reconstruct(cache, d, out, src, *f.log);
  Bytes expect(kPage);
  oracle.pread(kPage, expect);
  EXPECT_EQ(out, expect);
}

TEST(DirtyMiss, PropagatedEntriesAreNotReplayed) {
  LogFixture f;
  nvtest::ReferenceFile backing;
  FakeSource src(backing);
  ReadCache cache(4, kPage);
  RadixTree tree;
  auto& d = tree.get_or_create(0);
  f.log->append_single(0, 0, nvtest::filled(10, 1));
  f.log->append_single(0, 5, nvtest::filled(10, 2));
  // the cleaner has written entry 0 and decremented, but not yet freed it
  backing.pwrite(0, nvtest::filled(10, 1));
  f.log->mark_propagated(1);
  d.dirty_counter = 1;
  std::scoped_lock g(d.atomic_lock, d.cleanup_lock);
  Bytes out(kPage);
  reconstruct(cache, d, out, src, *f.log);
  EXPECT_EQ(out[0], std::byte{1});
  EXPECT_EQ(out[5], std::byte{2});
  EXPECT_EQ(out[14], std::byte{2});
  EXPECT_EQ(out[15], std::byte{0});
}

TEST(DirtyMiss, MissingEntriesAreAnInvariantBreach) {
  LogFixture f;
  nvtest::ReferenceFile backing;
  FakeSource src(backing);
  ReadCache cache(4, kPage);
  RadixTree tree;
  auto& d = tree.get_or_create(0);
  f.log->append_single(0, 0, nvtest::filled(10, 1));
  d.dirty_counter = 2;
  Bytes out(kPage);
  EXPECT_THROW(reconstruct(cache, d, out, src, *f.log), InvariantViolation);
}

TEST(PageWrite, OnlyLoadedPagesAreUpdated) {
  ReadCache cache(4, kPage);
  nvtest::ReferenceFile backing;
  FakeSource src(backing);
  RadixTree tree;
  auto& d = tree.get_or_create(0);
  apply_write_to_loaded(d, 0, nvtest::filled(4, 7));  // unloaded: no effect, no crash
  EXPECT_EQ(d.state(), PageState::unloaded_clean);
  {
    std::lock_guard g(d.atomic_lock);
    load_clean(cache, d, *cache.lru.acquire(cache), src);
    apply_write_to_loaded(d, 10, nvtest::filled(4, 7));
  }
  EXPECT_EQ(d.content.load()->data[10], std::byte{7});
  EXPECT_EQ(d.content.load()->data[14], std::byte{0});
  EXPECT_TRUE(d.accessed.load());
}

TEST(PageStates, ArcsOfTheStateMachine) {
  using S = PageState;
  const std::vector<std::pair<S, S>> arcs = {
      {S::unloaded_clean, S::loaded},         {S::unloaded_dirty, S::loaded},       {S::loaded, S::unloaded_clean},
      {S::loaded, S::unloaded_dirty},         {S::unloaded_clean, S::unloaded_dirty}, {S::unloaded_dirty, S::unloaded_clean},
  };
  for (S a : {S::loaded, S::unloaded_clean, S::unloaded_dirty}) {
    for (S b : {S::loaded, S::unloaded_clean, S::unloaded_dirty}) {
      if (a == b) continue;
      const bool listed = std::find(arcs.begin(), arcs.end(), std::make_pair(a, b)) != arcs.end();
      EXPECT_EQ(TransitionRecorder::allowed(a, b), listed) << to_string(a) << "->" << to_string(b);
    }
  }
}
