// Micro benchmarks of the hot paths: log append, page-tree lookup and the
// cache read/write paths over an anonymous mapping and an in-memory disk.

#include <benchmark/benchmark.h>

#include <cstddef>
#include <random>
#include <vector>

#include "nvcache/backstore.hpp"
#include "nvcache/cache.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/read_cache.hpp"
#include "nvcache/write_log.hpp"

using namespace nvcache;

namespace {

void BM_LogAppend(benchmark::State& state) {
  wlog::LogGeometry g;
  g.entry_data_size = static_cast<std::uint64_t>(state.range(0));
  g.nb_entries = 4096;
  auto region = pmem::MappedRegion::anonymous(g.region_size());
  auto log = wlog::WriteLog::format(*region, g);
  log->bind_path(0, "/bench");
  std::vector<std::byte> payload(g.entry_data_size, std::byte{0x5A});
  for (auto _ : state) {
    if (log->head() - log->volatile_tail() == g.nb_entries) {
      state.PauseTiming();
      const std::uint64_t first = log->volatile_tail();
      log->mark_propagated(log->head());
      log->consume_mark(first, g.nb_entries);
      state.ResumeTiming();
    }
    benchmark::DoNotOptimize(log->append_single(0, 0, payload));
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_LogAppend)->Arg(256)->Arg(4096);

void BM_RadixFind(benchmark::State& state) {
  rcache::RadixTree tree;
  const auto pages = static_cast<std::uint64_t>(state.range(0));
  for (std::uint64_t p = 0; p < pages; ++p) tree.get_or_create(p * 7);
  std::mt19937_64 rng(1);
  for (auto _ : state) benchmark::DoNotOptimize(tree.find((rng() % pages) * 7));
}
BENCHMARK(BM_RadixFind)->Arg(1 << 10)->Arg(1 << 18);

struct Rig {
  Rig(std::size_t cache_pages) {
    CacheConfig cfg;
    wlog::LogGeometry g;
    g.nb_entries = 4096;
    cfg.log = g;
    cfg.read_cache_pages = cache_pages;
    cfg.background_cleaner = false;
    region = pmem::MappedRegion::anonymous(g.region_size());
    cache = std::make_unique<Cache>(*region, disk, cfg);
    fd = cache->open("/bench", OpenMode::create_rw());
    cache->pwrite(fd, std::vector<std::byte>(kFile), 0);
  }
  ~Rig() { cache->close(fd); }
  static constexpr std::uint64_t kFile = 16ull << 20;
  backstore::SimBackstore disk;
  std::unique_ptr<pmem::MappedRegion> region;
  std::unique_ptr<Cache> cache;
  int fd = -1;
};

void BM_CachePwrite(benchmark::State& state) {
  Rig rig(1024);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::byte> buf(n, std::byte{1});
  std::mt19937_64 rng(2);
  for (auto _ : state) rig.cache->pwrite(rig.fd, buf, rng() % (Rig::kFile - n));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_CachePwrite)->Arg(64)->Arg(4096)->Arg(65536);

void BM_CachePreadHit(benchmark::State& state) {
  Rig rig(4096);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::byte> buf(n);
  std::mt19937_64 rng(3);
  constexpr std::uint64_t kHot = 8ull << 20;  // fits the read cache
  for (std::uint64_t off = 0; off < kHot; off += 4096) rig.cache->pread(rig.fd, buf, off);
  for (auto _ : state) benchmark::DoNotOptimize(rig.cache->pread(rig.fd, buf, rng() % (kHot - n)));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_CachePreadHit)->Arg(64)->Arg(4096);

}  // namespace

BENCHMARK_MAIN();
