#pragma once

// Crash-injection campaign: a scripted single-threaded workload of single
// and group writes runs on a simulated persistent region; at the chosen
// crash points the region and the backing disk are snapshotted, a fresh
// Cache recovers from the snapshot, and every file is compared with the
// acknowledged-write oracle. The write in flight at the crash may appear
// whole or not at all.

#include <cstdint>
#include <string>
#include <vector>

#include "nvcache/pmem.hpp"
#include "nvcache/write_log.hpp"

namespace nvcache::bench {

struct CampaignSpec {
  std::uint64_t writes = 200;
  unsigned files = 3;
  std::uint64_t file_span = 16 * 1024;  // writes land in [0, file_span)
  /// Entries per group write; single writes use one entry.
  std::uint64_t group_min_entries = 2;
  std::uint64_t group_max_entries = 6;
  double group_fraction = 0.5;
  double clean_probability = 0.2;   // a manual cleaner step after a write
  double reopen_probability = 0.02;  // close and reopen a file after a write
  wlog::LogGeometry geometry = [] {
    wlog::LogGeometry g;
    g.entry_data_size = 256;
    g.nb_entries = 32;
    g.fd_max = 8;
    g.path_max = 128;
    return g;
  }();
  std::uint64_t seed = 1;
  /// 0 checks every persistence event; otherwise a uniform sample.
  std::uint64_t crash_points = 0;
  std::vector<pmem::CrashPolicy> policies = {pmem::CrashPolicy::drop_all_unflushed, pmem::CrashPolicy::persist_all,
                                             pmem::CrashPolicy::adversarial_subset};
  unsigned adversarial_seeds = 2;
};

struct CampaignReport {
  std::uint64_t events = 0;        // persistence events of the workload
  std::uint64_t crash_points = 0;  // points checked
  std::uint64_t recoveries = 0;    // points x crash images
  std::uint64_t mismatches = 0;
  std::uint64_t partial_writes = 0;  // mismatches confined to the write in flight
  std::uint64_t in_flight_applied = 0;
  std::uint64_t entries_replayed = 0;
  std::vector<std::string> failures;  // first few, human readable
  double seconds = 0;

  bool ok() const { return mismatches == 0 && crash_points > 0; }
  std::string to_text() const;
};

CampaignReport crash_campaign(const CampaignSpec& spec);

}  // namespace nvcache::bench
