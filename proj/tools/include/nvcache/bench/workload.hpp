#pragma once

// FIO-style workload generator over the Cache API.
//
// In virtual time the run is a discrete-event simulation on one OS thread:
// every logical thread and the cleaner carry a local clock, and the actor
// with the smallest clock acts next. Disk costs come from a SimBackstore in
// virtual_time mode, pmem costs from a fixed latency plus a bandwidth term.
// Freed log slots become usable only at the virtual time the batch that
// freed them completes, so saturation behaves as on a real, slower disk.

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nvcache::bench {

enum class Mix { rand_write, rand_rw, seq_write, seq_read };

std::string_view to_string(Mix m);
/// Accepts rand-write, rand-rw (also rand-rw-50/50, randrw), seq-write, seq-read.
Mix parse_mix(std::string_view s);

struct WorkloadSpec {
  Mix mix = Mix::rand_write;
  std::uint64_t total_bytes = 256ull << 20;
  std::size_t block_size = 4096;
  unsigned threads = 1;
  std::uint64_t file_size = 0;  // 0: total_bytes
  std::uint64_t log_entries = 16384;
  std::uint64_t entry_size = 4096;
  std::size_t page_size = 4096;
  std::size_t read_cache_pages = 1024;
  std::uint64_t min_batch = 1000;
  std::uint64_t max_batch = 10000;
  double disk_mbps = 50;  // 10^6 bytes per second
  std::chrono::nanoseconds disk_sync_latency = std::chrono::milliseconds(1);
  std::chrono::nanoseconds disk_op_latency = std::chrono::microseconds(2);
  double pmem_mbps = 2000;
  std::chrono::nanoseconds pmem_op_latency = std::chrono::microseconds(1);
  std::uint64_t seed = 1;
  bool virtual_time = true;
  double sample_period = 1.0;  // seconds
};

struct Sample {
  double t_seconds = 0;
  double inst_throughput_bytes_s = 0;
  double avg_latency_us = 0;
  std::uint64_t cumulative_bytes = 0;
  std::uint64_t log_occupancy = 0;
  std::uint64_t sync_calls = 0;
};

struct WorkloadResult {
  std::vector<Sample> series;
  double elapsed = 0;  // seconds until the last operation completed
  std::uint64_t ops = 0;
  std::uint64_t bytes_written = 0;
  std::uint64_t bytes_read = 0;
  double avg_latency_us = 0;
  /// Time the first write found the log full.
  std::optional<double> saturation_onset;
  std::uint64_t bytes_before_onset = 0;
  std::uint64_t syncs_after_onset = 0;
  std::uint64_t sync_calls = 0;
  std::uint64_t batches = 0;
  std::uint64_t entries_consumed = 0;
  std::size_t read_cache_loaded = 0;

  double throughput() const { return elapsed > 0 ? static_cast<double>(bytes_written + bytes_read) / elapsed : 0; }
  /// Bytes per second up to saturation (or over the whole run without it).
  double phase1_throughput() const;
  /// Bytes per second from saturation to the end; 0 without saturation.
  double post_saturation_throughput() const;
};

WorkloadResult run_workload(const WorkloadSpec& spec);

void emit_csv(const std::vector<Sample>& series, std::ostream& out);
void emit_csv(const std::vector<Sample>& series, const std::string& path);

}  // namespace nvcache::bench
