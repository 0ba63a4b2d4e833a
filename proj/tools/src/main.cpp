// nvcache-bench: workload generator, crash campaigns and offline recovery.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "nvcache/backstore.hpp"
#include "nvcache/bench/crash_campaign.hpp"
#include "nvcache/bench/workload.hpp"
#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/recovery.hpp"
#include "nvcache/write_log.hpp"

using namespace nvcache;

namespace {

void print_run(const bench::WorkloadSpec& s, const bench::WorkloadResult& r) {
  std::printf("mix=%s\n", std::string(bench::to_string(s.mix)).c_str());
  std::printf("elapsed_s=%.6f\n", r.elapsed);
  std::printf("ops=%llu\n", static_cast<unsigned long long>(r.ops));
  std::printf("bytes_written=%llu\n", static_cast<unsigned long long>(r.bytes_written));
  std::printf("bytes_read=%llu\n", static_cast<unsigned long long>(r.bytes_read));
  std::printf("throughput_bytes_s=%.0f\n", r.throughput());
  std::printf("avg_latency_us=%.3f\n", r.avg_latency_us);
  if (r.saturation_onset) {
    std::printf("saturation_onset_s=%.6f\n", *r.saturation_onset);
    std::printf("phase1_throughput_bytes_s=%.0f\n", r.phase1_throughput());
    std::printf("post_saturation_throughput_bytes_s=%.0f\n", r.post_saturation_throughput());
    std::printf("syncs_after_onset=%llu\n", static_cast<unsigned long long>(r.syncs_after_onset));
  } else {
    std::printf("saturation_onset_s=none\n");
  }
  std::printf("sync_calls=%llu\n", static_cast<unsigned long long>(r.sync_calls));
  std::printf("batches=%llu\n", static_cast<unsigned long long>(r.batches));
  std::printf("entries_consumed=%llu\n", static_cast<unsigned long long>(r.entries_consumed));
  std::printf("read_cache_loaded=%zu\n", r.read_cache_loaded);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NVCache workload generator and crash tester"};
  app.set_config("--config", "", "key=value file; every flag may appear as a key");
  app.require_subcommand(1);
  app.fallthrough();

  bench::WorkloadSpec w;
  std::string mix = "rand-write";
  double sync_latency_us = 1000, op_latency_us = 2, pmem_latency_us = 1;
  std::string csv_out;

  bench::CampaignSpec c;
  std::string pmem_file, root;

  app.add_option("--mix", mix, "rand-write | rand-rw | seq-write | seq-read")->capture_default_str();
  app.add_option("--bytes", w.total_bytes, "total bytes to transfer (K/M/G suffixes)")
      ->transform(CLI::AsSizeValue(false))
      ->capture_default_str();
  app.add_option("--bs", w.block_size, "block size")->transform(CLI::AsSizeValue(false))->capture_default_str();
  app.add_option("--threads", w.threads)->capture_default_str();
  app.add_option("--file-size", w.file_size, "0: same as --bytes")->transform(CLI::AsSizeValue(false));
  app.add_option("--log-entries", w.log_entries)->capture_default_str();
  app.add_option("--entry-size", w.entry_size)->transform(CLI::AsSizeValue(false))->capture_default_str();
  app.add_option("--read-cache-pages", w.read_cache_pages)->capture_default_str();
  app.add_option("--min-batch", w.min_batch)->capture_default_str();
  app.add_option("--max-batch", w.max_batch)->capture_default_str();
  app.add_option("--sim-disk-mbps", w.disk_mbps, "simulated disk throughput, 10^6 B/s")->capture_default_str();
  app.add_option("--sync-latency-us", sync_latency_us)->capture_default_str();
  app.add_option("--op-latency-us", op_latency_us)->capture_default_str();
  app.add_option("--pmem-mbps", w.pmem_mbps, "modelled pmem bandwidth (virtual time)")->capture_default_str();
  app.add_option("--pmem-latency-us", pmem_latency_us)->capture_default_str();
  app.add_option("--seed", w.seed)->capture_default_str();
  app.add_option("--sample-period", w.sample_period, "seconds per CSV row")->capture_default_str();
  app.add_option("--csv-out", csv_out, "write the time series here");
  app.add_flag("--virtual-time,!--real-time", w.virtual_time, "advance a logical clock instead of sleeping")
      ->capture_default_str();
  app.add_option("--crash-points", c.crash_points, "0: every persistence event")->capture_default_str();
  app.add_option("--writes", c.writes, "crash: scripted writes")->capture_default_str();
  app.add_option("--files", c.files, "crash: files written")->capture_default_str();
  app.add_option("--group-min", c.group_min_entries, "crash: smallest group")->capture_default_str();
  app.add_option("--group-max", c.group_max_entries, "crash: largest group")->capture_default_str();
  app.add_option("--group-fraction", c.group_fraction, "crash: share of group writes")->capture_default_str();
  app.add_option("--pmem-file", pmem_file, "recover: mapped log file");
  app.add_option("--root", root, "recover: backing directory");

  auto* run = app.add_subcommand("run", "run a workload and report throughput");
  auto* crash = app.add_subcommand("crash", "crash-injection campaign; exit status 1 on any mismatch");
  auto* recover = app.add_subcommand("recover", "replay the log in --pmem-file into --root");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      w.mix = bench::parse_mix(mix);
      w.disk_sync_latency = std::chrono::nanoseconds(static_cast<std::int64_t>(sync_latency_us * 1e3));
      w.disk_op_latency = std::chrono::nanoseconds(static_cast<std::int64_t>(op_latency_us * 1e3));
      w.pmem_op_latency = std::chrono::nanoseconds(static_cast<std::int64_t>(pmem_latency_us * 1e3));
      const auto r = bench::run_workload(w);
      print_run(w, r);
      if (!csv_out.empty()) bench::emit_csv(r.series, csv_out);
      return 0;
    }
    if (crash->parsed()) {
      c.seed = w.seed;
      const auto rep = bench::crash_campaign(c);
      std::cout << rep.to_text();
      return rep.ok() ? 0 : 1;
    }
    if (recover->parsed()) {
      if (pmem_file.empty()) throw CLI::RequiredError("--pmem-file");
      const auto size = std::filesystem::file_size(pmem_file);
      auto region = pmem::MappedRegion::open_file(pmem_file, size);
      backstore::PosixBackstore store(root);
      std::cout << recovery::recover(*region, store).to_text();
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "nvcache-bench: %s\n", e.what());
    return 2;
  }
  return 0;
}
