#pragma once

// Restart after a crash: replay every committed entry of the log into the
// backing store, sync, and leave behind an empty log.

#include <cstdint>
#include <string>
#include <vector>

namespace nvcache::pmem {
class Region;
}
namespace nvcache::backstore {
class Backstore;
}

namespace nvcache::recovery {

struct Report {
  std::uint64_t entries_applied = 0;
  std::uint64_t entries_ignored = 0;
  std::uint64_t files_recovered = 0;
  std::uint64_t files_failed = 0;
  std::vector<std::string> failed_paths;

  /// key=value lines, one counter per line.
  std::string to_text() const;
};

/// Scans all slots starting at the persistent tail. A slot is replayed when it
/// holds an in-use entry of the current window whose commit flag (its own,
/// or its group's first entry's) is set. Replay runs in log index order.
/// Throws HeaderMismatch when the region holds no valid log.
Report recover(pmem::Region& region, backstore::Backstore& store);

/// True when the header is valid and no slot holds an in-use entry.
bool verify_clean(const pmem::Region& region);

}  // namespace nvcache::recovery
