#include "nvcache/recovery.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <system_error>

#include "nvcache/backstore.hpp"
#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"
#include "nvcache/write_log.hpp"

namespace nvcache::recovery {

std::string Report::to_text() const {
  std::ostringstream os;
  os << "entries_applied=" << entries_applied << '\n'
     << "entries_ignored=" << entries_ignored << '\n'
     << "files_recovered=" << files_recovered << '\n'
     << "files_failed=" << files_failed << '\n';
  for (const auto& p : failed_paths) os << "failed_path=" << p << '\n';
  return os.str();
}

Report recover(pmem::Region& region, backstore::Backstore& store) {
  const auto geo = wlog::read_header(region);
  if (!geo) throw HeaderMismatch("recovery: region holds no log");
  auto log = wlog::WriteLog::attach(region);
  const std::uint64_t nb = geo->nb_entries;
  const std::uint64_t tail = log->persistent_tail();

  std::vector<wlog::EntryHeader> window(nb);
  std::vector<bool> live(nb, false);
  for (std::uint64_t k = 0; k < nb; ++k) {
    window[k] = log->header(tail + k);
    live[k] = window[k].in_use() && window[k].index == tail + k;
  }
  auto committed = [&](std::uint64_t k) {
    const wlog::EntryHeader& h = window[k];
    if (h.is_first()) return h.committed();
    const auto g = static_cast<std::uint64_t>(static_cast<std::uint32_t>(h.group()));
    if (g >= nb) return false;
    const std::uint64_t back = ((tail + k) % nb + nb - g) % nb;  // distance to the first entry
    if (back == 0 || back > k) return false;
    const std::uint64_t f = k - back;
    return live[f] && window[f].is_first() && window[f].committed();
  };

  Report report;
  std::map<std::uint64_t, std::unique_ptr<backstore::BackingFile>> files;
  std::map<std::uint64_t, bool> failed;
  auto file_for = [&](std::uint64_t id) -> backstore::BackingFile* {
    if (auto it = files.find(id); it != files.end()) return it->second.get();
    if (failed.count(id) != 0) return nullptr;
    std::string path;
    try {
      path = log->lookup_path(id);
      backstore::OpenFlags fl;
      fl.write = true;
      auto f = store.open(path, fl);
      auto* raw = f.get();
      files.emplace(id, std::move(f));
      return raw;
    } catch (const std::exception&) {
      failed.emplace(id, true);
      ++report.files_failed;
      report.failed_paths.push_back(path.empty() ? "<slot " + std::to_string(id) + ">" : path);
      return nullptr;
    }
  };

  std::optional<std::uint64_t> last;
  std::vector<std::byte> buf(geo->entry_data_size);
  for (std::uint64_t k = 0; k < nb; ++k) {
    if (!live[k]) continue;
    last = tail + k;
    const wlog::EntryHeader& h = window[k];
    if (!committed(k) || h.length == 0 || h.length > geo->entry_data_size || h.file_id >= geo->fd_max) {
      ++report.entries_ignored;
      continue;
    }
    backstore::BackingFile* f = file_for(h.file_id);
    if (f == nullptr) {
      ++report.entries_ignored;
      continue;
    }
    const auto payload = std::span(buf).first(h.length);
    log->read_payload(tail + k, payload);
    f->pwrite(h.offset, payload);
    ++report.entries_applied;
  }
  for (auto& [id, f] : files) f->sync();
  report.files_recovered = files.size();
  files.clear();

  // Empty the log. The tail moves past everything first, so a crash while
  // clearing leaves only out-of-window leftovers.
  if (last) {
    region.store_word(geo->tail_offset(), *last + 1);
    region.pwb(geo->tail_offset());
    region.psync();
  }
  for (std::uint64_t i = 0; i < nb; ++i) {
    const std::uint64_t off = geo->entry_offset(i) + wlog::kMetaField;
    if (region.load_word(off) == 0) continue;
    region.store_word(off, 0);
    region.pwb(off);
  }
  const std::byte zero{0};
  for (std::uint64_t id = 0; id < geo->fd_max; ++id) {
    const std::uint64_t off = geo->path_table_offset() + id * geo->path_max;
    std::byte first;
    region.load(off, std::span(&first, 1));
    if (first == zero) continue;
    region.store(off, std::span(&zero, 1));
    region.pwb(off);
  }
  region.psync();
  return report;
}

bool verify_clean(const pmem::Region& region) {
  std::optional<wlog::LogGeometry> geo;
  try {
    geo = wlog::read_header(region);
  } catch (const HeaderMismatch&) {
    return false;
  }
  if (!geo) return false;
  for (std::uint64_t i = 0; i < geo->nb_entries; ++i) {
    if (wlog::meta::in_use(region.load_word(geo->entry_offset(i) + wlog::kMetaField))) return false;
  }
  return true;
}

}  // namespace nvcache::recovery
