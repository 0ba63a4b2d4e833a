#include "nvcache/cache.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <system_error>

#include "nvcache/errors.hpp"
#include "nvcache/pmem.hpp"

namespace nvcache {
namespace {

[[noreturn]] void fail(int err, const std::string& what) { throw std::system_error(err, std::generic_category(), what); }

void atomic_max(std::atomic<std::uint64_t>& a, std::uint64_t v) {
  std::uint64_t cur = a.load(std::memory_order_relaxed);
  while (cur < v && !a.compare_exchange_weak(cur, v, std::memory_order_acq_rel, std::memory_order_relaxed)) {
  }
}

}  // namespace

struct Cache::FileRecord {
  std::uint64_t dev = 0;
  std::uint64_t ino = 0;
  std::string path;
  std::atomic<std::uint64_t> size{0};
  std::unique_ptr<rcache::RadixTree> owned_tree;
  std::atomic<rcache::RadixTree*> tree{nullptr};
  std::vector<std::unique_ptr<backstore::BackingFile>> handles;  // kept alive while io may point at one
  std::atomic<backstore::BackingFile*> io{nullptr};
  bool writable = false;
  std::size_t refs = 0;
  std::atomic<std::uint64_t> last_end{0};
  std::mutex append_mu;
};

struct Cache::OpenedFile {
  int fd = -1;
  OpenMode mode;
  std::shared_ptr<FileRecord> rec;             // null for pass-through files
  std::unique_ptr<backstore::BackingFile> direct;  // pass-through only
  std::shared_mutex life;  // shared by operations, exclusive by close
  bool closed = false;
  std::mutex cursor_mu;
  std::uint64_t cursor = 0;
  std::atomic<std::uint64_t> last_end{0};
};

class Cache::Source final : public rcache::PageSource {
 public:
  Source(const Cache& cache, FileRecord& rec) : cache_(cache), rec_(rec) {}

  void read_backing_page(std::uint64_t page_no, std::span<std::byte> out) override {
    const std::size_t n = rec_.io.load(std::memory_order_acquire)->pread(page_no * cache_.page_size_, out);
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(n), out.end(), std::byte{0});
  }

  bool owns(std::uint64_t file_id) const override {
    return file_id < cache_.log_->geometry().fd_max &&
           cache_.slot_owner_[file_id].load(std::memory_order_acquire) == &rec_;
  }

 private:
  const Cache& cache_;
  FileRecord& rec_;
};

namespace {

/// Page atomic locks of one operation, taken in ascending page order.
class PageLocks {
 public:
  PageLocks(std::vector<rcache::PageDescriptor*>& descs, const std::function<void(int, std::uint64_t)>& trace, int fd)
      : descs_(descs) {
    for (rcache::PageDescriptor* d : descs_) {
      d->atomic_lock.lock();
      ++held_;
      if (trace) trace(fd, d->page_no);
    }
  }
  ~PageLocks() {
    while (held_ > 0) descs_[--held_]->atomic_lock.unlock();
  }
  PageLocks(const PageLocks&) = delete;
  PageLocks& operator=(const PageLocks&) = delete;

 private:
  std::vector<rcache::PageDescriptor*>& descs_;
  std::size_t held_ = 0;
};

}  // namespace

Cache::Cache(pmem::Region& region, backstore::Backstore& store, CacheConfig config)
    : region_(region),
      store_(store),
      page_size_(config.page_size),
      rcache_(config.read_cache_pages, config.page_size) {
  const auto existing = wlog::read_header(region_);
  if (existing) {
    if (config.log && *config.log != *existing) throw HeaderMismatch("cache: log geometry differs from configuration");
    recovered_ = recovery::recover(region_, store_);
    log_ = wlog::WriteLog::attach(region_);
  } else {
    log_ = wlog::WriteLog::format(region_, config.log.value_or(wlog::LogGeometry{}));
  }
  const auto& geo = log_->geometry();
  segment_limit_ = std::min<std::uint64_t>(page_size_, geo.entry_data_size);
  fds_.resize(geo.fd_max);
  for (std::uint64_t i = geo.fd_max; i > 0; --i) free_slots_.push_back(static_cast<int>(i - 1));
  slot_owner_ = std::make_unique<std::atomic<FileRecord*>[]>(geo.fd_max);

  cleaner_ = std::make_unique<cleaner::Cleaner>(
      *log_, page_size_, [this](std::uint64_t id) { return resolve(id); }, config.batch, config.retry, &rcache_);
  log_->set_wait_timeout(config.log_wait_timeout);
  if (config.background_cleaner) {
    cleaner_->start();
  } else {
    log_->set_wait_handler([this] { cleaner_->step(true); });
  }
}

Cache::~Cache() {
  try {
    if (cleaner_->healthy()) cleaner_->drain_all();
  } catch (...) {
  }
  cleaner_->stop();
}

cleaner::Target Cache::resolve(std::uint64_t file_id) const {
  if (file_id >= log_->geometry().fd_max) return {};
  FileRecord* rec = slot_owner_[file_id].load(std::memory_order_acquire);
  if (rec == nullptr) return {};
  return {rec->io.load(std::memory_order_acquire), rec->tree.load(std::memory_order_acquire)};
}

std::shared_ptr<Cache::OpenedFile> Cache::handle(int fd) const {
  std::shared_lock g(fds_mu_);
  if (fd < 0 || static_cast<std::size_t>(fd) >= fds_.size() || !fds_[fd]) fail(EBADF, "bad file descriptor");
  return fds_[fd];
}

int Cache::allocate_slot() {
  std::unique_lock g(fds_mu_);
  if (free_slots_.empty()) fail(EMFILE, "path table full");
  const int fd = free_slots_.back();
  free_slots_.pop_back();
  return fd;
}

void Cache::free_slot(int fd) {
  std::unique_lock g(fds_mu_);
  free_slots_.push_back(fd);
}

int Cache::open(std::string_view path, OpenMode mode) {
  if (!mode.read && !mode.write) fail(EINVAL, "open needs read or write access");
  if ((mode.truncate || mode.append) && !mode.write) fail(EINVAL, "truncate/append need write access");
  auto of = std::make_shared<OpenedFile>();
  of->mode = mode;

  std::lock_guard files(files_mu_);
  const auto info = store_.stat(path);
  if (!info && !mode.create) fail(ENOENT, "open " + std::string(path));

  if (info && !info->regular) {
    backstore::OpenFlags fl{mode.read, mode.write, false, false};
    of->direct = store_.open(path, fl);
    of->fd = allocate_slot();
    std::unique_lock g(fds_mu_);
    fds_[of->fd] = of;
    return of->fd;
  }

  std::shared_ptr<FileRecord> rec;
  if (info) {
    const auto it = files_.find({info->dev, info->ino});
    if (it != files_.end()) rec = it->second;
  }
  if (rec && mode.truncate) fail(EBUSY, "truncate of a file with open descriptors");

  const int fd = allocate_slot();
  try {
    if (!rec) {
      backstore::OpenFlags fl{true, mode.write, mode.create, mode.truncate};
      auto backing = store_.open(path, fl);
      const auto bi = backing->info();
      rec = std::make_shared<FileRecord>();
      rec->dev = bi.dev;
      rec->ino = bi.ino;
      rec->path = std::string(path);
      rec->size.store(bi.size, std::memory_order_relaxed);
      rec->writable = mode.write;
      rec->io.store(backing.get(), std::memory_order_release);
      rec->handles.push_back(std::move(backing));
    } else if (mode.write && !rec->writable) {
      auto backing = store_.open(path, backstore::OpenFlags{true, true, false, false});
      rec->io.store(backing.get(), std::memory_order_release);
      rec->handles.push_back(std::move(backing));
      rec->writable = true;
    }
    if (mode.write && rec->tree.load(std::memory_order_acquire) == nullptr) {
      rec->owned_tree = std::make_unique<rcache::RadixTree>();
      rec->tree.store(rec->owned_tree.get(), std::memory_order_release);
    }
    if (mode.write) log_->bind_path(static_cast<std::uint64_t>(fd), path);
  } catch (...) {
    free_slot(fd);
    throw;
  }

  files_[{rec->dev, rec->ino}] = rec;
  ++rec->refs;
  slot_owner_[fd].store(rec.get(), std::memory_order_release);
  of->fd = fd;
  of->rec = std::move(rec);
  std::unique_lock g(fds_mu_);
  fds_[fd] = of;
  return fd;
}

void Cache::close(int fd) {
  std::shared_ptr<OpenedFile> of;
  {
    std::unique_lock g(fds_mu_);
    if (fd < 0 || static_cast<std::size_t>(fd) >= fds_.size() || !fds_[fd]) fail(EBADF, "bad file descriptor");
    of = std::move(fds_[fd]);
  }
  {
    std::unique_lock life(of->life);
    of->closed = true;
  }
  if (!of->rec) {
    of->direct.reset();
    free_slot(fd);
    return;
  }
  if (of->mode.write) {
    cleaner_->drain(of->last_end.load(std::memory_order_acquire));
    log_->release_path(static_cast<std::uint64_t>(fd));
  }
  slot_owner_[fd].store(nullptr, std::memory_order_release);
  {
    std::lock_guard files(files_mu_);
    FileRecord& rec = *of->rec;
    if (--rec.refs == 0) {
      files_.erase({rec.dev, rec.ino});
      if (rec.owned_tree) rcache_.lru.release_tree(*rec.owned_tree);
    }
  }
  free_slot(fd);
}

// -- data path -------------------------------------------------------------------

std::size_t Cache::read(int fd, std::span<std::byte> out) {
  auto of = handle(fd);
  std::shared_lock life(of->life);
  if (of->closed) fail(EBADF, "bad file descriptor");
  std::lock_guard c(of->cursor_mu);
  const std::size_t n = do_pread(*of, out, of->cursor);
  of->cursor += n;
  return n;
}

std::size_t Cache::pread(int fd, std::span<std::byte> out, std::uint64_t offset) {
  auto of = handle(fd);
  std::shared_lock life(of->life);
  if (of->closed) fail(EBADF, "bad file descriptor");
  return do_pread(*of, out, offset);
}

std::size_t Cache::write(int fd, std::span<const std::byte> bytes) {
  auto of = handle(fd);
  std::shared_lock life(of->life);
  if (of->closed) fail(EBADF, "bad file descriptor");
  std::lock_guard c(of->cursor_mu);
  if (of->mode.append && of->rec) {
    std::lock_guard a(of->rec->append_mu);
    const std::uint64_t at = of->rec->size.load(std::memory_order_acquire);
    const std::size_t n = do_pwrite(*of, bytes, at);
    of->cursor = at + n;
    return n;
  }
  const std::size_t n = do_pwrite(*of, bytes, of->cursor);
  of->cursor += n;
  return n;
}

std::size_t Cache::pwrite(int fd, std::span<const std::byte> bytes, std::uint64_t offset) {
  auto of = handle(fd);
  std::shared_lock life(of->life);
  if (of->closed) fail(EBADF, "bad file descriptor");
  return do_pwrite(*of, bytes, offset);
}

std::size_t Cache::do_pread(OpenedFile& of, std::span<std::byte> out, std::uint64_t offset) {
  if (!of.mode.read) fail(EBADF, "read on a write-only descriptor");
  if (!of.rec) return of.direct->pread(offset, out);
  FileRecord& rec = *of.rec;
  const std::uint64_t size = rec.size.load(std::memory_order_acquire);
  if (out.empty() || offset >= size) return 0;
  const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(out.size(), size - offset));
  const auto dst = out.first(n);
  if (rec.tree.load(std::memory_order_acquire) == nullptr) {
    // never opened for writing: nothing can be pending, go straight to the store
    const std::size_t got = rec.io.load(std::memory_order_acquire)->pread(offset, dst);
    std::fill(dst.begin() + static_cast<std::ptrdiff_t>(got), dst.end(), std::byte{0});
    return n;
  }
  read_pages(of, rec, dst, offset);
  return n;
}

void Cache::read_pages(OpenedFile& of, FileRecord& rec, std::span<std::byte> out, std::uint64_t offset) {
  rcache::ScopedRole role(rcache::Role::reader);
  rcache::RadixTree& tree = *rec.tree.load(std::memory_order_acquire);
  const std::size_t ps = page_size_;
  const std::uint64_t p0 = offset / ps;
  const std::uint64_t p1 = (offset + out.size() - 1) / ps;
  std::vector<rcache::PageDescriptor*> descs;
  descs.reserve(p1 - p0 + 1);
  for (std::uint64_t p = p0; p <= p1; ++p) descs.push_back(&tree.get_or_create(p));

  Source source(*this, rec);
  std::vector<std::byte> scratch;
  PageLocks locks(descs, lock_trace_, of.fd);
  for (std::size_t j = 0; j < descs.size(); ++j) {
    rcache::PageDescriptor& d = *descs[j];
    const std::uint64_t page_start = d.page_no * ps;
    const std::uint64_t lo = std::max(offset, page_start);
    const std::uint64_t hi = std::min<std::uint64_t>(offset + out.size(), page_start + ps);
    const std::byte* bytes = nullptr;
    if (rcache::PageContent* c = d.content.load(std::memory_order_acquire)) {
      d.accessed.store(true, std::memory_order_relaxed);
      bytes = c->data.get();
    } else {
      rcache::PageContent* fresh = rcache_.lru.acquire(rcache_);
      if (fresh == nullptr && scratch.empty()) scratch.resize(ps);
      if (d.dirty_counter.load(std::memory_order_acquire) > 0) {
        std::lock_guard cl(d.cleanup_lock);
        if (fresh != nullptr) {
          rcache::dirty_miss(rcache_, d, *fresh, source, *log_);
        } else {
          rcache::reconstruct(rcache_, d, scratch, source, *log_);
        }
      } else if (fresh != nullptr) {
        rcache::load_clean(rcache_, d, *fresh, source);
      } else {
        source.read_backing_page(d.page_no, scratch);
      }
      bytes = fresh != nullptr ? fresh->data.get() : scratch.data();
    }
    std::memcpy(out.data() + (lo - offset), bytes + (lo - page_start), hi - lo);
  }
}

std::size_t Cache::do_pwrite(OpenedFile& of, std::span<const std::byte> bytes, std::uint64_t offset) {
  if (!of.mode.write) fail(EBADF, "write on a read-only descriptor");
  if (!of.rec) {
    of.direct->pwrite(offset, bytes);
    return bytes.size();
  }
  if (bytes.empty()) return 0;
  rcache::ScopedRole role(rcache::Role::writer);
  FileRecord& rec = *of.rec;
  rcache::RadixTree& tree = *rec.tree.load(std::memory_order_acquire);
  const std::size_t ps = page_size_;
  const std::uint64_t end = offset + bytes.size();
  const std::uint64_t p0 = offset / ps;
  const std::uint64_t p1 = (end - 1) / ps;
  std::vector<rcache::PageDescriptor*> descs;
  descs.reserve(p1 - p0 + 1);
  for (std::uint64_t p = p0; p <= p1; ++p) descs.push_back(&tree.get_or_create(p));

  std::vector<wlog::Segment> segments;
  segments.reserve(log_->entries_for(offset, bytes.size()));
  std::vector<std::int64_t> per_page(descs.size(), 0);
  for (std::uint64_t at = offset; at < end;) {
    const std::uint64_t n = std::min(end - at, segment_limit_ - at % segment_limit_);
    segments.push_back({at, bytes.subspan(at - offset, n)});
    ++per_page[at / ps - p0];
    at += n;
  }

  PageLocks locks(descs, lock_trace_, of.fd);
  const std::uint64_t nb = log_->geometry().nb_entries;
  std::uint64_t last = 0;
  for (std::size_t i = 0; i < segments.size(); i += nb) {
    const std::size_t k = std::min<std::size_t>(nb, segments.size() - i);
    last = log_->append(static_cast<std::uint64_t>(of.fd), std::span(segments).subspan(i, k)) + k;
  }
  for (std::size_t j = 0; j < descs.size(); ++j) {
    rcache::PageDescriptor& d = *descs[j];
    const rcache::PageState before = d.state();
    d.dirty_counter.fetch_add(per_page[j], std::memory_order_acq_rel);
    rcache_.note(d.page_no, before, d.state());
    const std::uint64_t page_start = d.page_no * ps;
    const std::uint64_t lo = std::max(offset, page_start);
    const std::uint64_t hi = std::min<std::uint64_t>(end, page_start + ps);
    rcache::apply_write_to_loaded(d, lo - page_start, bytes.subspan(lo - offset, hi - lo));
  }
  atomic_max(rec.size, end);
  atomic_max(of.last_end, last);
  atomic_max(rec.last_end, last);
  return bytes.size();
}

// -- metadata ---------------------------------------------------------------------

std::uint64_t Cache::seek(int fd, std::int64_t delta, Whence whence) {
  auto of = handle(fd);
  std::shared_lock life(of->life);
  if (of->closed) fail(EBADF, "bad file descriptor");
  std::lock_guard c(of->cursor_mu);
  std::int64_t base = 0;
  switch (whence) {
    case Whence::set:
      base = 0;
      break;
    case Whence::cur:
      base = static_cast<std::int64_t>(of->cursor);
      break;
    case Whence::end:
      base = of->rec ? static_cast<std::int64_t>(of->rec->size.load(std::memory_order_acquire))
                     : static_cast<std::int64_t>(of->direct->info().size);
      break;
  }
  const std::int64_t target = base + delta;
  if (target < 0) fail(EINVAL, "seek before start of file");
  of->cursor = static_cast<std::uint64_t>(target);
  return of->cursor;
}

std::uint64_t Cache::tell(int fd) {
  auto of = handle(fd);
  std::lock_guard c(of->cursor_mu);
  return of->cursor;
}

FileStat Cache::stat(std::string_view path) {
  const auto info = store_.stat(path);
  if (!info) fail(ENOENT, "stat " + std::string(path));
  std::lock_guard files(files_mu_);
  const auto it = files_.find({info->dev, info->ino});
  if (it != files_.end()) return {info->dev, info->ino, it->second->size.load(std::memory_order_acquire), true};
  return {info->dev, info->ino, info->size, info->regular};
}

FileStat Cache::fstat(int fd) {
  auto of = handle(fd);
  if (!of->rec) {
    const auto bi = of->direct->info();
    return {bi.dev, bi.ino, bi.size, bi.regular};
  }
  return {of->rec->dev, of->rec->ino, of->rec->size.load(std::memory_order_acquire), true};
}

void Cache::fsync(int fd) { handle(fd); }

void Cache::flock(int fd, FlockOp op) {
  auto of = handle(fd);
  backstore::BackingFile* bf = of->rec ? of->rec->io.load(std::memory_order_acquire) : of->direct.get();
  if (op == FlockOp::unlock) {
    if (of->rec) cleaner_->drain(of->rec->last_end.load(std::memory_order_acquire));
    bf->unlock();
    return;
  }
  bf->lock(op == FlockOp::exclusive);
}

std::size_t Cache::open_files() const {
  std::lock_guard files(files_mu_);
  return files_.size();
}

bool Cache::has_page_tree(int fd) {
  auto of = handle(fd);
  return of->rec && of->rec->tree.load(std::memory_order_acquire) != nullptr;
}

// -- fopen family -------------------------------------------------------------------

Stream Cache::fopen(std::string_view path, std::string_view mode) {
  std::string m;
  for (const char ch : mode)
    if (ch != 'b') m.push_back(ch);
  OpenMode om;
  if (m == "r") {
    om = OpenMode::read_only();
  } else if (m == "r+") {
    om = OpenMode::read_write();
  } else if (m == "w") {
    om = {false, true, true, true, false};
  } else if (m == "w+") {
    om = {true, true, true, true, false};
  } else if (m == "a") {
    om = {false, true, true, false, true};
  } else if (m == "a+") {
    om = {true, true, true, false, true};
  } else {
    fail(EINVAL, "fopen mode '" + std::string(mode) + "'");
  }
  return Stream{open(path, om), false};
}

std::size_t Cache::fread(void* ptr, std::size_t size, std::size_t count, Stream& s) {
  if (size == 0 || count == 0) return 0;
  const std::size_t want = size * count;
  const std::size_t got = read(s.fd, std::span(static_cast<std::byte*>(ptr), want));
  if (got < want) s.eof = true;
  return got / size;
}

std::size_t Cache::fwrite(const void* ptr, std::size_t size, std::size_t count, Stream& s) {
  if (size == 0 || count == 0) return 0;
  return write(s.fd, std::span(static_cast<const std::byte*>(ptr), size * count)) / size;
}

int Cache::fseek(Stream& s, std::int64_t offset, Whence whence) {
  try {
    seek(s.fd, offset, whence);
  } catch (const std::system_error& e) {
    if (e.code().value() == EINVAL) return -1;
    throw;
  }
  s.eof = false;
  return 0;
}

std::int64_t Cache::ftell(Stream& s) { return static_cast<std::int64_t>(tell(s.fd)); }

int Cache::fclose(Stream& s) {
  close(s.fd);
  s.fd = -1;
  return 0;
}

}  // namespace nvcache
