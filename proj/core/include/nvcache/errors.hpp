#pragma once

#include <stdexcept>
#include <string>

namespace nvcache {

/// The on-media log header is missing, corrupt, or from another format version.
class HeaderMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A writer waited longer than the configured bound for a free log entry.
class SaturationTimeout : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Internal bookkeeping disagrees with the log contents. Never recoverable.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The cleaner gave up propagating entries to the backing store.
class CleanerFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nvcache
