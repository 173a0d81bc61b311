#pragma once

#include <stdexcept>
#include <string>

namespace pscdet {

// Bad user-supplied input: CSV rows, generator specs, configs, labels.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatches, non-finite values, and misuse of the numeric stack.
class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or corrupt checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Remote ranking backend failures (transport, protocol, exhausted retries).
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A rank response that could not be turned into scores; retried upstream.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pscdet
