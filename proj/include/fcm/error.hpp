#pragma once

#include <stdexcept>
#include <string>

namespace fcm {

// Malformed or out-of-contract input to an operation.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing or malformed files, configs and datasets.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A federation invariant was violated (e.g. a client trains a concept the
// shared architecture does not know about).
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace fcm
