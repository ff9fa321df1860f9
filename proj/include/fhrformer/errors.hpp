#pragma once

#include <stdexcept>
#include <string>

namespace fhrformer {

/// Malformed or unusable input data (bad CSV rows, empty splits, impossible
/// gap requests).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Internal invariant broken (e.g. a cycle in a computation record).
class DefectError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace fhrformer
