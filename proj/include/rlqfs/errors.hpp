#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rlqfs {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input data (JSONL records, dumps, corpora).
class DataError : public Error {
 public:
  using Error::Error;
};

class RewardError : public Error {
 public:
  using Error::Error;
};

// Binary container could not be decoded; `offset` is the byte position of
// the first field that failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace rlqfs
