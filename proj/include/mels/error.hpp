#pragma once

#include <stdexcept>
#include <string>

namespace mels {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DesignError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised when a covariance matrix fails its Cholesky factorization.
/// Inside the sampler this is a rejected proposal, not a failure.
class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InitializationError : public Error {
 public:
  using Error::Error;
};

class UnsupportedModel : public Error {
 public:
  using Error::Error;
};

class ArchiveError : public Error {
 public:
  using Error::Error;
};

}  // namespace mels
