#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lopt {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or model dimensions that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-provided data: empty datasets, all-hidden masks, exhausted samplers.
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class UninitializedModelError : public Error {
 public:
  using Error::Error;
};

// Rank-deficient latent clouds handed to PCA.
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

// Finite-difference or grid oracle saw a non-finite sample.
class OracleError : public Error {
 public:
  using Error::Error;
};

// An optimization produced a non-finite or exploding loss. `where` is the step
// index for inference traces and the round id for training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t where)
      : Error(what), where_(where) {}

  std::size_t where() const noexcept { return where_; }

 private:
  std::size_t where_;
};

}  // namespace lopt
