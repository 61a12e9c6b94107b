#pragma once

#include <stdexcept>
#include <string>

namespace seamless {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A tensor, image or mask does not satisfy a shape contract.
class ShapeError : public Error {
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

class DecodeError : public IoError {
 public:
  using IoError::IoError;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// An image whose mask file is expected but missing. stem() names it.
class OrphanImageError : public NotFoundError {
 public:
  OrphanImageError(const std::string& stem, const std::string& what) : NotFoundError(what), stem_(stem) {}
  const std::string& stem() const { return stem_; }

 private:
  std::string stem_;
};

/// Ground truth without foreground pixels; precision/recall style metrics are undefined.
class EmptyGroundTruthError : public Error {
 public:
  using Error::Error;
};

/// Raised by the training loop when the objective stops being finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace seamless
