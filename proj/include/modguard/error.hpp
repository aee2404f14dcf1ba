#pragma once

#include <stdexcept>
#include <string>

namespace modguard {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor or feature dimensions that do not chain.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Precondition on an argument violated (bad config, invalid budget, ...).
class InvalidArgument : public Error {
public:
  using Error::Error;
};

/// A gradient or objective became NaN/inf during an iterative procedure.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Binary file problems. Each failure mode has its own type so callers can
/// tell a foreign file from a cut-off download.
class FormatError : public Error {
public:
  using Error::Error;
};

class MalformedHeaderError : public FormatError {
public:
  using FormatError::FormatError;
};

class TruncatedPayloadError : public FormatError {
public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
public:
  using FormatError::FormatError;
};

class IoError : public Error {
public:
  using Error::Error;
};

} // namespace modguard
