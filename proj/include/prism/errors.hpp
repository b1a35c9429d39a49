#pragma once

#include <stdexcept>
#include <string>

namespace prism {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

/// Any failure of a collective transport.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Raised when collective participants disagree on the payload contract.
class ProtocolError : public TransportError {
 public:
  using TransportError::TransportError;
};

/// Raised when a collective can never complete (a participant left or
/// exceeded the virtual-time timeout without arriving).
class DeadlockError : public TransportError {
 public:
  using TransportError::TransportError;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class PolicyError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace prism
