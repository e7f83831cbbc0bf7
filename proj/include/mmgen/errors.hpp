#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmgen {

// Base for every error raised by the library. Subclasses mirror the failure
// categories callers are expected to distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OutOfVocab : public Error {
 public:
  using Error::Error;
};

class MalformedDocument : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t position, const std::string& what)
      : Error("parse error at " + std::to_string(position) + ": " + what),
        position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class LayoutError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class EmptyBatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace mmgen
