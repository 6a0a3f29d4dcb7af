#pragma once

#include <stdexcept>
#include <string>

namespace orthorank {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model, plan, or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent checkpoint on disk.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Bad arguments to an operation (empty input, short corpus, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

// A cache or trace that does not match the model it is used with.
class StateError : public Error {
 public:
  using Error::Error;
};

// Mathematically undefined input (e.g. the direction of a zero vector).
class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace orthorank
