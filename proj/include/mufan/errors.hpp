#pragma once

#include <stdexcept>
#include <string>

namespace mufan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// tensor-core
class ShapeMismatch : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class InvalidConfig : public Error { using Error::Error; };
class OddChannelCount : public Error { using Error::Error; };
class NotScalar : public Error { using Error::Error; };
class DetachedTape : public Error { using Error::Error; };
class NondeterministicFunction : public Error { using Error::Error; };

// losses
class LabelOutOfRange : public Error { using Error::Error; };
class ZeroVector : public Error { using Error::Error; };
class MissingSnapshot : public Error { using Error::Error; };

// replay
class EmptyBuffer : public Error { using Error::Error; };
class InsufficientSamples : public Error { using Error::Error; };

// metrics
class IncompleteMatrix : public Error { using Error::Error; };

// config
class ConfigError : public Error {
 public:
  ConfigError(std::string key_path, const std::string& what)
      : Error(what), key_path_(std::move(key_path)) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

class ParseError : public ConfigError {
 public:
  ParseError(int line, const std::string& what)
      : ConfigError("", "line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class UnknownKey : public ConfigError {
 public:
  explicit UnknownKey(const std::string& path) : ConfigError(path, "unknown key '" + path + "'") {}
};

class InvalidValue : public ConfigError {
 public:
  InvalidValue(const std::string& path, const std::string& reason)
      : ConfigError(path, "invalid value for '" + path + "': " + reason) {}
};

}  // namespace mufan
