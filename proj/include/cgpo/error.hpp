#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cgpo {

// Failure classes map onto CLI exit codes (config = 2, IO = 3, numeric = 4).
enum class ErrorKind {
  Config,
  UnknownCharacter,
  ContextOverflow,
  EmptySegment,
  EmptyCalibrationSet,
  Io,
  FingerprintMismatch,
  CorruptCheckpoint,
  DivergenceDetected,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::UnknownCharacter: return "UnknownCharacter";
    case ErrorKind::ContextOverflow: return "ContextOverflow";
    case ErrorKind::EmptySegment: return "EmptySegment";
    case ErrorKind::EmptyCalibrationSet: return "EmptyCalibrationSet";
    case ErrorKind::Io: return "IoFailure";
    case ErrorKind::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::DivergenceDetected: return "DivergenceDetected";
  }
  return "Unknown";
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::CorruptCheckpoint:
    case ErrorKind::FingerprintMismatch:
      return 3;
    case ErrorKind::DivergenceDetected:
      return 4;
    default:
      return 2;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class UnknownCharacterError : public Error {
 public:
  UnknownCharacterError(std::size_t position, char ch)
      : Error(ErrorKind::UnknownCharacter,
              "unknown character at position " + std::to_string(position) +
                  " (byte 0x" + hex_byte(ch) + ")"),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  static std::string hex_byte(char ch) {
    static const char* digits = "0123456789abcdef";
    const auto b = static_cast<unsigned char>(ch);
    return {digits[b >> 4], digits[b & 0xf]};
  }

  std::size_t position_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace cgpo
