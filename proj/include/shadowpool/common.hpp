#pragma once

#include <stdexcept>
#include <string>

namespace shadowpool {

inline constexpr int kFormatVersion = 1;

// Error classes. Each maps to a distinct CLI exit code (see tools/).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatVersionError : ParseError {
  using ParseError::ParseError;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ResourceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InsufficientModelsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace shadowpool
