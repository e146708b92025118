#pragma once

#include <stdexcept>
#include <string>

namespace mmf {

// Invalid model/data configuration: shape preconditions, bad specs, unknown keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad runtime input: wrong tensor shapes, out-of-range labels, missing files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward on a non-scalar or on an already consumed graph.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf detected in values or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmf
