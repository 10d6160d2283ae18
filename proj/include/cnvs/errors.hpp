#pragma once

#include <stdexcept>
#include <string>

namespace cnvs {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (resolution not divisible by patch size, bad layout, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered in a training objective.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Attention layout change that the stitching schedule forbids.
class ScheduleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace cnvs
