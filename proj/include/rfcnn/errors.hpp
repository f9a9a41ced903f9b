#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rfcnn {

/// Base for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Batch norm needs at least two values per channel in train mode.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NoSolutionError : public Error {
 public:
  using Error::Error;
};

/// The gradient-support box of the probed neuron touches the input border.
class ClippedRfError : public Error {
 public:
  using Error::Error;
};

class UndefinedClassError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, dataset container, manifest or config.
class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::uint64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::uint64_t step() const noexcept { return step_; }

 private:
  std::uint64_t step_;
};

}  // namespace rfcnn
