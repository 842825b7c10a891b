#pragma once

#include <stdexcept>
#include <string>

namespace recycle {

/// Input failed a precondition (bad config, out-of-range label, ...).
/// The CLI maps this family to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape mismatch. Carries the name of the offending axis.
class DimensionError : public ValidationError {
 public:
  DimensionError(std::string op, std::string axis, std::size_t expected, std::size_t actual)
      : ValidationError(op + ": dimension mismatch on axis '" + axis + "' (expected " +
                        std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
        axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

inline void require(bool cond, const std::string& message) {
  if (!cond) throw ValidationError(message);
}

}  // namespace recycle
