#pragma once

#include <stdexcept>
#include <string>

namespace faultline {

// Each code maps to a distinct CLI exit status (see tools/faultline_main.cpp).
enum class ErrorCode {
  kShape = 10,
  kUnknownClass = 11,
  kInvalidArgument = 12,
  kMalformedHeader = 20,
  kTruncatedPayload = 21,
  kUnknownLabel = 22,
  kIo = 23,
  kDegenerateClustering = 30,
  kInseparable = 31,
  kEmptyClass = 32,
  kTooLarge = 40,
  kDialogExhausted = 50,
  kEmptyBuffer = 51,
  kNotFound = 60,
  kConflict = 61,
  kEmptySet = 70,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Thrown by fit_cav when the two sides cannot be told apart.
class InseparableError : public Error {
 public:
  explicit InseparableError(double accuracy)
      : Error(ErrorCode::kInseparable, "inseparable concept vs random activations"),
        accuracy_(accuracy) {}

  double accuracy() const noexcept { return accuracy_; }

 private:
  double accuracy_;
};

const char* error_code_name(ErrorCode code) noexcept;

}  // namespace faultline
