#pragma once

#include <stdexcept>
#include <string>

namespace articfeed {

enum class Errc {
  CollinearPoints,
  LengthMismatch,
  EmptyMesh,
  DimensionMismatch,
  FormatError,
  IoError,
  NonFiniteObjective,
  EmptyTrace,
  DegenerateModel,
  NoVisibleCoils,
  ConnectionLost,
  ProtocolError,
  InsufficientReference,
  BiteCoilsMissing,
  NoBitePlane,
  NoReferencePose,
  OriginMissing,
  InvalidArgument,
  InvalidState,
};

const char* to_string(Errc code) noexcept;

// Single exception type for the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace articfeed
