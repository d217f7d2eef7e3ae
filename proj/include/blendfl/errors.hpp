#pragma once

#include <stdexcept>
#include <string>

namespace blendfl {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BLENDFL_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

BLENDFL_DEFINE_ERROR(ShapeError)
BLENDFL_DEFINE_ERROR(TraceError)
BLENDFL_DEFINE_ERROR(NumericError)
BLENDFL_DEFINE_ERROR(DataError)
BLENDFL_DEFINE_ERROR(PartitionError)
BLENDFL_DEFINE_ERROR(IntegrityError)
BLENDFL_DEFINE_ERROR(StratificationError)
BLENDFL_DEFINE_ERROR(ProtocolError)
BLENDFL_DEFINE_ERROR(AlignmentError)
BLENDFL_DEFINE_ERROR(AggregationError)
BLENDFL_DEFINE_ERROR(MetricError)
BLENDFL_DEFINE_ERROR(EvaluationError)
BLENDFL_DEFINE_ERROR(CapabilityError)
BLENDFL_DEFINE_ERROR(CheckpointError)
BLENDFL_DEFINE_ERROR(RunError)

#undef BLENDFL_DEFINE_ERROR

/// Configuration error anchored to a line of the source file (1-based, 0 if unknown).
class ConfigError : public Error {
 public:
  ConfigError(int line, const std::string& field, const std::string& what)
      : Error(format(line, field, what)), line_(line), field_(field) {}

  int line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  static std::string format(int line, const std::string& field, const std::string& what) {
    std::string out = "line " + std::to_string(line) + ": ";
    if (!field.empty()) out += field + ": ";
    return out + what;
  }

  int line_;
  std::string field_;
};

}  // namespace blendfl
