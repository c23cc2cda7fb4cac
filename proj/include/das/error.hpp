#pragma once

#include <stdexcept>
#include <string>

namespace das {

/// Base of every error raised by the engine. `kind()` is a stable short tag
/// the CLI maps to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

#define DAS_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(what) {}          \
    const char* kind() const noexcept override { return tag; }       \
  };

DAS_DEFINE_ERROR(ShapeError, "shape")
DAS_DEFINE_ERROR(ParameterError, "parameter")
DAS_DEFINE_ERROR(NumericError, "numeric")
DAS_DEFINE_ERROR(InputError, "input")
DAS_DEFINE_ERROR(CapacityError, "capacity")
DAS_DEFINE_ERROR(VocabularyError, "vocabulary")
DAS_DEFINE_ERROR(ConfigError, "config")
DAS_DEFINE_ERROR(CorrectnessError, "correctness")
DAS_DEFINE_ERROR(TrainingError, "training")
DAS_DEFINE_ERROR(InvariantError, "invariant")
DAS_DEFINE_ERROR(IoError, "io")

#undef DAS_DEFINE_ERROR

}  // namespace das
