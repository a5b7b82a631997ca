#pragma once

#include <stdexcept>
#include <string>

namespace vismal {

/// Error classes surfaced by the library. The numeric value doubles as the
/// CLI exit code.
enum class ErrorCode : int {
  kIo = 2,
  kFormat = 3,
  kEmptyInput = 4,
  kConfig = 5,
  kImageTooSmall = 6,
  kShape = 7,
  kNumerics = 8,
  kLabel = 9,
  kEmptyDataset = 10,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define VISMAL_DEFINE_ERROR(Name, Code)                                   \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(ErrorCode::Code, what) {} \
  };

VISMAL_DEFINE_ERROR(IoError, kIo)
VISMAL_DEFINE_ERROR(FormatError, kFormat)
VISMAL_DEFINE_ERROR(EmptyInput, kEmptyInput)
VISMAL_DEFINE_ERROR(ConfigError, kConfig)
VISMAL_DEFINE_ERROR(ImageTooSmall, kImageTooSmall)
VISMAL_DEFINE_ERROR(ShapeError, kShape)
VISMAL_DEFINE_ERROR(NumericsError, kNumerics)
VISMAL_DEFINE_ERROR(LabelError, kLabel)
VISMAL_DEFINE_ERROR(EmptyDataset, kEmptyDataset)

#undef VISMAL_DEFINE_ERROR

}  // namespace vismal
