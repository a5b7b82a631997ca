#include "vismal/error.hpp"

namespace vismal {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kFormat: return "FormatError";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kConfig: return "ConfigError";
    case ErrorCode::kImageTooSmall: return "ImageTooSmall";
    case ErrorCode::kShape: return "ShapeError";
    case ErrorCode::kNumerics: return "NumericsError";
    case ErrorCode::kLabel: return "LabelError";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
  }
  return "Error";
}

}  // namespace vismal
