#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vismal/image.hpp"

namespace vismal {

struct ByteStream {
  std::vector<std::uint8_t> bytes;
  std::string source_path;
  std::optional<std::string> family_label;
};

/// Reads a whole file. Throws IoError when unreadable and EmptyInput when the
/// file has no bytes.
ByteStream read_byte_stream(const std::filesystem::path& path,
                            std::optional<std::string> family_label = std::nullopt);

struct WidthBracket {
  std::uint64_t max_file_size_bytes;  // inclusive upper bound
  std::size_t width;
};

/// File-size brackets mapping to image width. Sizes above the last bound use
/// `overflow_width`.
struct WidthTable {
  std::vector<WidthBracket> brackets;
  std::size_t overflow_width = 1024;

  static WidthTable standard();
};

std::vector<std::uint8_t> bytes_to_pixels(std::span<const std::uint8_t> bytes);
inline std::vector<std::uint8_t> bytes_to_pixels(const ByteStream& stream) {
  return bytes_to_pixels(stream.bytes);
}

std::size_t select_width(std::uint64_t file_size_bytes,
                         const WidthTable& table = WidthTable::standard());

/// Lays pixels out row by row; the last row is zero-padded.
GrayImage reshape_to_image(std::span<const std::uint8_t> pixels, std::size_t width);

/// bytes_to_pixels + select_width + reshape_to_image.
GrayImage convert_bytes(std::span<const std::uint8_t> bytes,
                        const WidthTable& table = WidthTable::standard());

void write_png(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const GrayImage& img);
GrayImage decode_png(std::span<const std::uint8_t> data);

}  // namespace vismal
