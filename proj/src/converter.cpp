#include "vismal/converter.hpp"

#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vismal/error.hpp"

namespace vismal {

ByteStream read_byte_stream(const std::filesystem::path& path,
                            std::optional<std::string> family_label) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  ByteStream stream;
  stream.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  if (stream.bytes.empty()) throw EmptyInput("empty file: " + path.string());
  stream.source_path = path.string();
  stream.family_label = std::move(family_label);
  return stream;
}

WidthTable WidthTable::standard() {
  constexpr std::uint64_t kKb = 1024;
  return WidthTable{{{10 * kKb, 32},
                     {30 * kKb, 64},
                     {60 * kKb, 128},
                     {100 * kKb, 256},
                     {200 * kKb, 384},
                     {500 * kKb, 512},
                     {1000 * kKb, 768}},
                    1024};
}

std::vector<std::uint8_t> bytes_to_pixels(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw EmptyInput("byte stream is empty");
  return {bytes.begin(), bytes.end()};
}

std::size_t select_width(std::uint64_t file_size_bytes, const WidthTable& table) {
  for (const auto& bracket : table.brackets) {
    if (file_size_bytes <= bracket.max_file_size_bytes) return bracket.width;
  }
  return table.overflow_width;
}

GrayImage reshape_to_image(std::span<const std::uint8_t> pixels, std::size_t width) {
  if (width == 0) throw ConfigError("reshape width must be positive");
  if (pixels.empty()) throw EmptyInput("no pixels to reshape");
  const std::size_t height = (pixels.size() + width - 1) / width;
  std::vector<std::uint8_t> buffer(width * height, 0);
  std::copy(pixels.begin(), pixels.end(), buffer.begin());
  return GrayImage(width, height, std::move(buffer));
}

GrayImage convert_bytes(std::span<const std::uint8_t> bytes, const WidthTable& table) {
  auto pixels = bytes_to_pixels(bytes);
  return reshape_to_image(pixels, select_width(pixels.size(), table));
}

// ---------------------------------------------------------------------------
// PNG codec (libpng, in-memory)

namespace {

// libpng reports errors by longjmp; the message is parked here and rethrown as
// FormatError once control is back in C++ frames.
struct PngErrorSink {
  char message[256] = {};
};

void png_error_fn(png_structp png, png_const_charp msg) {
  auto* sink = static_cast<PngErrorSink*>(png_get_error_ptr(png));
  std::snprintf(sink->message, sizeof(sink->message), "%s", msg ? msg : "libpng error");
  png_longjmp(png, 1);
}
void png_warning_fn(png_structp, png_const_charp) {}

void png_write_fn(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}
void png_flush_fn(png_structp) {}

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
};

void png_read_fn(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->size - cursor->offset < length) png_error(png, "truncated PNG");
  std::memcpy(out, cursor->data + cursor->offset, length);
  cursor->offset += length;
}

// Only trivially destructible locals live between setjmp and the libpng calls.
bool encode_rows(png_structp png, png_infop info, const GrayImage& img,
                 std::vector<std::uint8_t>* out) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_write_fn(png, out, png_write_fn, png_flush_fn);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height(); ++y) {
    png_write_row(png, const_cast<png_bytep>(img.row(y).data()));
  }
  png_write_end(png, nullptr);
  return true;
}

enum class HeaderStatus { kOk, kError, kUnsupported };

HeaderStatus decode_header(png_structp png, png_infop info, ReadCursor* cursor,
                           png_uint_32* width, png_uint_32* height) {
  if (setjmp(png_jmpbuf(png))) return HeaderStatus::kError;
  png_set_read_fn(png, cursor, png_read_fn);
  png_read_info(png, info);
  *width = png_get_image_width(png, info);
  *height = png_get_image_height(png, info);
  if (png_get_bit_depth(png, info) != 8 || png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
    return HeaderStatus::kUnsupported;
  }
  if (png_get_interlace_type(png, info) != PNG_INTERLACE_NONE) png_set_interlace_handling(png);
  png_read_update_info(png, info);
  return HeaderStatus::kOk;
}

bool decode_rows(png_structp png, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  return true;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  if (img.empty()) throw EmptyInput("cannot encode an empty image");
  PngErrorSink sink;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, png_error_fn, png_warning_fn);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<std::uint8_t> out;
  const bool ok = encode_rows(png, info, img, &out);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw IoError(std::string("PNG encode failed: ") + sink.message);
  return out;
}

GrayImage decode_png(std::span<const std::uint8_t> data) {
  if (data.size() < 8 || png_sig_cmp(data.data(), 0, 8) != 0) {
    throw FormatError("not a PNG file");
  }
  PngErrorSink sink;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &sink, png_error_fn, png_warning_fn);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  ReadCursor cursor{data.data(), data.size(), 0};
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  const auto status = decode_header(png, info, &cursor, &width, &height);
  if (status != HeaderStatus::kOk) {
    png_destroy_read_struct(&png, &info, nullptr);
    if (status == HeaderStatus::kUnsupported) {
      throw FormatError("expected an 8-bit single-channel grayscale PNG");
    }
    throw FormatError(std::string("PNG decode failed: ") + sink.message);
  }
  GrayImage img(width, height);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = img.row(y).data();
  const bool ok = decode_rows(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw FormatError(std::string("PNG decode failed: ") + sink.message);
  return img;
}

void write_png(const GrayImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

GrayImage read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (in.bad()) throw IoError("read failed: " + path.string());
  return decode_png(bytes);
}

}  // namespace vismal
