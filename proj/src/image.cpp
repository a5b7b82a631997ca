#include "vismal/image.hpp"

#include <stdexcept>
#include <utility>

namespace vismal {

GrayImage::GrayImage(std::size_t width, std::size_t height, std::uint8_t fill)
    : width_(width), height_(height), pixels_(width * height, fill) {}

GrayImage::GrayImage(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (pixels_.size() != width_ * height_) {
    throw std::invalid_argument("GrayImage: pixel count does not match width * height");
  }
}

}  // namespace vismal
