#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "vismal/image.hpp"

namespace vismal {

enum class ClipMode {
  kUniform,      // count-preserving round-robin redistribution
  kPaperRandom,  // excess reassigned to seeded random bins
};

enum class ClipLimitMode {
  kNormalized,  // limit = clip_limit * region_pixels / L
  kRaw,         // limit = clip_limit
};

struct ClaheParams {
  std::size_t region_width = 32;
  std::size_t grid_b = 23;
  double clip_limit = 4.0;
  ClipLimitMode clip_limit_mode = ClipLimitMode::kNormalized;
  std::size_t gray_levels = 256;
  std::size_t target_size = 64;
  ClipMode clip_mode = ClipMode::kUniform;
  std::uint64_t seed = 0x5eed;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

struct Histogram {
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const noexcept;
  std::uint64_t max_bin() const noexcept;
  std::size_t occupied_levels() const noexcept;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct RegionRect {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  std::size_t width() const noexcept { return x1 - x0; }
  std::size_t height() const noexcept { return y1 - y0; }
  std::size_t pixel_count() const noexcept { return width() * height(); }
  friend bool operator==(const RegionRect&, const RegionRect&) = default;
};

using Mapping = std::vector<std::uint8_t>;

/// a x b tiling plus the per-region equalization state. Regions are stored
/// row-major: index = row * cols + col.
struct RegionGrid {
  std::size_t cols = 0;  // a
  std::size_t rows = 0;  // b
  std::vector<std::size_t> col_bounds;  // cols + 1 x-coordinates
  std::vector<std::size_t> row_bounds;  // rows + 1 y-coordinates
  std::vector<Histogram> histograms;
  std::vector<Histogram> clipped;
  std::vector<std::vector<std::uint64_t>> cdfs;
  std::vector<Mapping> mappings;

  std::size_t region_count() const noexcept { return cols * rows; }
  RegionRect rect(std::size_t col, std::size_t row) const;
  RegionRect rect(std::size_t index) const { return rect(index % cols, index / cols); }
};

/// Geometry only. Remainder columns/rows merge into the last region; images
/// with fewer than b rows use one-pixel-high regions.
RegionGrid divide_regions(const GrayImage& img, const ClaheParams& params);

Histogram region_histogram(const GrayImage& img, const RegionRect& rect,
                           std::size_t gray_levels = 256);

/// Bin cap actually applied to a region of `region_pixels` pixels. Never below
/// 1, and never below ceil(region_pixels / L) so a capped histogram can still
/// hold every pixel.
std::uint64_t effective_clip_limit(const ClaheParams& params, std::uint64_t region_pixels);

Histogram clip_histogram(const Histogram& hist, std::uint64_t limit, ClipMode mode,
                         std::uint64_t seed = 0);

/// Clip a region's histogram with the limit and per-region seed derived from
/// `params`.
Histogram clip_histogram(const Histogram& hist, const ClaheParams& params,
                         std::size_t region_index = 0);

/// Running sum of the counts.
std::vector<std::uint64_t> cumulate(const Histogram& hist);

/// Equalization table over the histogram's L levels; all zeros when only one
/// level is occupied.
Mapping he_mapping(const Histogram& clipped);

/// Fills histograms, clipped histograms, CDFs and mappings for every region.
/// A region holding a single intensity gets the all-zeros mapping.
void build_mappings(RegionGrid& grid, const GrayImage& img, const ClaheParams& params);

/// Applies the region mappings with spatial interpolation between region
/// centers: own mapping in the corner zones, linear blend along the borders,
/// bilinear blend inside.
GrayImage transform_image(const GrayImage& img, const RegionGrid& grid);

/// Area-average (box filter) resampling, round half up.
GrayImage resize(const GrayImage& img, std::size_t out_width, std::size_t out_height);
inline GrayImage resize(const GrayImage& img, std::size_t s) { return resize(img, s, s); }

/// Full equalization at the source resolution (no resize).
GrayImage equalize(const GrayImage& img, const ClaheParams& params, RegionGrid* grid_out = nullptr);

/// equalize followed by resize to target_size x target_size.
GrayImage enhance(const GrayImage& img, const ClaheParams& params);

/// One line per region (row-major region index), L comma-separated mapped values.
void write_mapping_csv(const RegionGrid& grid, std::ostream& out);

}  // namespace vismal
