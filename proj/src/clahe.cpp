#include "vismal/clahe.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "vismal/error.hpp"
#include "vismal/random.hpp"

namespace vismal {

void ClaheParams::validate() const {
  if (region_width < 1) throw ConfigError("region_width must be >= 1");
  if (grid_b < 1) throw ConfigError("grid_b must be >= 1");
  if (!(clip_limit >= 1.0) || !std::isfinite(clip_limit)) {
    throw ConfigError("clip_limit must be a finite value >= 1");
  }
  if (gray_levels != 256) throw ConfigError("gray_levels must be 256 for 8-bit images");
  if (target_size < 1) throw ConfigError("target_size must be >= 1");
}

std::uint64_t Histogram::total() const noexcept {
  std::uint64_t sum = 0;
  for (auto c : counts) sum += c;
  return sum;
}

std::uint64_t Histogram::max_bin() const noexcept {
  return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
}

std::size_t Histogram::occupied_levels() const noexcept {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto v) { return v != 0; }));
}

RegionRect RegionGrid::rect(std::size_t col, std::size_t row) const {
  return {col_bounds[col], row_bounds[row], col_bounds[col + 1], row_bounds[row + 1]};
}

namespace {

// Splits [0, extent) into `pieces` spans of `base` with the remainder merged
// into the last one.
std::vector<std::size_t> split_bounds(std::size_t extent, std::size_t pieces, std::size_t base) {
  std::vector<std::size_t> bounds(pieces + 1);
  for (std::size_t i = 0; i < pieces; ++i) bounds[i] = i * base;
  bounds[pieces] = extent;
  return bounds;
}

}  // namespace

RegionGrid divide_regions(const GrayImage& img, const ClaheParams& params) {
  params.validate();
  if (img.width() < params.region_width || img.height() == 0) {
    throw ImageTooSmall("image " + std::to_string(img.width()) + "x" +
                        std::to_string(img.height()) + " is narrower than one region (" +
                        std::to_string(params.region_width) + " px)");
  }
  RegionGrid grid;
  grid.cols = img.width() / params.region_width;
  grid.rows = std::min(params.grid_b, img.height());
  grid.col_bounds = split_bounds(img.width(), grid.cols, params.region_width);
  grid.row_bounds = split_bounds(img.height(), grid.rows, img.height() / grid.rows);
  return grid;
}

Histogram region_histogram(const GrayImage& img, const RegionRect& rect, std::size_t gray_levels) {
  Histogram hist{std::vector<std::uint64_t>(gray_levels, 0)};
  for (std::size_t y = rect.y0; y < rect.y1; ++y) {
    const auto row = img.row(y);
    for (std::size_t x = rect.x0; x < rect.x1; ++x) ++hist.counts[row[x]];
  }
  return hist;
}

std::uint64_t effective_clip_limit(const ClaheParams& params, std::uint64_t region_pixels) {
  const auto levels = static_cast<std::uint64_t>(params.gray_levels);
  std::uint64_t limit = 0;
  if (params.clip_limit_mode == ClipLimitMode::kNormalized) {
    limit = static_cast<std::uint64_t>(
        std::floor(params.clip_limit * static_cast<double>(region_pixels) / static_cast<double>(levels)));
  } else {
    limit = static_cast<std::uint64_t>(std::floor(params.clip_limit));
  }
  const std::uint64_t capacity_floor = (region_pixels + levels - 1) / levels;
  return std::max<std::uint64_t>({limit, capacity_floor, 1});
}

Histogram clip_histogram(const Histogram& hist, std::uint64_t limit, ClipMode mode,
                         std::uint64_t seed) {
  Histogram out = hist;
  auto& counts = out.counts;
  const std::size_t levels = counts.size();
  if (levels == 0 || limit == 0) return out;

  std::uint64_t excess = 0;
  for (auto& c : counts) {
    if (c > limit) {
      excess += c - limit;
      c = limit;
    }
  }
  if (excess == 0) return out;

  std::uint64_t room = 0;
  for (auto c : counts) room += limit - c;
  excess = std::min(excess, room);  // only reachable if limit * L < total

  if (mode == ClipMode::kUniform) {
    // Whole passes first, then a partial round-robin pass from bin 0.
    while (excess > 0) {
      std::uint64_t open = 0;
      for (auto c : counts) open += c < limit ? 1 : 0;
      if (excess >= open) {
        for (auto& c : counts) {
          if (c < limit) ++c;
        }
        excess -= open;
      } else {
        for (std::size_t i = 0; i < levels && excess > 0; ++i) {
          if (counts[i] < limit) {
            ++counts[i];
            --excess;
          }
        }
      }
    }
  } else {
    Rng rng(seed);
    while (excess > 0) {
      const auto bin = uniform_index(rng, levels);
      if (counts[bin] < limit) {
        ++counts[bin];
        --excess;
      }
    }
  }
  return out;
}

Histogram clip_histogram(const Histogram& hist, const ClaheParams& params,
                         std::size_t region_index) {
  return clip_histogram(hist, effective_clip_limit(params, hist.total()), params.clip_mode,
                        derive_seed(params.seed, region_index));
}

std::vector<std::uint64_t> cumulate(const Histogram& hist) {
  std::vector<std::uint64_t> cdf(hist.counts.size());
  std::uint64_t running = 0;
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    running += hist.counts[i];
    cdf[i] = running;
  }
  return cdf;
}

Mapping he_mapping(const Histogram& clipped) {
  const auto cdf = cumulate(clipped);
  Mapping map(cdf.size(), 0);
  if (cdf.empty()) return map;
  const std::uint64_t cdf_max = cdf.back();
  std::uint64_t cdf_min = 0;
  for (auto v : cdf) {
    if (v != 0) {
      cdf_min = v;
      break;
    }
  }
  if (cdf_max == cdf_min) return map;
  const std::uint64_t top = cdf.size() - 1;
  const std::uint64_t den = cdf_max - cdf_min;
  for (std::size_t x = 0; x < cdf.size(); ++x) {
    if (cdf[x] <= cdf_min) continue;  // at or below the first occupied level
    const std::uint64_t num = (cdf[x] - cdf_min) * top;
    map[x] = static_cast<std::uint8_t>((2 * num + den) / (2 * den));
  }
  return map;
}

void build_mappings(RegionGrid& grid, const GrayImage& img, const ClaheParams& params) {
  const std::size_t n = grid.region_count();
  grid.histograms.resize(n);
  grid.clipped.resize(n);
  grid.cdfs.resize(n);
  grid.mappings.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    grid.histograms[i] = region_histogram(img, grid.rect(i), params.gray_levels);
    grid.clipped[i] = clip_histogram(grid.histograms[i], params, i);
    grid.cdfs[i] = cumulate(grid.clipped[i]);
    if (grid.histograms[i].occupied_levels() <= 1) {
      grid.mappings[i] = Mapping(params.gray_levels, 0);  // flat region
    } else {
      grid.mappings[i] = he_mapping(grid.clipped[i]);
    }
  }
}

namespace {

// Interpolation anchor along one axis: the blend is
// ((den - num) * map[lo] + num * map[hi]) / den.
struct Anchor {
  std::uint32_t lo = 0;
  std::uint32_t hi = 0;
  std::int64_t num = 0;
  std::int64_t den = 1;
};

// Centers are kept doubled so they stay integral: 2c = start + end - 1.
std::vector<Anchor> axis_anchors(const std::vector<std::size_t>& bounds, std::size_t extent) {
  const std::size_t pieces = bounds.size() - 1;
  std::vector<std::int64_t> centers(pieces);
  for (std::size_t i = 0; i < pieces; ++i) {
    centers[i] = static_cast<std::int64_t>(bounds[i] + bounds[i + 1]) - 1;
  }
  std::vector<Anchor> anchors(extent);
  std::size_t j = 0;
  for (std::size_t p = 0; p < extent; ++p) {
    const auto pos = static_cast<std::int64_t>(2 * p);
    Anchor& a = anchors[p];
    if (pos <= centers.front()) {
      a = {0, 0, 0, 1};
    } else if (pos >= centers.back()) {
      const auto last = static_cast<std::uint32_t>(pieces - 1);
      a = {last, last, 0, 1};
    } else {
      while (centers[j + 1] <= pos) ++j;
      a = {static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(j + 1), pos - centers[j],
           centers[j + 1] - centers[j]};
    }
  }
  return anchors;
}

}  // namespace

GrayImage transform_image(const GrayImage& img, const RegionGrid& grid) {
  const auto xs = axis_anchors(grid.col_bounds, img.width());
  const auto ys = axis_anchors(grid.row_bounds, img.height());
  GrayImage out(img.width(), img.height());
  for (std::size_t y = 0; y < img.height(); ++y) {
    const Anchor& ay = ys[y];
    const auto src = img.row(y);
    auto dst = out.row(y);
    for (std::size_t x = 0; x < img.width(); ++x) {
      const Anchor& ax = xs[x];
      const std::size_t v = src[x];
      const auto& m00 = grid.mappings[ay.lo * grid.cols + ax.lo];
      const auto& m01 = grid.mappings[ay.lo * grid.cols + ax.hi];
      const auto& m10 = grid.mappings[ay.hi * grid.cols + ax.lo];
      const auto& m11 = grid.mappings[ay.hi * grid.cols + ax.hi];
      const std::int64_t upper = (ax.den - ax.num) * m00[v] + ax.num * m01[v];
      const std::int64_t lower = (ax.den - ax.num) * m10[v] + ax.num * m11[v];
      const std::int64_t num = (ay.den - ay.num) * upper + ay.num * lower;
      const std::int64_t den = ax.den * ay.den;
      dst[x] = static_cast<std::uint8_t>((2 * num + den) / (2 * den));
    }
  }
  return out;
}

GrayImage resize(const GrayImage& img, std::size_t out_width, std::size_t out_height) {
  if (img.empty()) throw EmptyInput("cannot resize an empty image");
  if (out_width == 0 || out_height == 0) throw ConfigError("resize target must be positive");
  const std::size_t w = img.width();
  const std::size_t h = img.height();

  // In coordinates scaled by the output size along each axis, source pixel i
  // spans [i * out, (i + 1) * out) and output pixel o spans [o * in, (o + 1) * in).
  struct Tap {
    std::size_t src;
    std::int64_t weight;
  };
  auto taps_for = [](std::size_t in, std::size_t out) {
    std::vector<std::vector<Tap>> taps(out);
    for (std::size_t o = 0; o < out; ++o) {
      const std::size_t lo = o * in;
      const std::size_t hi = (o + 1) * in;
      for (std::size_t i = lo / out; i * out < hi && i < in; ++i) {
        const std::size_t s0 = std::max(lo, i * out);
        const std::size_t s1 = std::min(hi, (i + 1) * out);
        if (s1 > s0) taps[o].push_back({i, static_cast<std::int64_t>(s1 - s0)});
      }
    }
    return taps;
  };
  const auto xtaps = taps_for(w, out_width);
  const auto ytaps = taps_for(h, out_height);

  std::vector<std::int64_t> rows(h * out_width, 0);
  for (std::size_t y = 0; y < h; ++y) {
    const auto src = img.row(y);
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      std::int64_t acc = 0;
      for (const auto& t : xtaps[ox]) acc += t.weight * src[t.src];
      rows[y * out_width + ox] = acc;
    }
  }
  const auto den = static_cast<std::int64_t>(w * h);
  GrayImage out(out_width, out_height);
  for (std::size_t oy = 0; oy < out_height; ++oy) {
    auto dst = out.row(oy);
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      std::int64_t acc = 0;
      for (const auto& t : ytaps[oy]) acc += t.weight * rows[t.src * out_width + ox];
      dst[ox] = static_cast<std::uint8_t>(std::min<std::int64_t>((2 * acc + den) / (2 * den), 255));
    }
  }
  return out;
}

GrayImage equalize(const GrayImage& img, const ClaheParams& params, RegionGrid* grid_out) {
  RegionGrid grid = divide_regions(img, params);
  build_mappings(grid, img, params);
  GrayImage out = transform_image(img, grid);
  if (grid_out) *grid_out = std::move(grid);
  return out;
}

GrayImage enhance(const GrayImage& img, const ClaheParams& params) {
  return resize(equalize(img, params), params.target_size);
}

void write_mapping_csv(const RegionGrid& grid, std::ostream& out) {
  for (const auto& map : grid.mappings) {
    for (std::size_t i = 0; i < map.size(); ++i) {
      if (i) out << ',';
      out << static_cast<unsigned>(map[i]);
    }
    out << '\n';
  }
}

}  // namespace vismal
