#include <doctest.h>

#include <numeric>
#include <sstream>

#include "support/reference_clahe.hpp"
#include "vismal/clahe.hpp"
#include "vismal/error.hpp"
#include "vismal/random.hpp"

using namespace vismal;

namespace {

GrayImage random_image(std::size_t w, std::size_t h, std::uint64_t seed, int lo = 0, int hi = 255) {
  Rng rng(seed);
  GrayImage img(w, h);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(lo + uniform_index(rng, hi - lo + 1));
  return img;
}

Histogram random_histogram(Rng& rng, std::size_t levels = 256) {
  Histogram h{std::vector<std::uint64_t>(levels)};
  const auto peaks = uniform_index(rng, 6);
  for (auto& c : h.counts) c = uniform_index(rng, 12);
  for (std::uint64_t i = 0; i < peaks; ++i) h.counts[uniform_index(rng, levels)] += uniform_index(rng, 400);
  return h;
}

}  // namespace

TEST_CASE("divide_regions geometry") {
  ClaheParams p;
  SUBCASE("exact height split") {
    const auto grid = divide_regions(GrayImage(128, 391), p);
    CHECK(grid.cols == 4);
    CHECK(grid.rows == 23);
    // 391 = 23 * 17, so every region row is 17 high.
    for (std::size_t r = 0; r < grid.rows; ++r) CHECK(grid.rect(0, r).height() == 17);
  }
  SUBCASE("64 wide gives two columns") {
    CHECK(divide_regions(GrayImage(64, 468), p).cols == 2);
  }
  SUBCASE("minimal rows") {
    const auto grid = divide_regions(GrayImage(32, 23), p);
    CHECK(grid.cols == 1);
    CHECK(grid.rows == 23);
    CHECK(grid.rect(0, 5) == RegionRect{0, 5, 32, 6});
  }
  SUBCASE("remainders merge into the last region") {
    const auto grid = divide_regions(GrayImage(100, 50), p);
    CHECK(grid.cols == 3);
    CHECK(grid.rect(2, 0).width() == 36);
    CHECK(grid.rows == 23);
    CHECK(grid.rect(0, 0).height() == 2);
    CHECK(grid.rect(0, 22).height() == 50 - 22 * 2);
  }
  SUBCASE("short images fall back to one-pixel rows") {
    const auto grid = divide_regions(GrayImage(64, 5), p);
    CHECK(grid.rows == 5);
  }
  SUBCASE("too narrow") {
    CHECK_THROWS_AS(divide_regions(GrayImage(31, 100), p), ImageTooSmall);
  }
}

TEST_CASE("regions tile the image exactly") {
  Rng rng(1);
  ClaheParams p;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t w = 32 + uniform_index(rng, 1000);
    const std::size_t h = 1 + uniform_index(rng, 600);
    const auto grid = divide_regions(GrayImage(w, h), p);
    std::vector<int> cover(w * h, 0);
    for (std::size_t i = 0; i < grid.region_count(); ++i) {
      const auto r = grid.rect(i);
      for (std::size_t y = r.y0; y < r.y1; ++y)
        for (std::size_t x = r.x0; x < r.x1; ++x) ++cover[y * w + x];
    }
    CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("region_histogram counts values inside the rectangle") {
  GrayImage img(10, 1, 7);
  auto h = region_histogram(img, {0, 0, 10, 1});
  CHECK(h.counts[7] == 10);
  CHECK(h.total() == 10);

  GrayImage two(2, 2, std::vector<std::uint8_t>{0, 0, 1, 1});
  h = region_histogram(two, {0, 0, 2, 2});
  CHECK(h.counts[0] == 2);
  CHECK(h.counts[1] == 2);

  const auto rnd = random_image(64, 40, 3);
  CHECK(region_histogram(rnd, {32, 17, 64, 34}).total() == 544);
}

TEST_CASE("clip_histogram uniform redistribution") {
  const Histogram toy{{6, 1, 1}};
  const auto clipped = clip_histogram(toy, 4, ClipMode::kUniform);
  CHECK(clipped.counts == std::vector<std::uint64_t>{4, 2, 2});
  CHECK(clipped.counts == reference::clip_uniform(toy.counts, 4));

  const Histogram calm{{1, 2, 3}};
  CHECK(clip_histogram(calm, 4, ClipMode::kUniform).counts == calm.counts);

  // Overflow re-reaching the limit moves on to the next open bin.
  const Histogram crowded{{10, 3, 0, 0}};
  CHECK(clip_histogram(crowded, 4, ClipMode::kUniform).counts == std::vector<std::uint64_t>{4, 4, 3, 2});
}

TEST_CASE("clip_histogram properties over random histograms") {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const auto h = random_histogram(rng);
    const std::uint64_t limit = std::max<std::uint64_t>(1 + uniform_index(rng, 40), (h.total() + 255) / 256);
    const auto u = clip_histogram(h, limit, ClipMode::kUniform);
    CHECK(u.total() == h.total());
    CHECK(u.max_bin() <= limit);
    CHECK(u.counts == reference::clip_uniform(h.counts, limit));

    const auto r1 = clip_histogram(h, limit, ClipMode::kPaperRandom, 99 + trial);
    const auto r2 = clip_histogram(h, limit, ClipMode::kPaperRandom, 99 + trial);
    CHECK(r1.max_bin() <= limit);
    CHECK(r1.counts == r2.counts);
  }
}

TEST_CASE("effective clip limit") {
  ClaheParams p;
  // 32 x 17 region: floor(4 * 544 / 256) = 8.
  CHECK(effective_clip_limit(p, 544) == 8);
  CHECK(effective_clip_limit(p, 10) == 1);
  p.clip_limit_mode = ClipLimitMode::kRaw;
  CHECK(effective_clip_limit(p, 544) == 4);
  // Raw limit too small to hold every pixel is raised to ceil(N / L).
  CHECK(effective_clip_limit(p, 32 * 40) == 5);
}

TEST_CASE("he_mapping") {
  Histogram h{std::vector<std::uint64_t>(256, 0)};
  h.counts[0] = 2;
  h.counts[1] = 2;
  auto m = he_mapping(h);
  CHECK(m[0] == 0);
  CHECK(m[1] == 255);
  CHECK(m[200] == 255);

  Histogram flat{std::vector<std::uint64_t>(256, 0)};
  flat.counts[77] = 40;
  m = he_mapping(flat);
  CHECK(std::all_of(m.begin(), m.end(), [](auto v) { return v == 0; }));

  CHECK(cumulate(h)[0] == 2);
  CHECK(cumulate(h)[255] == 4);
}

TEST_CASE("he_mapping is non-decreasing and matches the direct formula") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = random_histogram(rng);
    const auto m = he_mapping(h);
    const auto ref = reference::mapping_from_counts(h.counts);
    for (std::size_t i = 0; i < m.size(); ++i) {
      CHECK(static_cast<int>(m[i]) == ref[i]);
      if (i) CHECK(m[i] >= m[i - 1]);
    }
  }
}

TEST_CASE("transform_image blend cases") {
  // 64 x 46 image, 2 x 2 grid of 32 x 23 regions with hand-built mappings.
  ClaheParams p;
  p.grid_b = 2;
  const auto img = random_image(64, 46, 12);
  RegionGrid grid = divide_regions(img, p);
  REQUIRE(grid.region_count() == 4);
  grid.mappings.assign(4, Mapping(256));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t v = 0; v < 256; ++v) {
      grid.mappings[r][v] = static_cast<std::uint8_t>(std::min<std::size_t>(255, (v * (r + 1)) / 2 + 10 * r));
    }
  }
  const auto out = transform_image(img, grid);

  SUBCASE("corner zone uses its own mapping") {
    CHECK(out.at(0, 0) == grid.mappings[0][img.at(0, 0)]);
    CHECK(out.at(63, 45) == grid.mappings[3][img.at(63, 45)]);
  }
  SUBCASE("naive per-pixel evaluation agrees everywhere") {
    // Centers: x = 15.5 and 47.5, y = 11 and 34.
    for (std::size_t y = 0; y < 46; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        const double cx0 = 15.5, cx1 = 47.5, cy0 = 11.0, cy1 = 34.0;
        const double wx = std::clamp((x - cx0) / (cx1 - cx0), 0.0, 1.0);
        const double wy = std::clamp((y - cy0) / (cy1 - cy0), 0.0, 1.0);
        const int v = img.at(x, y);
        const double top = (1 - wx) * grid.mappings[0][v] + wx * grid.mappings[1][v];
        const double bottom = (1 - wx) * grid.mappings[2][v] + wx * grid.mappings[3][v];
        const double value = (1 - wy) * top + wy * bottom;
        // Exact rational values never sit within 1e-9 of a .5 boundary unless
        // they are on it, so the float evaluation rounds the same way.
        CHECK(out.at(x, y) == static_cast<int>(std::floor(value + 0.5 + 1e-9)));
      }
    }
  }
}

TEST_CASE("transform_image constant mappings and centers") {
  ClaheParams p;
  p.grid_b = 2;
  const auto img = random_image(64, 46, 4);
  RegionGrid grid = divide_regions(img, p);
  grid.mappings.assign(4, Mapping(256, 200));
  const auto out = transform_image(img, grid);
  CHECK(std::all_of(out.pixels().begin(), out.pixels().end(), [](auto v) { return v == 200; }));
}

TEST_CASE("locality: edits stay out of distant corner zones") {
  ClaheParams p;
  const auto img = random_image(256, 230, 6);
  auto edited = img;
  // Change a block inside region (col 6, row 20).
  for (std::size_t y = 205; y < 215; ++y)
    for (std::size_t x = 200; x < 220; ++x) edited.at(x, y) = 0;
  const auto a = equalize(img, p);
  const auto b = equalize(edited, p);
  // Top-left corner zone of region (0, 0).
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 16; ++x) CHECK(a.at(x, y) == b.at(x, y));
}

TEST_CASE("resize") {
  const auto flat = resize(GrayImage(128, 128, 100), 64);
  CHECK(flat.width() == 64);
  CHECK(std::all_of(flat.pixels().begin(), flat.pixels().end(), [](auto v) { return v == 100; }));

  GrayImage two(2, 2, std::vector<std::uint8_t>{0, 0, 255, 255});
  CHECK(resize(two, 1).at(0, 0) == 128);  // 127.5 rounds half up

  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t w = 1 + uniform_index(rng, 200);
    const std::size_t h = 1 + uniform_index(rng, 200);
    const std::size_t s = 1 + uniform_index(rng, 80);
    const auto img = random_image(w, h, trial, 30, 220);
    const auto out = resize(img, s);
    const auto [lo, hi] = std::minmax_element(img.pixels().begin(), img.pixels().end());
    for (auto v : out.pixels()) {
      CHECK(v >= *lo);
      CHECK(v <= *hi);
    }
    CHECK(out == reference::resize(img, s));
  }
}

TEST_CASE("enhance") {
  ClaheParams p;
  const auto img = random_image(256, 391, 77);
  const auto once = enhance(img, p);
  CHECK(once.width() == 64);
  CHECK(once.height() == 64);
  CHECK(enhance(img, p) == once);
  CHECK(once == reference::enhance(img, p));

  const auto uniform = enhance(GrayImage(128, 300, 90), p);
  CHECK(std::all_of(uniform.pixels().begin(), uniform.pixels().end(), [](auto v) { return v == 0; }));

  p.clip_mode = ClipMode::kPaperRandom;
  CHECK(enhance(img, p) == enhance(img, p));

  CHECK_THROWS_AS(enhance(GrayImage(16, 16), ClaheParams{}), ImageTooSmall);
}

TEST_CASE("mapping CSV has one row of 256 values per region") {
  ClaheParams p;
  RegionGrid grid;
  equalize(random_image(64, 46, 1), p, &grid);
  std::ostringstream out;
  write_mapping_csv(grid, out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 255);
    ++rows;
  }
  CHECK(rows == grid.region_count());
}

TEST_CASE("params validation") {
  ClaheParams p;
  p.clip_limit = 0.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.grid_b = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.gray_levels = 128;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}
