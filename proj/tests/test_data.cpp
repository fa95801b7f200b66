#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "fullglow/data.hpp"

using namespace fullglow;
namespace fs = std::filesystem;

namespace {

// Literal definition: a pixel is on a boundary if any in-image 4-neighbor differs.
BoundaryMap oracle_boundary(const InstanceMap& ids) {
  BoundaryMap out(ids.height, ids.width);
  const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
  for (int y = 0; y < static_cast<int>(ids.height); ++y)
    for (int x = 0; x < static_cast<int>(ids.width); ++x)
      for (int k = 0; k < 4; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || nx < 0 || ny >= static_cast<int>(ids.height) || nx >= static_cast<int>(ids.width)) continue;
        if (ids.at(ny, nx) != ids.at(y, x)) out.at(y, x) = 1;
      }
  return out;
}

std::string expect_format_error(const std::string& bytes, bool pgm) {
  try {
    if (pgm)
      decode_pgm16(bytes);
    else
      decode_ppm(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no FormatError";
  return {};
}

}  // namespace

TEST(Boundary, VerticalSplit) {
  InstanceMap ids(4, 4, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) ids.at(y, x) = 2;
  const auto b = boundary_map(ids);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(b.at(y, x), (x == 1 || x == 2) ? 1 : 0) << y << "," << x;
}

TEST(Boundary, SingleInteriorPixel) {
  InstanceMap ids(5, 5, 3);
  ids.at(2, 2) = 9;
  const auto b = boundary_map(ids);
  std::size_t ones = 0;
  for (auto v : b.data) ones += v;
  EXPECT_EQ(ones, 5u);
  EXPECT_EQ(b.at(2, 2), 1);
  EXPECT_EQ(b.at(1, 2), 1);
  EXPECT_EQ(b.at(1, 1), 0);  // diagonal neighbors do not count
}

TEST(Boundary, UniformMapHasNoBoundary) {
  const auto b = boundary_map(InstanceMap(3, 7, 4));
  for (auto v : b.data) EXPECT_EQ(v, 0);
}

TEST(Boundary, MatchesOracleOnRandomGrids) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng() % 12, w = 1 + rng() % 12, labels = 1 + rng() % 4;
    InstanceMap ids(h, w);
    for (auto& v : ids.data) v = static_cast<std::uint16_t>(rng() % labels);
    EXPECT_EQ(boundary_map(ids), oracle_boundary(ids));
    // Relabeling ids bijectively leaves the boundary unchanged.
    InstanceMap shifted = ids;
    for (auto& v : shifted.data) v = static_cast<std::uint16_t>(v * 7 + 100);
    EXPECT_EQ(boundary_map(shifted), boundary_map(ids));
  }
}

TEST(Boundary, DownsampleCheckerboard) {
  Grid<double> m(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) m.at(y, x) = (x + y) % 2;
  const auto bil = downsample_boundary(m, 2, BoundaryMode::bilinear);
  const auto bin = downsample_boundary(m, 2, BoundaryMode::binary);
  ASSERT_EQ(bil.height, 2u);
  for (double v : bil.data) EXPECT_DOUBLE_EQ(v, 0.5);
  for (double v : bin.data) EXPECT_DOUBLE_EQ(v, 1.0);
  const auto whole = downsample_boundary(m, 4, BoundaryMode::bilinear);
  EXPECT_DOUBLE_EQ(whole.at(0, 0), 0.5);
  EXPECT_THROW(downsample_boundary(m, 3, BoundaryMode::bilinear), UsageError);
}

TEST(Boundary, DownsampleSinglePixel) {
  Grid<double> m(4, 4);
  m.at(3, 0) = 1.0;
  const auto bil = downsample_boundary(m, 2, BoundaryMode::bilinear);
  EXPECT_DOUBLE_EQ(bil.at(1, 0), 0.25);
  EXPECT_DOUBLE_EQ(bil.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(downsample_boundary(m, 2, BoundaryMode::binary).at(1, 0), 1.0);
}

TEST(Quantization, DequantizeStaysInBin) {
  Image8 img(1, 16, 16);
  for (std::size_t i = 0; i < 256; ++i) img.data[i] = static_cast<std::uint8_t>(i);
  std::mt19937_64 rng(2);
  const auto x = dequantize<double>(img, rng);
  ASSERT_EQ(x.shape(), (Shape{1, 1, 16, 16}));
  for (std::size_t k = 0; k < 256; ++k) {
    EXPECT_GE(x[k], k / 256.0 - 0.5);
    EXPECT_LT(x[k], (k + 1) / 256.0 - 0.5);
  }
  EXPECT_EQ(quantize(x), img);
  EXPECT_EQ(quantize(bin_centers<float>(img)), img);
  EXPECT_DOUBLE_EQ(bin_centers<double>(img)[0], 0.5 / 256 - 0.5);
}

TEST(Quantization, ClampsOutOfRange) {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{-3.0, 3.0});
  const auto img = quantize(x);
  EXPECT_EQ(img.data[0], 0);
  EXPECT_EQ(img.data[1], 255);
}

TEST(Codecs, PpmRoundTrip) {
  Image8 img(3, 5, 7);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i * 37);
  const auto bytes = encode_ppm(img);
  EXPECT_EQ(bytes.rfind("P6\n7 5\n255\n", 0), 0u);
  EXPECT_EQ(decode_ppm(bytes), img);
  // Interleaved RGB on disk: first pixel is (R, G, B) of plane 0, 1, 2.
  const std::size_t header = std::string("P6\n7 5\n255\n").size();
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[header + 1]), img.at(1, 0, 0));
}

TEST(Codecs, PpmErrorsCarryOffsets) {
  EXPECT_NE(expect_format_error("P3\n1 1\n255\n", false).find("at byte 0"), std::string::npos);
  EXPECT_NE(expect_format_error("P6\n2 2\n255\nabc", false).find("at byte"), std::string::npos);
  EXPECT_NE(expect_format_error("P6\n2 2\n65535\n", false).find("at byte"), std::string::npos);
  EXPECT_NE(expect_format_error("P6\n# comment\n2 x\n255\n", false).find("at byte"), std::string::npos);
}

TEST(Codecs, PpmSkipsComments) {
  const std::string bytes = std::string("P6\n# made by hand\n1 1\n255\n") + "\x01\x02\x03";
  const auto img = decode_ppm(bytes);
  EXPECT_EQ(img.data, (std::vector<std::uint8_t>{1, 2, 3}));
}

TEST(Codecs, Pgm16RoundTripAndEightBit) {
  InstanceMap ids(3, 4);
  for (std::size_t i = 0; i < ids.data.size(); ++i) ids.data[i] = static_cast<std::uint16_t>(i * 4099);
  EXPECT_EQ(decode_pgm16(encode_pgm16(ids)), ids);
  const auto eight = decode_pgm16(std::string("P5\n2 1\n255\n") + "\x07\x09");
  EXPECT_EQ(eight.data, (std::vector<std::uint16_t>{7, 9}));
  EXPECT_NE(expect_format_error("P5\n2 1\n65535\n\x01", true).find("at byte"), std::string::npos);
}

TEST(Scenes, DeterministicAndPaletteOnly) {
  const auto a = generate_scene(42, 32), b = generate_scene(42, 32);
  EXPECT_EQ(a.seg, b.seg);
  EXPECT_EQ(a.photo, b.photo);
  std::set<std::array<std::uint8_t, 3>> palette(kPalette.begin(), kPalette.end());
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const std::array<std::uint8_t, 3> c{a.seg.at(0, y, x), a.seg.at(1, y, x), a.seg.at(2, y, x)};
      EXPECT_TRUE(palette.count(c));
    }
  EXPECT_EQ(a.boundary, boundary_map(a.instance_ids));
}

TEST(Scenes, SeedsGiveDistinctScenes) {
  std::set<std::vector<std::uint8_t>> segs;
  for (std::uint64_t s = 0; s < 100; ++s) segs.insert(generate_scene(s, 16).seg.data);
  EXPECT_EQ(segs.size(), 100u);
}

TEST(Scenes, ClassLimitRespected) {
  const auto s = generate_scene(3, 32, 2);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const std::array<std::uint8_t, 3> c{s.seg.at(0, y, x), s.seg.at(1, y, x), s.seg.at(2, y, x)};
      EXPECT_TRUE(c == kPalette[0] || c == kPalette[1]);
    }
  EXPECT_THROW(generate_scene(0, 32, 1), ConfigError);
  EXPECT_THROW(generate_scene(0, 4), ConfigError);
}

TEST(Scenes, InstancesFromColors) {
  const auto s = generate_scene(5, 16);
  const auto ids = instances_from_colors(s.seg);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x + 1 < 16; ++x) {
      const bool same_color = s.seg.at(0, y, x) == s.seg.at(0, y, x + 1) && s.seg.at(1, y, x) == s.seg.at(1, y, x + 1) &&
                              s.seg.at(2, y, x) == s.seg.at(2, y, x + 1);
      EXPECT_EQ(same_color, ids.at(y, x) == ids.at(y, x + 1));
    }
}

TEST(Dataset, WriteReadRoundTrip) {
  const fs::path root = fs::temp_directory_path() / "fullglow_test_dataset";
  fs::remove_all(root);
  std::vector<PairedSample> samples;
  for (std::uint64_t s = 0; s < 3; ++s) samples.push_back(generate_scene(s, 16));
  write_dataset(root, samples);
  const auto back = read_dataset(root);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].seg, samples[i].seg);
    EXPECT_EQ(back[i].photo, samples[i].photo);
    EXPECT_EQ(back[i].instance_ids, samples[i].instance_ids);
    EXPECT_EQ(back[i].boundary, samples[i].boundary);
  }
  fs::remove_all(root);
  EXPECT_THROW(read_dataset(root), IoError);
}
