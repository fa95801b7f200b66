#pragma once

// Synthetic paired scenes, boundary maps, (de)quantization and the
// netpbm codecs used for every image on disk.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fullglow/tensor.hpp"

namespace fullglow {

/// 8-bit planar image, C x H x W.
struct Image8 {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), data(c * h * w, 0) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  friend bool operator==(const Image8&, const Image8&) = default;
};

/// Row-major H x W integer grid (instance ids, boundary bits).
template <typename V>
struct Grid {
  std::size_t height = 0, width = 0;
  std::vector<V> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, V fill = V{}) : height(h), width(w), data(h * w, fill) {}

  V& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  V at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

using InstanceMap = Grid<std::uint16_t>;
using BoundaryMap = Grid<std::uint8_t>;

// Eight-class palette, Cityscapes-style colors.
enum class SceneClass : std::uint8_t { sky, road, building, vegetation, car, person, sign, sidewalk };
inline constexpr std::size_t kNumClasses = 8;
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kPalette = {{
    {70, 130, 180},   // sky
    {128, 64, 128},   // road
    {70, 70, 70},     // building
    {107, 142, 35},   // vegetation
    {0, 0, 142},      // car
    {220, 20, 60},    // person
    {220, 220, 0},    // sign
    {244, 35, 232},   // sidewalk
}};

struct PairedSample {
  Image8 seg;     // 3 x H x W, palette colors
  Image8 photo;   // 3 x H x W
  InstanceMap instance_ids;
  BoundaryMap boundary;
};

/// Deterministic scene for `seed`: sky/ground bands plus rectangles and discs.
/// `n_classes` limits the palette prefix in use (2..8).
PairedSample generate_scene(std::uint64_t seed, std::size_t size, std::size_t n_classes = kNumClasses);

/// 1 where any in-image 4-neighbor carries a different instance id.
BoundaryMap boundary_map(const InstanceMap& ids);

enum class BoundaryMode { bilinear, binary };

/// Averages factor x factor cells (center-aligned bilinear reduction); binary
/// mode maps every nonzero average to 1. `factor` must be a power of two
/// dividing both dimensions.
Grid<double> downsample_boundary(const Grid<double>& map, std::size_t factor, BoundaryMode mode);
Grid<double> to_real(const BoundaryMap& map);

/// y = (k + u) / 256 - 0.5 with u ~ U[0, 1). Output is 1 x C x H x W.
template <typename T>
Tensor<T> dequantize(const Image8& image, std::mt19937_64& rng);
/// Deterministic variant placing every value at its bin center (u = 0.5).
template <typename T>
Tensor<T> bin_centers(const Image8& image);
/// Inverse of dequantize for a single image (batch index `n`), clamped to [0, 255].
template <typename T>
Image8 quantize(const Tensor<T>& images, std::size_t n = 0);

/// Boundary map as a 1 x 1 x H x W tensor of {0, 1}.
template <typename T>
Tensor<T> boundary_tensor(const BoundaryMap& map);

// --- netpbm codecs ----------------------------------------------------------

/// Binary P6, maxval 255. Errors carry the byte offset of the problem.
Image8 read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image8& image);
Image8 decode_ppm(const std::string& bytes);
std::string encode_ppm(const Image8& image);

/// Binary P5 with 16-bit big-endian samples (maxval 65535). 8-bit P5 is also read.
InstanceMap read_pgm16(const std::filesystem::path& path);
void write_pgm16(const std::filesystem::path& path, const InstanceMap& ids);
InstanceMap decode_pgm16(const std::string& bytes);
std::string encode_pgm16(const InstanceMap& ids);

// --- dataset directory: <root>/pairs/<index>_{seg,photo}.ppm, <index>_inst.pgm

void write_dataset(const std::filesystem::path& root, const std::vector<PairedSample>& samples);
std::vector<PairedSample> read_dataset(const std::filesystem::path& root);

/// Treats each distinct color as one instance; used when no instance map is supplied.
InstanceMap instances_from_colors(const Image8& seg);

}  // namespace fullglow
