#include "fullglow/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

namespace fullglow {

namespace {

// Photo-side base colors; deliberately not the segmentation colors.
constexpr std::array<std::array<double, 3>, kNumClasses> kPhotoBase = {{
    {150, 190, 235},  // sky
    {85, 85, 90},     // road
    {140, 110, 90},   // building
    {50, 120, 45},    // vegetation
    {190, 40, 40},    // car
    {230, 180, 140},  // person
    {240, 200, 30},   // sign
    {170, 160, 150},  // sidewalk
}};

double texture(SceneClass cls, std::size_t y, std::size_t x, std::size_t horizon, std::size_t size) {
  const double fy = static_cast<double>(y), fx = static_cast<double>(x);
  switch (cls) {
    case SceneClass::sky:
      return 30.0 * fy / std::max<double>(1.0, static_cast<double>(horizon));
    case SceneClass::road:
      return 10.0 * std::sin(0.9 * fx) * (fy / static_cast<double>(size));
    case SceneClass::building:
      return (x % 4 < 2 && y % 4 < 2) ? -30.0 : 0.0;
    case SceneClass::vegetation:
      return 15.0 * std::sin(1.3 * fx) * std::cos(1.1 * fy);
    case SceneClass::car:
      return (y % 5 == 0) ? 25.0 : 0.0;
    case SceneClass::person:
      return -12.0 * std::cos(0.7 * fy);
    case SceneClass::sign:
      return ((x + y) % 3 == 0) ? -20.0 : 0.0;
    case SceneClass::sidewalk:
      return (x % 6 == 0) ? -18.0 : 0.0;
  }
  return 0.0;
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Cursor over a netpbm byte stream.
class PnmReader {
 public:
  explicit PnmReader(const std::string& bytes) : bytes_(bytes) {}
  std::size_t position() const { return pos_; }

  void expect_magic(const char* magic) {
    if (bytes_.size() < 2 || bytes_.compare(0, 2, magic) != 0) fail(0, std::string("expected magic ") + magic);
    pos_ = 2;
  }

  std::size_t next_number() {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (v > (1u << 24)) fail(start, "header value too large");
      ++pos_;
    }
    if (pos_ == start) fail(start, pos_ >= bytes_.size() ? "truncated header" : "expected a decimal number");
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      fail(pos_, "expected whitespace before raster");
    }
    return pos_ + 1;
  }

  [[noreturn]] void fail(std::size_t offset, const std::string& what) const {
    throw FormatError("netpbm: " + what + " at byte " + std::to_string(offset));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

PairedSample generate_scene(std::uint64_t seed, std::size_t size, std::size_t n_classes) {
  if (size < 8) throw ConfigError("generate_scene: size " + std::to_string(size) + " is too small for any object");
  if (n_classes < 2 || n_classes > kNumClasses) throw ConfigError("generate_scene: n_classes must be in [2, 8]");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  Grid<std::uint8_t> classes(size, size);
  InstanceMap ids(size, size);

  const auto horizon = static_cast<std::size_t>(static_cast<double>(size) * (0.35 + 0.2 * unit(rng)));
  const bool sidewalk = n_classes >= 8;
  const std::size_t walk_end = sidewalk ? std::min(size, horizon + std::max<std::size_t>(1, size / 8)) : horizon;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      SceneClass c = y < horizon ? SceneClass::sky : (y < walk_end ? SceneClass::sidewalk : SceneClass::road);
      classes.at(y, x) = static_cast<std::uint8_t>(c);
      ids.at(y, x) = static_cast<std::uint16_t>(c == SceneClass::sky ? 1 : (c == SceneClass::sidewalk ? 3 : 2));
    }

  // Object classes: building .. sign, limited by the palette prefix.
  const std::size_t first_object = 2;
  const std::size_t last_object = std::min<std::size_t>(n_classes, 7) - 1;
  std::uint16_t next_id = 4;
  const std::size_t n_objects = last_object >= first_object ? uniform_int(2, 5) : 0;
  for (std::size_t o = 0; o < n_objects; ++o) {
    const auto cls = static_cast<std::uint8_t>(uniform_int(first_object, last_object));
    const std::uint16_t id = next_id++;
    if (unit(rng) < 0.6) {
      const std::size_t w = uniform_int(size / 8, size / 2), h = uniform_int(size / 8, size / 2);
      const std::size_t x0 = uniform_int(0, size - w), y0 = uniform_int(0, size - h);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) {
          classes.at(y, x) = cls;
          ids.at(y, x) = id;
        }
    } else {
      const double r = static_cast<double>(uniform_int(std::max<std::size_t>(1, size / 10), size / 4));
      const double cx = unit(rng) * static_cast<double>(size), cy = unit(rng) * static_cast<double>(size);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
          if (dx * dx + dy * dy <= r * r) {
            classes.at(y, x) = cls;
            ids.at(y, x) = id;
          }
        }
    }
  }

  // Per-instance tint so same-class neighbors differ in the photo.
  std::map<std::uint16_t, std::array<double, 3>> tint;
  for (std::uint16_t id = 1; id < next_id; ++id)
    tint[id] = {18.0 * (2 * unit(rng) - 1), 18.0 * (2 * unit(rng) - 1), 18.0 * (2 * unit(rng) - 1)};

  PairedSample s;
  s.seg = Image8(3, size, size);
  s.photo = Image8(3, size, size);
  std::normal_distribution<double> noise(0.0, 2.5);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const auto cls = static_cast<SceneClass>(classes.at(y, x));
      const auto ci = static_cast<std::size_t>(cls);
      const double tex = texture(cls, y, x, horizon, size);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        s.seg.at(ch, y, x) = kPalette[ci][ch];
        s.photo.at(ch, y, x) = clamp_byte(kPhotoBase[ci][ch] + tint[ids.at(y, x)][ch] + tex + noise(rng));
      }
    }
  s.instance_ids = std::move(ids);
  s.boundary = boundary_map(s.instance_ids);
  return s;
}

BoundaryMap boundary_map(const InstanceMap& ids) {
  BoundaryMap out(ids.height, ids.width);
  for (std::size_t y = 0; y < ids.height; ++y)
    for (std::size_t x = 0; x < ids.width; ++x) {
      const auto id = ids.at(y, x);
      const bool edge = (y > 0 && ids.at(y - 1, x) != id) || (y + 1 < ids.height && ids.at(y + 1, x) != id) ||
                        (x > 0 && ids.at(y, x - 1) != id) || (x + 1 < ids.width && ids.at(y, x + 1) != id);
      out.at(y, x) = edge ? 1 : 0;
    }
  return out;
}

Grid<double> to_real(const BoundaryMap& map) {
  Grid<double> out(map.height, map.width);
  std::copy(map.data.begin(), map.data.end(), out.data.begin());
  return out;
}

Grid<double> downsample_boundary(const Grid<double>& map, std::size_t factor, BoundaryMode mode) {
  if (factor == 0 || (factor & (factor - 1)) != 0 || map.height % factor || map.width % factor) {
    throw UsageError("downsample_boundary: factor " + std::to_string(factor) + " must be a power of two dividing " +
                     std::to_string(map.height) + "x" + std::to_string(map.width));
  }
  Grid<double> out(map.height / factor, map.width / factor);
  const double cell = static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      double s = 0.0;
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) s += map.at(y * factor + dy, x * factor + dx);
      const double avg = s / cell;
      out.at(y, x) = mode == BoundaryMode::binary ? (avg > 0.0 ? 1.0 : 0.0) : avg;
    }
  return out;
}

template <typename T>
Tensor<T> dequantize(const Image8& image, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor<T> out(Shape{1, image.channels, image.height, image.width});
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double k = image.data[i];
    T y = static_cast<T>((k + unit(rng)) / 256.0 - 0.5);
    // Rounding to T can land exactly on the next bin's lower edge; step back inside.
    while (std::floor((static_cast<double>(y) + 0.5) * 256.0) > k) y = std::nextafter(y, T(-1));
    out[i] = y;
  }
  return out;
}

template <typename T>
Tensor<T> bin_centers(const Image8& image) {
  Tensor<T> out(Shape{1, image.channels, image.height, image.width});
  for (std::size_t i = 0; i < image.data.size(); ++i) out[i] = static_cast<T>((image.data[i] + 0.5) / 256.0 - 0.5);
  return out;
}

template <typename T>
Image8 quantize(const Tensor<T>& images, std::size_t n) {
  if (images.rank() != 4 || n >= images.dim(0)) throw UsageError("quantize: expected N x C x H x W and valid index");
  Image8 out(images.dim(1), images.dim(2), images.dim(3));
  const std::size_t per = out.data.size();
  for (std::size_t i = 0; i < per; ++i) {
    const double k = std::floor((static_cast<double>(images[n * per + i]) + 0.5) * 256.0);
    out.data[i] = static_cast<std::uint8_t>(std::clamp(k, 0.0, 255.0));
  }
  return out;
}

template <typename T>
Tensor<T> boundary_tensor(const BoundaryMap& map) {
  Tensor<T> out(Shape{1, 1, map.height, map.width});
  for (std::size_t i = 0; i < map.data.size(); ++i) out[i] = static_cast<T>(map.data[i]);
  return out;
}

Image8 decode_ppm(const std::string& bytes) {
  PnmReader r(bytes);
  r.expect_magic("P6");
  const std::size_t w = r.next_number();
  const std::size_t h = r.next_number();
  const std::size_t maxval = r.next_number();
  if (w == 0 || h == 0) r.fail(2, "zero image dimension");
  if (maxval != 255) r.fail(r.position(), "unsupported max value " + std::to_string(maxval));
  const std::size_t start = r.raster_start();
  const std::size_t need = 3 * w * h;
  if (bytes.size() < start + need) {
    r.fail(bytes.size(), "truncated raster (" + std::to_string(bytes.size() - std::min(bytes.size(), start)) + " of " +
                             std::to_string(need) + " bytes)");
  }
  Image8 img(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<std::uint8_t>(bytes[start + (y * w + x) * 3 + c]);
  return img;
}

std::string encode_ppm(const Image8& image) {
  if (image.channels != 3) throw UsageError("ppm: image must have 3 channels");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * image.width * image.height);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[header + (y * image.width + x) * 3 + c] = static_cast<char>(image.at(c, y, x));
  return out;
}

Image8 read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }
void write_ppm(const std::filesystem::path& path, const Image8& image) { write_file(path, encode_ppm(image)); }

InstanceMap decode_pgm16(const std::string& bytes) {
  PnmReader r(bytes);
  r.expect_magic("P5");
  const std::size_t w = r.next_number();
  const std::size_t h = r.next_number();
  const std::size_t maxval = r.next_number();
  if (w == 0 || h == 0) r.fail(2, "zero image dimension");
  if (maxval == 0 || maxval > 65535) r.fail(r.position(), "unsupported max value " + std::to_string(maxval));
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t start = r.raster_start();
  if (bytes.size() < start + bytes_per * w * h) r.fail(bytes.size(), "truncated raster");
  InstanceMap ids(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start + bytes_per * i);
    ids.data[i] = static_cast<std::uint16_t>(bytes_per == 2 ? (p[0] << 8) | p[1] : p[0]);
  }
  return ids;
}

std::string encode_pgm16(const InstanceMap& ids) {
  std::string out = "P5\n" + std::to_string(ids.width) + " " + std::to_string(ids.height) + "\n65535\n";
  for (std::uint16_t v : ids.data) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

InstanceMap read_pgm16(const std::filesystem::path& path) { return decode_pgm16(read_file(path)); }
void write_pgm16(const std::filesystem::path& path, const InstanceMap& ids) { write_file(path, encode_pgm16(ids)); }

void write_dataset(const std::filesystem::path& root, const std::vector<PairedSample>& samples) {
  const auto dir = root / "pairs";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string stem = std::to_string(i);
    write_ppm(dir / (stem + "_seg.ppm"), samples[i].seg);
    write_ppm(dir / (stem + "_photo.ppm"), samples[i].photo);
    write_pgm16(dir / (stem + "_inst.pgm"), samples[i].instance_ids);
  }
}

std::vector<PairedSample> read_dataset(const std::filesystem::path& root) {
  const auto dir = root / "pairs";
  if (!std::filesystem::is_directory(dir)) throw IoError("no dataset at " + dir.string());
  const std::regex seg_name(R"((\d+)_seg\.ppm)");
  std::vector<std::size_t> indices;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, seg_name)) indices.push_back(std::stoul(m[1].str()));
  }
  std::sort(indices.begin(), indices.end());
  std::vector<PairedSample> out;
  for (std::size_t idx : indices) {
    const std::string stem = std::to_string(idx);
    PairedSample s;
    s.seg = read_ppm(dir / (stem + "_seg.ppm"));
    s.photo = read_ppm(dir / (stem + "_photo.ppm"));
    const auto inst = dir / (stem + "_inst.pgm");
    s.instance_ids = std::filesystem::exists(inst) ? read_pgm16(inst) : instances_from_colors(s.seg);
    if (s.seg.height != s.photo.height || s.seg.width != s.photo.width || s.instance_ids.height != s.seg.height ||
        s.instance_ids.width != s.seg.width) {
      throw FormatError("dataset pair " + stem + ": image sizes disagree");
    }
    s.boundary = boundary_map(s.instance_ids);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("dataset at " + dir.string() + " is empty");
  return out;
}

InstanceMap instances_from_colors(const Image8& seg) {
  InstanceMap ids(seg.height, seg.width);
  std::map<std::array<std::uint8_t, 3>, std::uint16_t> lookup;
  for (std::size_t y = 0; y < seg.height; ++y)
    for (std::size_t x = 0; x < seg.width; ++x) {
      std::array<std::uint8_t, 3> color{seg.at(0, y, x), seg.at(1, y, x), seg.at(2, y, x)};
      auto [it, inserted] = lookup.emplace(color, static_cast<std::uint16_t>(lookup.size()));
      ids.at(y, x) = it->second;
    }
  return ids;
}

template Tensor<float> dequantize<float>(const Image8&, std::mt19937_64&);
template Tensor<double> dequantize<double>(const Image8&, std::mt19937_64&);
template Tensor<float> bin_centers<float>(const Image8&);
template Tensor<double> bin_centers<double>(const Image8&);
template Image8 quantize<float>(const Tensor<float>&, std::size_t);
template Image8 quantize<double>(const Tensor<double>&, std::size_t);
template Tensor<float> boundary_tensor<float>(const BoundaryMap&);
template Tensor<double> boundary_tensor<double>(const BoundaryMap&);

}  // namespace fullglow
