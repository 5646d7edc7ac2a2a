#include "convivit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "convivit/errors.hpp"
#include "convivit/rng.hpp"
#include "binary_io.hpp"

namespace convivit {

namespace {

struct Direction {
  const char* name;
  double dx, dy;  // dy > 0 moves down the image
};

constexpr double kDiag = 0.70710678118654752440;
constexpr Direction kDirections[] = {
    {"up", 0, -1},          {"down", 0, 1},          {"left", -1, 0},        {"right", 1, 0},
    {"up-left", -kDiag, -kDiag}, {"up-right", kDiag, -kDiag}, {"down-left", -kDiag, kDiag},
    {"down-right", kDiag, kDiag},
};
constexpr std::int64_t kMaxClasses = 8;

struct Blob {
  double x, y, amplitude;
  std::array<double, 3> color;
};

// Distance on a ring of circumference n.
inline double wrap_distance(double a, double b, double n) {
  double d = std::fabs(a - b);
  d = std::fmod(d, n);
  return std::min(d, n - d);
}

}  // namespace

void SynthTaskSpec::validate() const {
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw ConfigError("synth: num_classes must be in [2, 8]");
  }
  if (frames < 1 || height < 4 || width < 4) throw ConfigError("synth: clip extents too small");
  if (speed < 1.0) throw ConfigError("synth: speed must be at least 1 pixel per frame");
  if (blob_radius <= 0.0) throw ConfigError("synth: blob_radius must be positive");
  if (noise_std < 0.0) throw ConfigError("synth: noise_std must be non-negative");
  if (distractors < 0) throw ConfigError("synth: distractors must be non-negative");
}

const char* direction_name(std::int64_t cls) {
  if (cls < 0 || cls >= kMaxClasses) throw Error("class index out of range");
  return kDirections[cls].name;
}

Clip generate_clip(const SynthTaskSpec& spec, std::int64_t cls, std::uint64_t seed) {
  spec.validate();
  if (cls < 0 || cls >= spec.num_classes) {
    throw Error("class " + std::to_string(cls) + " out of range for " +
                std::to_string(spec.num_classes) + " classes");
  }
  Rng rng(seed);
  const auto T = spec.frames, H = spec.height, W = spec.width;
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  auto random_color = [&] {
    return std::array<double, 3>{rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
  };
  Blob mover{rng.uniform(0.0, Wd), rng.uniform(0.0, Hd), 1.0, random_color()};
  std::vector<Blob> statics;
  for (std::int64_t i = 0; i < spec.distractors; ++i) {
    statics.push_back({rng.uniform(0.0, Wd), rng.uniform(0.0, Hd), 0.6, random_color()});
  }
  const double background = 0.2;
  const double sigma = spec.blob_radius / 2.0;
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
  const auto& dir = kDirections[cls];

  Tensor video({3, T, H, W});
  auto v = video.mutable_data();
  std::vector<double> frame(static_cast<std::size_t>(3 * H * W));
  for (std::int64_t t = 0; t < T; ++t) {
    const double shift = spec.speed * static_cast<double>(t);
    Blob moved = mover;
    moved.x = std::fmod(mover.x + dir.dx * shift + 64.0 * Wd, Wd);
    moved.y = std::fmod(mover.y + dir.dy * shift + 64.0 * Hd, Hd);
    std::fill(frame.begin(), frame.end(), background);
    auto splat = [&](const Blob& b) {
      for (std::int64_t y = 0; y < H; ++y) {
        const double dy = wrap_distance(static_cast<double>(y), b.y, Hd);
        for (std::int64_t x = 0; x < W; ++x) {
          const double dx = wrap_distance(static_cast<double>(x), b.x, Wd);
          const double g = b.amplitude * std::exp(-(dx * dx + dy * dy) * inv_two_sigma2);
          for (int c = 0; c < 3; ++c) frame[static_cast<std::size_t>((c * H + y) * W + x)] += g * b.color[static_cast<std::size_t>(c)];
        }
      }
    };
    for (const auto& b : statics) splat(b);
    splat(moved);
    for (int c = 0; c < 3; ++c) {
      for (std::int64_t i = 0; i < H * W; ++i) {
        const double noisy = frame[static_cast<std::size_t>(c * H * W + i)] + spec.noise_std * rng.normal();
        v[static_cast<std::size_t>((c * T + t) * H * W + i)] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
    }
  }
  return {video, cls, seed};
}

std::vector<Clip> generate_dataset(const SynthTaskSpec& spec, std::int64_t count,
                                   std::uint64_t master_seed) {
  std::vector<Clip> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    out.push_back(generate_clip(spec, i % spec.num_classes, mix_seed(master_seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

void save_clip(const Clip& clip, const std::filesystem::path& path) {
  const auto& s = clip.video.shape();
  if (s.size() != 4) throw IoError("save_clip: video must be C x T x H x W");
  BinaryWriter w;
  w.bytes("CVVTC", 5);
  w.u32(kClipFormatVersion);
  for (auto d : s) w.u32(static_cast<std::uint32_t>(d));
  w.floats(clip.video.data());
  w.write_file(path);
}

Clip load_clip(const std::filesystem::path& path) {
  BinaryReader r(read_file(path), path.string());
  r.expect_magic("CVVTC", "clip");
  const auto version = r.u32("version");
  if (version != kClipFormatVersion) {
    throw IoError(path.string() + ": clip format version " + std::to_string(version) +
                  " not supported (expected " + std::to_string(kClipFormatVersion) + ")");
  }
  Shape shape;
  for (const char* name : {"extent C", "extent T", "extent H", "extent W"}) {
    const auto d = r.u32(name);
    if (d == 0) throw IoError(path.string() + ": zero " + std::string(name));
    shape.push_back(d);
  }
  const auto n = r.checked_count(shape, "clip values");
  auto values = r.floats(n, "clip values");
  if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after clip values");
  return {Tensor(shape, std::move(values)), -1, 0};
}

namespace {

void skip_space_and_comments(const std::string& buf, std::size_t& pos) {
  while (pos < buf.size()) {
    if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
}

std::int64_t read_header_int(const std::string& buf, std::size_t& pos, const std::string& what,
                             const std::string& file) {
  skip_space_and_comments(buf, pos);
  std::size_t start = pos;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos || pos - start > 9) throw IoError(file + ": malformed PNM header (" + what + ")");
  return std::stoll(buf.substr(start, pos - start));
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string buf(bytes.begin(), bytes.end());
  const std::string file = path.string();
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '6' && buf[1] != '5')) {
    throw IoError(file + ": malformed PNM header (expected P6 or P5 magic)");
  }
  Image img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  img.width = read_header_int(buf, pos, "width", file);
  img.height = read_header_int(buf, pos, "height", file);
  const auto maxval = read_header_int(buf, pos, "maxval", file);
  if (img.width <= 0 || img.height <= 0) throw IoError(file + ": malformed PNM header (zero extent)");
  if (maxval <= 0 || maxval > 255) throw IoError(file + ": only 8-bit PNM (maxval <= 255) is supported");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IoError(file + ": malformed PNM header (missing separator before raster)");
  }
  ++pos;
  const auto n = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (buf.size() - pos < n) throw IoError(file + ": truncated PNM raster");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::lround(255.0 * std::min<int>(p, static_cast<int>(maxval)) / static_cast<double>(maxval)));
  }
  return img;
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Clip load_frames_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  if (files.empty()) throw IoError(dir.string() + ": no .ppm frames found");
  std::sort(files.begin(), files.end(), [](const auto& a, const auto& b) {
    return a.filename().string() < b.filename().string();
  });
  std::vector<Image> frames;
  for (const auto& f : files) {
    frames.push_back(read_pnm(f));
    if (frames.back().channels != 3) throw IoError(f.string() + ": frames must be P6 (RGB)");
    if (frames.back().width != frames[0].width || frames.back().height != frames[0].height) {
      throw IoError(f.string() + ": frame size " + std::to_string(frames.back().width) + "x" +
                    std::to_string(frames.back().height) + " differs from " +
                    std::to_string(frames[0].width) + "x" + std::to_string(frames[0].height));
    }
  }
  const auto T = static_cast<std::int64_t>(frames.size());
  const auto H = frames[0].height, W = frames[0].width;
  Tensor video({3, T, H, W});
  auto v = video.mutable_data();
  for (std::int64_t t = 0; t < T; ++t) {
    const auto& px = frames[static_cast<std::size_t>(t)].pixels;
    for (std::int64_t i = 0; i < H * W; ++i) {
      for (std::int64_t c = 0; c < 3; ++c) {
        v[static_cast<std::size_t>((c * T + t) * H * W + i)] = px[static_cast<std::size_t>(i * 3 + c)] / 255.0f;
      }
    }
  }
  return {video, -1, 0};
}

std::array<std::uint8_t, 3> heatmap_color(float value) {
  const double v = std::clamp(static_cast<double>(value), 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * v)), 0,
          static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)))};
}

void save_heatmap_ppm(const std::vector<float>& map, std::int64_t rows, std::int64_t cols,
                      const std::filesystem::path& path, std::int64_t upscale) {
  if (static_cast<std::int64_t>(map.size()) != rows * cols || upscale < 1) {
    throw Error("save_heatmap_ppm: map size does not match its extents");
  }
  Image img;
  img.width = cols * upscale;
  img.height = rows * upscale;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      const auto rgb = heatmap_color(map[static_cast<std::size_t>((y / upscale) * cols + x / upscale)]);
      std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + (y * img.width + x) * 3);
    }
  }
  write_pnm(img, path);
}

std::vector<float> load_heatmap_ppm(const std::filesystem::path& path, std::int64_t& rows,
                                    std::int64_t& cols) {
  const Image img = read_pnm(path);
  if (img.channels != 3) throw IoError(path.string() + ": heatmap must be P6");
  rows = img.height;
  cols = img.width;
  std::vector<float> out(static_cast<std::size_t>(rows * cols));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i * 3] / 255.0f;
  return out;
}

void save_feature_pgm(const std::vector<float>& map, std::int64_t rows, std::int64_t cols,
                      const std::filesystem::path& path) {
  if (static_cast<std::int64_t>(map.size()) != rows * cols) {
    throw Error("save_feature_pgm: map size does not match its extents");
  }
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double range = static_cast<double>(*hi) - *lo;
  Image img{cols, rows, 1, std::vector<std::uint8_t>(map.size(), 0)};
  if (range > 0) {
    for (std::size_t i = 0; i < map.size(); ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (map[i] - *lo) / range));
    }
  }
  write_pnm(img, path);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected path<TAB>label");
    }
    ManifestEntry e;
    e.path = line.substr(0, tab);
    if (e.path.is_relative()) e.path = path.parent_path() / e.path;
    try {
      std::size_t used = 0;
      e.label = std::stoll(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1 || e.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + line.substr(tab + 1) + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& e : entries) out << e.path.string() << '\t' << e.label << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Clip> load_manifest_clips(const std::filesystem::path& manifest) {
  std::vector<Clip> out;
  for (const auto& e : read_manifest(manifest)) {
    Clip c = std::filesystem::is_directory(e.path) ? load_frames_dir(e.path) : load_clip(e.path);
    c.label = e.label;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace convivit
