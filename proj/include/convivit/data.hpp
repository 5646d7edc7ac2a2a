#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convivit/tensor.hpp"

namespace convivit {

/// Moving-blob classification task. Class k moves a Gaussian blob along
/// direction k (up, down, left, right, then the four diagonals) over
/// uniform noise and static distractor blobs. The blob wraps around the
/// frame edges, so its position in any single frame is uniform and
/// independent of the class; only motion separates the classes.
struct SynthTaskSpec {
  std::int64_t num_classes = 4;
  std::int64_t frames = 8;
  std::int64_t height = 64;
  std::int64_t width = 64;
  double blob_radius = 6.0;
  double speed = 2.0;  // pixels per frame
  double noise_std = 0.05;
  std::int64_t distractors = 2;

  void validate() const;
};

struct Clip {
  Tensor video;  // 3 x T x H x W, values in [0, 1]
  std::int64_t label = -1;
  std::uint64_t seed = 0;
};

/// Direction names in class order.
const char* direction_name(std::int64_t cls);

/// Deterministic in (spec, cls, seed).
Clip generate_clip(const SynthTaskSpec& spec, std::int64_t cls, std::uint64_t seed);

/// Balanced dataset: sample i has label i % num_classes and seed
/// mix_seed(master_seed, i).
std::vector<Clip> generate_dataset(const SynthTaskSpec& spec, std::int64_t count,
                                   std::uint64_t master_seed);

inline constexpr std::uint32_t kClipFormatVersion = 1;

/// "CVVTC" | u32 version | u32 C,T,H,W | little-endian f32 values.
void save_clip(const Clip& clip, const std::filesystem::path& path);
Clip load_clip(const std::filesystem::path& path);

/// Frames of a directory of binary PPM (P6) files, sorted by file name,
/// stacked along T with values scaled to [0, 1].
Clip load_frames_dir(const std::filesystem::path& dir);

struct Image {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 3;  // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;
};

Image read_pnm(const std::filesystem::path& path);
void write_pnm(const Image& image, const std::filesystem::path& path);

/// Linear blue -> red colormap of a value in [0, 1].
std::array<std::uint8_t, 3> heatmap_color(float value);

/// Heatmap (rows x cols values in [0, 1]) written as P6 with the colormap,
/// each cell repeated `upscale` times in both directions.
void save_heatmap_ppm(const std::vector<float>& map, std::int64_t rows, std::int64_t cols,
                      const std::filesystem::path& path, std::int64_t upscale = 1);
/// Inverse of the colormap (value = red / 255) for a P6 heatmap.
std::vector<float> load_heatmap_ppm(const std::filesystem::path& path, std::int64_t& rows,
                                    std::int64_t& cols);

/// Grayscale P5 image of a rows x cols map, min-max normalized.
void save_feature_pgm(const std::vector<float>& map, std::int64_t rows, std::int64_t cols,
                      const std::filesystem::path& path);

struct ManifestEntry {
  std::filesystem::path path;
  std::int64_t label = 0;
};

/// Text file of `path<TAB>label` lines; relative paths resolve against the
/// manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

/// Loads each entry (clip file or frame directory) and attaches its label.
std::vector<Clip> load_manifest_clips(const std::filesystem::path& manifest);

}  // namespace convivit
