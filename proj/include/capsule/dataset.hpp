#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "capsule/tensor.hpp"

namespace capsule {

/// Decoded grayscale image before preprocessing. Pixel values lie in
/// [0, max_value], row-major.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
  double max_value = 255.0;

  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

/// Reads any PNG, converting color to luminance.
RawImage read_png(const std::filesystem::path& path);
/// Writes a [1,H,W] tensor with values in [0,1] as an 8-bit grayscale PNG.
void write_png(const std::filesystem::path& path, const Tensor& image);

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX (MNIST-family) image file: big-endian magic 0x00000803, then count,
/// rows, cols as big-endian u32, then unsigned-byte pixels.
std::vector<RawImage> read_idx_images(const std::filesystem::path& path);
/// IDX label file: magic 0x00000801, count, then one byte per label.
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const std::vector<RawImage>& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

/// Pads the short side with the corner-median background value, resizes
/// bilinearly (half-pixel centers) to side x side, scales to [0,1].
Tensor preprocess(const RawImage& raw, std::size_t side);
/// View of a preprocessed tensor as a RawImage with max_value 1.
RawImage to_raw(const Tensor& image);

struct ImageSample {
  Tensor pixels; // [1, S, S], values in [0,1]
  std::size_t label = 0;
  std::string source_path;
};

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names; // index == label
};

/// Loads `<root>/<CLASS>/*` where each file is a PNG or an IDX image file
/// (each IDX image becomes one sample named `<file>#<index>`). Classes and
/// files are visited in lexicographic order; labels follow sorted class
/// names. With a filter, only the named classes are loaded.
Dataset load_class_directories(const std::filesystem::path& root,
                               const std::optional<std::vector<std::string>>& class_filter,
                               std::size_t side);

/// Loads an IDX image/label pair. `class_names[k]` names label k; with a
/// filter, only those classes are kept and relabelled in filter order.
Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                      const std::vector<std::string>& class_names,
                      const std::optional<std::vector<std::string>>& class_filter, std::size_t side);

struct SplitSpec {
  std::size_t train_count = 180;
  std::size_t val_count = 40;
  std::size_t test_count = 70;
  std::uint64_t seed = 0;
  bool stratified = true;

  bool operator==(const SplitSpec&) const = default;
};

struct Splits {
  std::vector<ImageSample> train;
  std::vector<ImageSample> val;
  std::vector<ImageSample> test;
};

/// Seeded shuffle then (optionally stratified) draw. Stratified splits give
/// each class count/K samples, with the remainder going to the lowest class
/// indices. Within a split, samples keep their load order.
Splits split(const std::vector<ImageSample>& samples, std::size_t num_classes, const SplitSpec& spec);

/// Index batches covering [0, n) once. Shuffled order comes from `rng`.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, bool shuffle,
                                              std::mt19937_64& rng);

/// CSV with columns split,label,source_path.
void write_split_manifest(const std::filesystem::path& path, const Splits& splits);

} // namespace capsule
