#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <png.h>

#include "capsule/dataset.hpp"

namespace capsule {

RawImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw std::runtime_error(fmt::format("{}: {}", path.string(), image.message));
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    const std::string message = image.message;
    png_image_free(&image);
    throw std::runtime_error(fmt::format("{}: {}", path.string(), message));
  }
  RawImage raw;
  raw.width = image.width;
  raw.height = image.height;
  raw.pixels.assign(buffer.begin(), buffer.end());
  return raw;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError(fmt::format("write_png: expected [1,H,W], got {}", to_string(image.shape())));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.dim(2));
  png.height = static_cast<png_uint_32>(image.dim(1));
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(image.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<png_byte>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  }
  if (png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr) == 0) {
    throw std::runtime_error(fmt::format("{}: {}", path.string(), png.message));
  }
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian_u32(const std::vector<unsigned char>& bytes, std::size_t offset,
                             const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw std::runtime_error(fmt::format("{}: truncated IDX header", path.string()));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_u32(std::ofstream& out, std::uint32_t value) {
  const char bytes[4] = {static_cast<char>(value >> 24), static_cast<char>(value >> 16),
                         static_cast<char>(value >> 8), static_cast<char>(value)};
  out.write(bytes, 4);
}

} // namespace

std::vector<RawImage> read_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const auto magic = big_endian_u32(bytes, 0, path);
  if (magic != kIdxImageMagic) {
    throw std::runtime_error(fmt::format("{}: IDX image magic 0x{:08x}, expected 0x{:08x}",
                                         path.string(), magic, kIdxImageMagic));
  }
  const std::size_t count = big_endian_u32(bytes, 4, path);
  const std::size_t rows = big_endian_u32(bytes, 8, path);
  const std::size_t cols = big_endian_u32(bytes, 12, path);
  const std::size_t per_image = rows * cols;
  if (16 + count * per_image != bytes.size()) {
    throw std::runtime_error(fmt::format("{}: {} bytes of pixel data, header implies {}",
                                         path.string(), bytes.size() - 16, count * per_image));
  }
  std::vector<RawImage> images(count);
  for (std::size_t n = 0; n < count; ++n) {
    images[n].width = cols;
    images[n].height = rows;
    const auto* begin = bytes.data() + 16 + n * per_image;
    images[n].pixels.assign(begin, begin + per_image);
  }
  return images;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  const auto magic = big_endian_u32(bytes, 0, path);
  if (magic != kIdxLabelMagic) {
    throw std::runtime_error(fmt::format("{}: IDX label magic 0x{:08x}, expected 0x{:08x}",
                                         path.string(), magic, kIdxLabelMagic));
  }
  const std::size_t count = big_endian_u32(bytes, 4, path);
  if (8 + count != bytes.size()) {
    throw std::runtime_error(fmt::format("{}: {} labels stored, header implies {}", path.string(),
                                         bytes.size() - 8, count));
  }
  return {bytes.begin() + 8, bytes.end()};
}

void write_idx_images(const std::filesystem::path& path, const std::vector<RawImage>& images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
  const std::size_t rows = images.empty() ? 0 : images.front().height;
  const std::size_t cols = images.empty() ? 0 : images.front().width;
  put_u32(out, kIdxImageMagic);
  put_u32(out, static_cast<std::uint32_t>(images.size()));
  put_u32(out, static_cast<std::uint32_t>(rows));
  put_u32(out, static_cast<std::uint32_t>(cols));
  for (const auto& image : images) {
    if (image.height != rows || image.width != cols) {
      throw std::invalid_argument("write_idx_images: all images must share one size");
    }
    for (double v : image.pixels) {
      out.put(static_cast<char>(std::lround(std::clamp(v / image.max_value, 0.0, 1.0) * 255.0)));
    }
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
  put_u32(out, kIdxLabelMagic);
  put_u32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

} // namespace capsule
