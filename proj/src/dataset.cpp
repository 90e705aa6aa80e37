#include "capsule/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <fmt/format.h>

namespace capsule {

namespace {

/// Resize one axis with half-pixel sample centers, clamped at the borders.
std::vector<double> resize_axis(const std::vector<double>& src, std::size_t rows, std::size_t cols,
                                std::size_t new_cols) {
  std::vector<double> out(rows * new_cols);
  const double ratio = static_cast<double>(cols) / static_cast<double>(new_cols);
  for (std::size_t x = 0; x < new_cols; ++x) {
    const double s = std::clamp((static_cast<double>(x) + 0.5) * ratio - 0.5, 0.0,
                                static_cast<double>(cols - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t x1 = std::min(x0 + 1, cols - 1);
    const double f = s - static_cast<double>(x0);
    for (std::size_t r = 0; r < rows; ++r) {
      out[r * new_cols + x] = src[r * cols + x0] * (1.0 - f) + src[r * cols + x1] * f;
    }
  }
  return out;
}

std::vector<double> transpose(const std::vector<double>& src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(src.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

} // namespace

Tensor preprocess(const RawImage& raw, std::size_t side) {
  if (side < 8) throw std::invalid_argument(fmt::format("preprocess: target side {} < 8", side));
  if (raw.width == 0 || raw.height == 0) throw std::invalid_argument("preprocess: zero-area image");
  if (raw.pixels.size() != raw.width * raw.height) {
    throw std::invalid_argument(fmt::format("preprocess: {} pixels for a {}x{} image",
                                            raw.pixels.size(), raw.width, raw.height));
  }
  if (!(raw.max_value > 0.0)) throw std::invalid_argument("preprocess: max_value must be positive");

  // Pad to a square with the corner-median background.
  const std::size_t square = std::max(raw.width, raw.height);
  std::vector<double> padded;
  if (raw.width == raw.height) {
    padded = raw.pixels;
  } else {
    std::array<double, 4> corners = {raw.at(0, 0), raw.at(0, raw.width - 1),
                                     raw.at(raw.height - 1, 0),
                                     raw.at(raw.height - 1, raw.width - 1)};
    std::sort(corners.begin(), corners.end());
    const double background = 0.5 * (corners[1] + corners[2]);
    padded.assign(square * square, background);
    const std::size_t off_x = (square - raw.width) / 2, off_y = (square - raw.height) / 2;
    for (std::size_t r = 0; r < raw.height; ++r) {
      for (std::size_t c = 0; c < raw.width; ++c) {
        padded[(r + off_y) * square + c + off_x] = raw.at(r, c);
      }
    }
  }

  // Separable bilinear: columns first, then rows through a transpose.
  auto wide = resize_axis(padded, square, square, side);
  auto tall = resize_axis(transpose(wide, square, side), side, square, side);
  auto pixels = transpose(tall, side, side);
  for (auto& v : pixels) v = std::clamp(v / raw.max_value, 0.0, 1.0);
  return Tensor::from({1, side, side}, std::move(pixels));
}

RawImage to_raw(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError(fmt::format("to_raw: expected [1,H,W], got {}", to_string(image.shape())));
  }
  return RawImage{image.dim(2), image.dim(1), image.to_vector(), 1.0};
}

namespace {

bool has_png_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

bool is_idx_image_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char head[4] = {};
  in.read(reinterpret_cast<char*>(head), 4);
  return in && head[0] == 0 && head[1] == 0 && head[2] == 0x08 && head[3] == 0x03;
}

std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool directories) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().filename().string().starts_with('.')) continue;
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

} // namespace

Dataset load_class_directories(const std::filesystem::path& root,
                               const std::optional<std::vector<std::string>>& class_filter,
                               std::size_t side) {
  if (!std::filesystem::is_directory(root)) {
    throw std::runtime_error(fmt::format("dataset root {} does not exist or is not a directory",
                                         root.string()));
  }
  std::vector<std::filesystem::path> class_dirs = sorted_entries(root, true);
  if (class_filter) {
    std::vector<std::filesystem::path> kept;
    for (const auto& name : *class_filter) {
      const auto dir = root / name;
      if (!std::filesystem::is_directory(dir)) {
        throw std::runtime_error(fmt::format("class directory {} not found", dir.string()));
      }
      kept.push_back(dir);
    }
    std::sort(kept.begin(), kept.end());
    kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
    class_dirs = std::move(kept);
  }
  if (class_dirs.empty()) throw std::runtime_error(fmt::format("no class directories in {}", root.string()));

  Dataset data;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const auto& dir = class_dirs[label];
    data.class_names.push_back(dir.filename().string());
    std::size_t loaded = 0;
    for (const auto& file : sorted_entries(dir, false)) {
      try {
        if (has_png_extension(file)) {
          data.samples.push_back({preprocess(read_png(file), side), label, file.string()});
          ++loaded;
        } else if (is_idx_image_file(file)) {
          const auto images = read_idx_images(file);
          for (std::size_t k = 0; k < images.size(); ++k) {
            data.samples.push_back(
                {preprocess(images[k], side), label, fmt::format("{}#{}", file.string(), k)});
          }
          loaded += images.size();
        } else {
          throw std::runtime_error("neither PNG nor IDX image data");
        }
      } catch (const std::exception& e) {
        throw std::runtime_error(fmt::format("cannot load {}: {}", file.string(), e.what()));
      }
    }
    if (loaded == 0) throw std::runtime_error(fmt::format("class directory {} is empty", dir.string()));
  }
  return data;
}

Dataset load_idx_pair(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const std::vector<std::string>& class_names,
                      const std::optional<std::vector<std::string>>& class_filter, std::size_t side) {
  const auto images = read_idx_images(images_path);
  const auto labels = read_idx_labels(labels_path);
  if (images.size() != labels.size()) {
    throw std::runtime_error(fmt::format("{} has {} images but {} has {} labels", images_path.string(),
                                         images.size(), labels_path.string(), labels.size()));
  }
  // Map stored label -> output label.
  std::map<std::size_t, std::size_t> relabel;
  Dataset data;
  if (class_filter) {
    for (const auto& name : *class_filter) {
      const auto it = std::find(class_names.begin(), class_names.end(), name);
      if (it == class_names.end()) throw std::runtime_error(fmt::format("unknown class {}", name));
      relabel[static_cast<std::size_t>(it - class_names.begin())] = data.class_names.size();
      data.class_names.push_back(name);
    }
  } else {
    for (std::size_t k = 0; k < class_names.size(); ++k) relabel[k] = k;
    data.class_names = class_names;
  }
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (labels[n] >= class_names.size()) {
      throw std::runtime_error(fmt::format("{}: label {} at index {} has no class name",
                                           labels_path.string(), labels[n], n));
    }
    const auto it = relabel.find(labels[n]);
    if (it == relabel.end()) continue;
    data.samples.push_back(
        {preprocess(images[n], side), it->second, fmt::format("{}#{}", images_path.string(), n)});
  }
  return data;
}

Splits split(const std::vector<ImageSample>& samples, std::size_t num_classes, const SplitSpec& spec) {
  const std::array<std::size_t, 3> counts = {spec.train_count, spec.val_count, spec.test_count};
  const std::size_t requested = counts[0] + counts[1] + counts[2];
  if (requested > samples.size()) {
    throw std::invalid_argument(fmt::format("split needs {} samples but only {} are available",
                                            requested, samples.size()));
  }
  std::mt19937_64 rng(spec.seed);
  std::array<std::vector<std::size_t>, 3> members;

  if (spec.stratified) {
    if (num_classes == 0) throw std::invalid_argument("split: stratification needs at least one class");
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].label >= num_classes) {
        throw std::invalid_argument(fmt::format("sample {} has label {} >= {} classes",
                                                samples[i].source_path, samples[i].label, num_classes));
      }
      by_class[samples[i].label].push_back(i);
    }
    std::vector<std::array<std::size_t, 3>> quota(num_classes);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t c = 0; c < num_classes; ++c) {
        quota[c][s] = counts[s] / num_classes + (c < counts[s] % num_classes ? 1 : 0);
      }
    }
    std::string shortfall;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const std::size_t need = quota[c][0] + quota[c][1] + quota[c][2];
      if (need > by_class[c].size()) {
        shortfall += fmt::format("{}class {}: need {}, have {} (short {})", shortfall.empty() ? "" : "; ",
                                 c, need, by_class[c].size(), need - by_class[c].size());
      }
    }
    if (!shortfall.empty()) throw std::invalid_argument("insufficient samples for split: " + shortfall);
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
      std::size_t next = 0;
      for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < quota[c][s]; ++k) members[s].push_back(by_class[c][next++]);
      }
    }
  } else {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t next = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < counts[s]; ++k) members[s].push_back(order[next++]);
    }
  }

  Splits out;
  std::array<std::vector<ImageSample>*, 3> targets = {&out.train, &out.val, &out.test};
  for (std::size_t s = 0; s < 3; ++s) {
    std::sort(members[s].begin(), members[s].end());
    for (auto i : members[s]) targets[s]->push_back(samples[i]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, bool shuffle,
                                              std::mt19937_64& rng) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

void write_split_manifest(const std::filesystem::path& path, const Splits& splits) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
  out << "split,label,source_path\n";
  auto emit = [&](const char* name, const std::vector<ImageSample>& part) {
    for (const auto& s : part) out << name << ',' << s.label << ',' << s.source_path << '\n';
  };
  emit("train", splits.train);
  emit("val", splits.val);
  emit("test", splits.test);
  if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

} // namespace capsule
