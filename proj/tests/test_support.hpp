#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <fmt/format.h>

#include "capsule/dataset.hpp"
#include "capsule/tensor.hpp"

namespace capsule::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / fmt::format("capsule-{}-{:x}", tag, rd());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(element_count(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data));
}

/// Crude stroke glyphs: "A" is a peaked pair of diagonals with a bar, "H"
/// two verticals with a bar. Position and noise are jittered per sample.
inline Tensor synthetic_glyph(char letter, std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-1.5, 1.5), noise(0.0, 0.15);
  const double s = static_cast<double>(side);
  const double ox = jitter(rng), oy = jitter(rng);
  std::vector<double> px(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double x = static_cast<double>(c) - ox, y = static_cast<double>(r) - oy;
      const double t = (y - 0.2 * s) / (0.6 * s); // 0 top .. 1 bottom
      bool on = false;
      if (t >= 0.0 && t <= 1.0) {
        if (letter == 'A') {
          const double half = 0.05 * s + t * 0.3 * s;
          on = std::abs(x - (s / 2 - half)) < 1.2 || std::abs(x - (s / 2 + half)) < 1.2 ||
               (std::abs(t - 0.6) < 0.06 && std::abs(x - s / 2) < half);
        } else {
          on = std::abs(x - 0.25 * s) < 1.2 || std::abs(x - 0.75 * s) < 1.2 ||
               (std::abs(t - 0.5) < 0.06 && x > 0.25 * s && x < 0.75 * s);
        }
      }
      px[r * side + c] = std::min(1.0, (on ? 0.85 : 0.0) + noise(rng));
    }
  }
  return Tensor::from({1, side, side}, std::move(px));
}

/// Writes <root>/A and <root>/H with `per_class` PNGs each.
inline void write_synthetic_dataset(const std::filesystem::path& root, std::size_t per_class,
                                    std::size_t side, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  for (char letter : {'A', 'H'}) {
    const auto dir = root / std::string(1, letter);
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < per_class; ++i) {
      write_png(dir / fmt::format("{}_{:03}.png", letter, i), synthetic_glyph(letter, side, rng));
    }
  }
}

} // namespace capsule::testing
