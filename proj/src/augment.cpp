#include "capsule/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace capsule {

const char* regime_name(Regime regime) {
  switch (regime) {
  case Regime::None: return "none";
  case Regime::Lossless: return "lossless";
  case Regime::Lossy: return "lossy";
  }
  return "none";
}

Regime parse_regime(const std::string& name) {
  if (name == "none") return Regime::None;
  if (name == "lossless") return Regime::Lossless;
  if (name == "lossy") return Regime::Lossy;
  throw std::invalid_argument(
      fmt::format("augment.regime: unknown regime \"{}\" (expected none, lossless or lossy)", name));
}

void AugmentPolicy::validate() const {
  auto non_negative = [](double value, const char* name) {
    if (!(value >= 0.0)) throw std::invalid_argument(fmt::format("augment.{} must be >= 0", name));
  };
  non_negative(rotation_max_deg, "rotation_max_deg");
  non_negative(width_shift_frac, "width_shift_frac");
  non_negative(height_shift_frac, "height_shift_frac");
  non_negative(shear_frac, "shear_frac");
  non_negative(zoom_frac, "zoom_frac");
  if (rotation_max_deg > 180.0) throw std::invalid_argument("augment.rotation_max_deg must be <= 180");
  if (zoom_frac >= 1.0) throw std::invalid_argument("augment.zoom_frac must be < 1");
}

AffineParams sample_params(const AugmentPolicy& policy, Rng& rng, std::size_t height,
                           std::size_t width) {
  AffineParams p;
  switch (policy.regime) {
  case Regime::None:
    break;
  case Regime::Lossless: {
    std::bernoulli_distribution coin(0.5);
    const bool h = coin(rng);
    const bool v = coin(rng);
    p.flip_h = policy.flip_horizontal && h;
    p.flip_v = policy.flip_vertical && v;
    break;
  }
  case Regime::Lossy: {
    auto symmetric = [&](double bound) {
      return std::uniform_real_distribution<double>(-bound, bound)(rng);
    };
    p.angle_deg = symmetric(policy.rotation_max_deg);
    p.dx = symmetric(policy.width_shift_frac * static_cast<double>(width));
    p.dy = symmetric(policy.height_shift_frac * static_cast<double>(height));
    p.shear = symmetric(policy.shear_frac);
    p.zoom = 1.0 + symmetric(policy.zoom_frac);
    break;
  }
  }
  return p;
}

namespace {

void check_image(const Tensor& image, const char* op) {
  if (image.rank() != 3) {
    throw ShapeError(fmt::format("{}: expected [C,H,W] image, got {}", op, to_string(image.shape())));
  }
}

} // namespace

Tensor apply_flips(const Tensor& image, bool flip_h, bool flip_v) {
  check_image(image, "apply_flips");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = flip_v ? h - 1 - y : y;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = flip_h ? w - 1 - x : x;
        out[(c * h + y) * w + x] = image[(c * h + sy) * w + sx];
      }
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

Tensor apply_affine(const Tensor& image, const AffineParams& params) {
  check_image(image, "apply_affine");
  if (!(params.zoom > 0.0)) throw std::invalid_argument("apply_affine: zoom must be positive");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);

  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  // A = R * Shear * zoom, R = [[c,-s],[s,c]], Shear = [[1,sh],[0,1]].
  const double a00 = params.zoom * cs, a01 = params.zoom * (cs * params.shear - sn);
  const double a10 = params.zoom * sn, a11 = params.zoom * (sn * params.shear + cs);
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double max_x = static_cast<double>(w - 1), max_y = static_cast<double>(h - 1);

  std::vector<double> out(image.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double qx = static_cast<double>(x) - cx - params.dx;
      const double qy = static_cast<double>(y) - cy - params.dy;
      const double sx = std::clamp(i00 * qx + i01 * qy + cx, 0.0, max_x);
      const double sy = std::clamp(i10 * qx + i11 * qy + cy, 0.0, max_y);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = image.begin() + c * h * w;
        const double top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        const double bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        out[(c * h + y) * w + x] = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

std::vector<Tensor> augment_batch(const std::vector<Tensor>& batch, const AugmentPolicy& policy,
                                  Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& image : batch) {
    check_image(image, "augment_batch");
    const AffineParams p = sample_params(policy, rng, image.dim(1), image.dim(2));
    switch (policy.regime) {
    case Regime::None: out.push_back(image); break;
    case Regime::Lossless: out.push_back(apply_flips(image, p.flip_h, p.flip_v)); break;
    case Regime::Lossy: out.push_back(apply_affine(image, p)); break;
    }
  }
  return out;
}

} // namespace capsule
