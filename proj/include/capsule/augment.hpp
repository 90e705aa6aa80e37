#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "capsule/tensor.hpp"

namespace capsule {

enum class Regime { None, Lossless, Lossy };

const char* regime_name(Regime regime);
/// Accepts "none", "lossless", "lossy".
Regime parse_regime(const std::string& name);

/// Augmentation regime with its bounds. Shift bounds are fractions of the
/// image side; shear is an x-direction shear factor; zoom is a symmetric
/// bound around 1.
struct AugmentPolicy {
  Regime regime = Regime::None;
  double rotation_max_deg = 40.0;
  double width_shift_frac = 0.02;
  double height_shift_frac = 0.02;
  double shear_frac = 0.02;
  double zoom_frac = 0.02;
  bool flip_horizontal = true;
  bool flip_vertical = true;

  void validate() const;
  bool operator==(const AugmentPolicy&) const = default;
};

/// One sampled transform instance.
struct AffineParams {
  double angle_deg = 0.0;
  double dx = 0.0; // pixels, +x moves content right
  double dy = 0.0; // pixels, +y moves content down
  double shear = 0.0;
  double zoom = 1.0;
  bool flip_h = false;
  bool flip_v = false;

  bool operator==(const AffineParams&) const = default;
};

using Rng = std::mt19937_64;

/// Draw order per call is fixed: angle, dx, dy, shear, zoom (Lossy) or
/// flip_h, flip_v (Lossless). Regime None consumes no draws.
AffineParams sample_params(const AugmentPolicy& policy, Rng& rng, std::size_t height,
                           std::size_t width);

/// Horizontal flip reverses columns, vertical flip reverses rows.
Tensor apply_flips(const Tensor& image, bool flip_h, bool flip_v);

/// Inverse-mapped warp about the pixel-grid center c = ((W-1)/2, (H-1)/2).
/// The forward map is p -> A (p - c) + c + t with
/// A = rotation(angle) * shear_x(shear) * zoom, t = (dx, dy), in (x=column,
/// y=row) coordinates. Each output pixel q samples the input bilinearly at
/// A^-1 (q - c - t) + c; sample coordinates are clamped to the image so
/// out-of-range samples take the nearest edge value.
Tensor apply_affine(const Tensor& image, const AffineParams& params);

/// Applies the regime to every image with independently drawn parameters.
std::vector<Tensor> augment_batch(const std::vector<Tensor>& batch, const AugmentPolicy& policy,
                                  Rng& rng);

} // namespace capsule
