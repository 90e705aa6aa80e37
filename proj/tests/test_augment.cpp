#include <algorithm>
#include <cmath>
#include <random>

#include <doctest.h>

#include "capsule/augment.hpp"
#include "test_support.hpp"

using namespace capsule;
using capsule::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> sorted_values(const Tensor& t) {
  std::vector<double> v = t.to_vector();
  std::sort(v.begin(), v.end());
  return v;
}

AugmentPolicy policy(Regime r) {
  AugmentPolicy p;
  p.regime = r;
  return p;
}

} // namespace

TEST_SUITE("augment") {
  TEST_CASE("regime names round trip and unknown names are rejected") {
    for (Regime r : {Regime::None, Regime::Lossless, Regime::Lossy}) CHECK(parse_regime(regime_name(r)) == r);
    CHECK_THROWS_WITH_AS(parse_regime("mild"), doctest::Contains("mild"), std::invalid_argument);
  }

  TEST_CASE("identity parameters reproduce the image exactly") {
    std::mt19937_64 rng(1);
    const Tensor img = random_tensor({1, 28, 28}, rng, 0, 1);
    CHECK(apply_affine(img, AffineParams{}) == img);
    CHECK(apply_flips(img, false, false) == img);
  }

  TEST_CASE("90 degree rotation matches the index permutation") {
    std::mt19937_64 rng(2);
    for (std::size_t n : {5u, 8u, 28u}) {
      const Tensor img = random_tensor({1, n, n}, rng, 0, 1);
      AffineParams p;
      p.angle_deg = 90.0;
      const Tensor out = apply_affine(img, p);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c)
          REQUIRE(std::abs(out.at({0, r, c}) - img.at({0, n - 1 - c, r})) <= 1e-12);
    }
  }

  TEST_CASE("one pixel shift right replicates the left edge") {
    std::mt19937_64 rng(3);
    const Tensor img = random_tensor({1, 6, 7}, rng, 0, 1);
    AffineParams p;
    p.dx = 1.0;
    const Tensor out = apply_affine(img, p);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 7; ++c)
        REQUIRE(std::abs(out.at({0, r, c}) - img.at({0, r, c == 0 ? 0 : c - 1})) <= 1e-12);

    AffineParams down;
    down.dy = 1.0;
    const Tensor out2 = apply_affine(img, down);
    for (std::size_t c = 0; c < 7; ++c) CHECK(std::abs(out2.at({0, 3, c}) - img.at({0, 2, c})) <= 1e-12);
  }

  TEST_CASE("flips reverse columns or rows and are involutions") {
    const Tensor img = Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(apply_flips(img, true, false) == Tensor::from({1, 2, 3}, {3, 2, 1, 6, 5, 4}));
    CHECK(apply_flips(img, false, true) == Tensor::from({1, 2, 3}, {4, 5, 6, 1, 2, 3}));
    CHECK(apply_flips(apply_flips(img, true, true), true, true) == img);
    CHECK_THROWS_AS(apply_flips(Tensor::zeros({4}), true, false), ShapeError);
  }

  TEST_CASE("sampled parameters respect the policy bounds") {
    Rng rng(4);
    const AugmentPolicy lossy = policy(Regime::Lossy);
    double max_angle = 0;
    for (int i = 0; i < 10'000; ++i) {
      const AffineParams p = sample_params(lossy, rng, 28, 28);
      REQUIRE(std::abs(p.angle_deg) <= 40.0);
      REQUIRE(std::abs(p.dx) <= 0.02 * 28);
      REQUIRE(std::abs(p.dy) <= 0.02 * 28);
      REQUIRE(std::abs(p.shear) <= 0.02);
      REQUIRE(std::abs(p.zoom - 1.0) <= 0.02);
      REQUIRE_FALSE(p.flip_h);
      REQUIRE_FALSE(p.flip_v);
      max_angle = std::max(max_angle, std::abs(p.angle_deg));
    }
    CHECK(max_angle > 39.0); // the whole range is actually used

    int flips_h = 0, flips_v = 0;
    for (int i = 0; i < 10'000; ++i) {
      const AffineParams p = sample_params(policy(Regime::Lossless), rng, 28, 28);
      REQUIRE(p.angle_deg == 0.0);
      REQUIRE(p.zoom == 1.0);
      flips_h += p.flip_h;
      flips_v += p.flip_v;
    }
    CHECK(flips_h > 4700);
    CHECK(flips_h < 5300);
    CHECK(flips_v > 4700);
    CHECK(flips_v < 5300);

    AugmentPolicy only_h = policy(Regime::Lossless);
    only_h.flip_vertical = false;
    for (int i = 0; i < 1000; ++i) REQUIRE_FALSE(sample_params(only_h, rng, 8, 8).flip_v);
  }

  TEST_CASE("regime none consumes no draws") {
    Rng a(5), b(5);
    CHECK(sample_params(policy(Regime::None), a, 28, 28) == AffineParams{});
    CHECK(a() == b());
  }

  TEST_CASE("lossless output is a permutation of the input pixels") {
    std::mt19937_64 init(6);
    Rng rng(6);
    const std::vector<Tensor> batch{random_tensor({1, 9, 9}, init, 0, 1), random_tensor({1, 9, 9}, init, 0, 1)};
    for (int round = 0; round < 50; ++round) {
      const auto out = augment_batch(batch, policy(Regime::Lossless), rng);
      for (std::size_t i = 0; i < batch.size(); ++i) REQUIRE(sorted_values(out[i]) == sorted_values(batch[i]));
    }
  }

  TEST_CASE("lossy output stays in [0,1] and never produces NaN") {
    std::mt19937_64 init(7);
    Rng rng(7);
    std::vector<Tensor> batch;
    for (int i = 0; i < 64; ++i) batch.push_back(random_tensor({1, 28, 28}, init, 0, 1));
    for (const Tensor& t : augment_batch(batch, policy(Regime::Lossy), rng))
      for (double v : t.data()) REQUIRE((v >= 0.0 && v <= 1.0));
  }

  TEST_CASE("same seed, same augmented batch") {
    std::mt19937_64 init(8);
    const std::vector<Tensor> batch{random_tensor({1, 12, 12}, init, 0, 1)};
    Rng a(99), b(99);
    CHECK(augment_batch(batch, policy(Regime::Lossy), a)[0] == augment_batch(batch, policy(Regime::Lossy), b)[0]);
  }

  TEST_CASE("small lossy warps move pixels only slightly") {
    std::mt19937_64 init(10);
    const Tensor img = random_tensor({1, 28, 28}, init, 0, 1);
    AffineParams p;
    p.zoom = 1.0;
    p.angle_deg = 1e-9;
    CHECK(max_abs_diff(apply_affine(img, p), img) < 1e-6);
  }

  TEST_CASE("policy validation") {
    AugmentPolicy p;
    p.zoom_frac = 1.5;
    CHECK_THROWS_WITH(p.validate(), doctest::Contains("zoom_frac"));
    AugmentPolicy q;
    q.shear_frac = -0.1;
    CHECK_THROWS_WITH(q.validate(), doctest::Contains("shear_frac"));
  }
}
