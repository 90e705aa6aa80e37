#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "capsule/autodiff.hpp"
#include "capsule/tensor.hpp"

namespace capsule {

/// Layer dimensions of a single-routed-layer capsule network. The defaults
/// are the full-size layout: 9x9 conv with 256 filters, 32 channels of 8-D
/// primary capsules (9x9, stride 2), 16-D class capsules on a 64 px input.
struct ModelConfig {
  std::size_t input_side = 64;
  std::size_t conv_filters = 256;
  std::size_t conv_kernel = 9;
  std::size_t primary_caps_channels = 32;
  std::size_t primary_caps_dim = 8;
  std::size_t primary_kernel = 9;
  std::size_t primary_stride = 2;
  std::size_t num_classes = 34;
  std::size_t class_caps_dim = 16;
  std::size_t routing_iterations = 3;
  std::uint64_t seed = 0;

  static ModelConfig full_scale() { return {}; }
  /// Input 28, conv 8@9, primary 4x4D @9 stride 2, 2 classes, 8-D class caps.
  static ModelConfig small_test();

  std::size_t conv_output_side() const;
  std::size_t primary_output_side() const;
  /// Number of primary capsules N_p.
  std::size_t primary_capsule_count() const;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count for a configuration.
std::size_t param_count(const ModelConfig& config);

inline constexpr std::array<const char*, 5> kParamNames = {
    "conv_kernels", "conv_bias", "primary_kernels", "primary_bias", "transforms"};

struct CapsNetModel {
  ModelConfig config;
  Tensor conv_kernels;    // [F, 1, k, k]
  Tensor conv_bias;       // [F]
  Tensor primary_kernels; // [P*d_u, F, pk, pk]
  Tensor primary_bias;    // [P*d_u]
  Tensor transforms;      // [N_p, K, d_v, d_u]

  std::array<Tensor*, 5> params() {
    return {&conv_kernels, &conv_bias, &primary_kernels, &primary_bias, &transforms};
  }
  std::array<const Tensor*, 5> params() const {
    return {&conv_kernels, &conv_bias, &primary_kernels, &primary_bias, &transforms};
  }
};

/// Shapes of the five parameter tensors, in kParamNames order.
std::array<Shape, 5> parameter_shapes(const ModelConfig& config);

/// He-normal kernels and transforms from a generator seeded with config.seed;
/// zero biases. Identical configs produce bit-identical models.
CapsNetModel build_model(const ModelConfig& config);

/// Sum of element counts over all parameter tensors.
std::size_t param_count(const CapsNetModel& model);

/// Model parameters bound as leaves on one tape.
struct ModelVars {
  Var conv_kernels, conv_bias, primary_kernels, primary_bias, transforms;

  std::array<Var, 5> list() const {
    return {conv_kernels, conv_bias, primary_kernels, primary_bias, transforms};
  }
};

ModelVars bind(Tape& tape, const CapsNetModel& model, bool requires_grad);

/// Channel c = type*d_u + k at (y, x) becomes component k of capsule
/// (type*S + y)*S + x. Returns, for each output element, its source index
/// in the [P*d_u, S, S] conv output.
std::vector<std::size_t> primary_capsule_layout(std::size_t types, std::size_t dim, std::size_t side);

/// Primary conv, regroup into [N_p, d_u] capsule vectors, squash.
Var primary_caps_forward(const ModelVars& vars, const ModelConfig& config, const Var& features);

struct RoutingResult {
  Var v;                               // [K, d_v]
  Var c;                               // [N_p, K]
  std::vector<Tensor> coupling_history; // c at every iteration
};

/// Routing-by-agreement. Logits start at zero; every iteration is recorded
/// on the tape so gradients flow through the logit updates.
RoutingResult routing(const Var& u_hat, std::size_t iterations);

struct ForwardResult {
  Var probs;   // [K], clamped into [1e-7, 1-1e-7]
  Var class_caps;
  RoutingResult routing;
};

inline constexpr double kProbClamp = 1e-7;

ForwardResult forward(const ModelVars& vars, const ModelConfig& config, const Tensor& image);

/// Inference without gradient bookkeeping.
Tensor predict(const CapsNetModel& model, const Tensor& image);

/// Mean binary cross-entropy over the K class outputs.
Var bce_loss(const Var& probs, const Tensor& target);
Tensor one_hot(std::size_t label, std::size_t classes);

/// Binary checkpoint: magic, JSON header (config, class names, shapes),
/// then raw little-endian doubles. Round trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const CapsNetModel& model,
                     const std::vector<std::string>& class_names = {});

struct Checkpoint {
  CapsNetModel model;
  std::vector<std::string> class_names;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace capsule
