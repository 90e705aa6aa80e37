#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsule/augment.hpp"
#include "capsule/autodiff.hpp"
#include "capsule/capsnet.hpp"
#include "capsule/dataset.hpp"

namespace capsule {

inline constexpr const char* kToolkitVersion = "1.0.0";

struct TrainSettings {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  bool record_wall_time = false;

  bool operator==(const TrainSettings&) const = default;
};

/// Everything one run needs. Sub-seeds are never configured directly; they
/// are derived from `seed` (see DerivedSeeds).
struct ExperimentConfig {
  std::filesystem::path dataset_root;
  std::vector<std::string> classes = {"A", "H"};
  SplitSpec split;
  ModelConfig model;
  AugmentPolicy augment;
  TrainSettings train;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/capsule";
};

/// sub-seed = master seed XOR a fixed per-role constant.
struct DerivedSeeds {
  static constexpr std::uint64_t kSplit = 0x73706c6974000001ULL;   // "split"
  static constexpr std::uint64_t kInit = 0x696e697400000002ULL;    // "init"
  static constexpr std::uint64_t kShuffle = 0x7368756600000003ULL; // "shuf"
  static constexpr std::uint64_t kAugment = 0x6175676d00000004ULL; // "augm"

  std::uint64_t split, init, shuffle, augment;

  static DerivedSeeds from(std::uint64_t master) {
    return {master ^ kSplit, master ^ kInit, master ^ kShuffle, master ^ kAugment};
  }
};

/// Strict parse: unknown keys, wrong types and invalid values throw
/// std::invalid_argument naming the field. Relative paths resolve against
/// `base_dir`. model.num_classes defaults to the number of classes.
ExperimentConfig parse_experiment_config(const nlohmann::json& value,
                                         const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);

/// Model config with the derived init seed applied.
ModelConfig resolved_model_config(const ExperimentConfig& config);

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint;
  std::string split = "test";
  std::size_t preview_count = 8;
  /// gradcheck only: scales the backward rule of the named op.
  std::optional<std::string> corrupt_op;
  double corrupt_factor = 0.5;
};

// Each command returns a process exit code and reports to `out`/`err`.
int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_preview_augment(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err);

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::vector<double> per_param; // kParamNames order
  std::string worst_param;
};

/// Central-difference check of the full forward + BCE loss on one
/// deterministic random image.
GradcheckResult gradcheck_model(const ModelConfig& config, std::uint64_t seed, double eps,
                                std::optional<OpKind> corrupt = std::nullopt,
                                double corrupt_factor = 0.5);

} // namespace capsule
