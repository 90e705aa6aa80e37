#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsule/augment.hpp"
#include "capsule/capsnet.hpp"
#include "capsule/dataset.hpp"

namespace capsule {

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Moments are allocated on the first call.
/// Throws TrainingError naming the parameter if a gradient is not finite.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               std::span<const std::string> names = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0; // NaN when the validation split is empty
  double val_accuracy = 0.0;
  double wall_seconds = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t augment_seed = 0;
  /// Wall time is left at 0 unless enabled, so histories are reproducible.
  bool record_wall_time = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on mean BCE. Training batches are augmented per policy;
/// validation never is. Deterministic for fixed seeds.
std::vector<EpochRecord> train(CapsNetModel& model, const std::vector<ImageSample>& train_set,
                               const std::vector<ImageSample>& val_set, const AugmentPolicy& policy,
                               const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Index of the largest score; ties go to the lowest index.
std::size_t argmax(std::span<const double> scores);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

/// Threshold sweep over distinct scores, descending. Equal scores form one
/// step. Starts at (0,0), ends at (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
/// Trapezoidal area under a ROC curve.
double auc(std::span<const RocPoint> points);

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

/// Rows are true classes, columns predicted classes.
ConfusionMatrix confusion(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                          std::size_t classes);

struct EvalReport {
  std::vector<std::vector<RocPoint>> roc; // per class, one-vs-rest; empty if undefined
  std::vector<double> auc;                // NaN when a class has no positives or negatives
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  double loss = 0.0;
};

EvalReport evaluate(const CapsNetModel& model, const std::vector<ImageSample>& samples);

/// Mean loss and argmax accuracy without building ROC curves.
std::pair<double, double> loss_and_accuracy(const CapsNetModel& model,
                                            const std::vector<ImageSample>& samples);

} // namespace capsule
