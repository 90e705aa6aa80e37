#include "capsule/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace capsule {

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               std::span<const std::string> names) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument(fmt::format("adam_step: {} parameters but {} gradients", params.size(),
                                            grads.size()));
  }
  auto name_of = [&](std::size_t p) {
    return p < names.size() ? names[p] : fmt::format("parameter {}", p);
  };
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->shape() != grads[p].shape()) {
      throw ShapeError(fmt::format("adam_step: {} has shape {} but its gradient {}", name_of(p),
                                   to_string(params[p]->shape()), to_string(grads[p].shape())));
    }
    for (std::size_t i = 0; i < grads[p].size(); ++i) {
      if (!std::isfinite(grads[p][i])) {
        throw TrainingError(fmt::format("non-finite gradient {} in {} at element {}", grads[p][i],
                                        name_of(p), i));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  state.t += 1;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    std::vector<double> updated = params[p]->to_vector();
    for (std::size_t i = 0; i < updated.size(); ++i) {
      const double g = grads[p][i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      updated[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
    *params[p] = Tensor::from(params[p]->shape(), std::move(updated));
  }
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of an empty score list");
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores[k] > scores[best]) best = k;
  }
  return best;
}

std::pair<double, double> loss_and_accuracy(const CapsNetModel& model,
                                            const std::vector<ImageSample>& samples) {
  if (samples.empty()) {
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  }
  const std::size_t classes = model.config.num_classes;
  double total = 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    Tape tape;
    const auto vars = bind(tape, model, false);
    const Var probs = forward(vars, model.config, s.pixels).probs;
    total += bce_loss(probs, one_hot(s.label, classes)).value()[0];
    if (argmax(probs.value().data()) == s.label) ++correct;
  }
  const auto n = static_cast<double>(samples.size());
  return {total / n, static_cast<double>(correct) / n};
}

std::vector<EpochRecord> train(CapsNetModel& model, const std::vector<ImageSample>& train_set,
                               const std::vector<ImageSample>& val_set, const AugmentPolicy& policy,
                               const TrainConfig& config, const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: training split is empty");
  if (config.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  policy.validate();

  const std::size_t classes = model.config.num_classes;
  std::mt19937_64 shuffle_rng(config.shuffle_seed);
  Rng augment_rng(config.augment_seed);
  AdamState adam;
  adam.lr = config.learning_rate;
  const std::vector<std::string> names(kParamNames.begin(), kParamNames.end());

  std::vector<EpochRecord> history;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    double loss_total = 0.0;
    std::size_t correct = 0;

    const auto order = batches(train_set.size(), config.batch_size, true, shuffle_rng);
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto& batch = order[b];
      std::vector<Tensor> images;
      images.reserve(batch.size());
      for (auto i : batch) images.push_back(train_set[i].pixels);
      images = augment_batch(images, policy, augment_rng);

      auto params = model.params();
      std::vector<std::vector<double>> accum;
      for (const auto* p : params) accum.emplace_back(p->size(), 0.0);
      const double weight = 1.0 / static_cast<double>(batch.size());

      for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& sample = train_set[batch[k]];
        Tape tape;
        const auto vars = bind(tape, model, true);
        const auto result = forward(vars, model.config, images[k]);
        const Var loss = bce_loss(result.probs, one_hot(sample.label, classes));
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          throw TrainingError(fmt::format("non-finite loss {} at epoch {}, batch {} ({})", value, epoch,
                                          b, sample.source_path));
        }
        loss_total += value;
        if (argmax(result.probs.value().data()) == sample.label) ++correct;

        const Gradients grads = tape.backward(loss);
        const auto leaves = vars.list();
        for (std::size_t p = 0; p < leaves.size(); ++p) {
          const Tensor g = grads[leaves[p]];
          for (std::size_t i = 0; i < g.size(); ++i) accum[p][i] += weight * g[i];
        }
      }

      std::vector<Tensor> grads;
      for (std::size_t p = 0; p < params.size(); ++p) {
        grads.push_back(Tensor::from(params[p]->shape(), std::move(accum[p])));
      }
      adam_step(params, grads, adam, names);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_total / static_cast<double>(train_set.size());
    record.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    std::tie(record.val_loss, record.val_accuracy) = loss_and_accuracy(model, val_set);
    if (config.record_wall_time) {
      record.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return history;
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument(fmt::format("roc_curve: {} scores but {} labels", scores.size(),
                                            labels.size()));
  }
  std::size_t positives = 0;
  for (int l : labels) positives += l != 0 ? 1 : 0;
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw std::invalid_argument("roc_curve: labels must contain both classes (AUC undefined)");
  }
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> points{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      if (labels[order[i]] != 0) ++tp; else ++fp;
      ++i;
    }
    points.push_back({static_cast<double>(fp) / static_cast<double>(negatives),
                      static_cast<double>(tp) / static_cast<double>(positives)});
  }
  return points;
}

double auc(std::span<const RocPoint> points) {
  if (points.size() < 2) throw std::invalid_argument("auc: need at least two ROC points");
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].fpr - points[i - 1].fpr) * (points[i].tpr + points[i - 1].tpr) * 0.5;
  }
  return area;
}

ConfusionMatrix confusion(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                          std::size_t classes) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument(fmt::format("confusion: {} predictions but {} labels",
                                            predictions.size(), labels.size()));
  }
  ConfusionMatrix m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) {
      throw std::invalid_argument(fmt::format("confusion: entry {} out of range for {} classes", i,
                                              classes));
    }
    ++m[labels[i]][predictions[i]];
  }
  return m;
}

EvalReport evaluate(const CapsNetModel& model, const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
  const std::size_t classes = model.config.num_classes;
  std::vector<std::vector<double>> scores(classes);
  std::vector<std::size_t> predictions, labels;
  double loss_total = 0.0;
  for (const auto& s : samples) {
    if (s.label >= classes) {
      throw std::invalid_argument(fmt::format("evaluate: {} has label {} but the model has {} classes",
                                              s.source_path, s.label, classes));
    }
    Tape tape;
    const auto vars = bind(tape, model, false);
    const Var probs = forward(vars, model.config, s.pixels).probs;
    loss_total += bce_loss(probs, one_hot(s.label, classes)).value()[0];
    const auto p = probs.value().data();
    for (std::size_t k = 0; k < classes; ++k) scores[k].push_back(p[k]);
    predictions.push_back(argmax(p));
    labels.push_back(s.label);
  }

  EvalReport report;
  report.confusion = confusion(predictions, labels, classes);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < classes; ++k) correct += report.confusion[k][k];
  report.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  report.loss = loss_total / static_cast<double>(samples.size());
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<int> binary(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) binary[i] = labels[i] == k ? 1 : 0;
    const bool defined = std::find(binary.begin(), binary.end(), 1) != binary.end() &&
                         std::find(binary.begin(), binary.end(), 0) != binary.end();
    if (defined) {
      report.roc.push_back(roc_curve(scores[k], binary));
      report.auc.push_back(auc(report.roc.back()));
    } else {
      report.roc.emplace_back();
      report.auc.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return report;
}

} // namespace capsule
