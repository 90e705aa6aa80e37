#include "capsule/experiment.hpp"

#include <fstream>
#include <ostream>
#include <random>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "capsule/artifacts.hpp"
#include "capsule/serialization.hpp"
#include "capsule/training.hpp"

namespace capsule {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

TrainSettings train_settings_from_json(const json& value) {
  reject_unknown_keys(value, {"epochs", "batch_size", "learning_rate", "record_wall_time"}, "train");
  TrainSettings t;
  auto unsigned_field = [&](const char* key, std::size_t& out) {
    if (const auto it = value.find(key); it != value.end()) {
      if (!is_non_negative_integer(*it)) {
        throw std::invalid_argument(fmt::format("train.{}: expected a non-negative integer", key));
      }
      out = it->get<std::size_t>();
    }
  };
  unsigned_field("epochs", t.epochs);
  unsigned_field("batch_size", t.batch_size);
  if (const auto it = value.find("learning_rate"); it != value.end()) {
    if (!it->is_number()) throw std::invalid_argument("train.learning_rate: expected a number");
    t.learning_rate = it->get<double>();
  }
  if (const auto it = value.find("record_wall_time"); it != value.end()) {
    if (!it->is_boolean()) throw std::invalid_argument("train.record_wall_time: expected true or false");
    t.record_wall_time = it->get<bool>();
  }
  if (t.epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (t.batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(t.learning_rate >= 0.0)) throw std::invalid_argument("train.learning_rate must be >= 0");
  return t;
}

} // namespace

ExperimentConfig parse_experiment_config(const json& value, const std::filesystem::path& base_dir) {
  reject_unknown_keys(value,
                      {"dataset_root", "classes", "split", "model", "augment", "train", "seed", "out_dir"},
                      "config");
  ExperimentConfig c;
  if (const auto it = value.find("dataset_root"); it != value.end()) {
    if (!it->is_string()) throw std::invalid_argument("config.dataset_root must be a string");
    c.dataset_root = resolve(it->get<std::string>(), base_dir);
  }
  if (const auto it = value.find("classes"); it != value.end()) {
    if (!it->is_array() || it->empty()) {
      throw std::invalid_argument("config.classes must be a non-empty list of names");
    }
    c.classes.clear();
    for (const auto& name : *it) {
      if (!name.is_string()) throw std::invalid_argument("config.classes entries must be strings");
      c.classes.push_back(name.get<std::string>());
    }
  }
  if (const auto it = value.find("seed"); it != value.end()) {
    if (!is_non_negative_integer(*it)) throw std::invalid_argument("config.seed: expected a non-negative integer");
    c.seed = it->get<std::uint64_t>();
  }
  if (const auto it = value.find("out_dir"); it != value.end()) {
    if (!it->is_string()) throw std::invalid_argument("config.out_dir must be a string");
    c.out_dir = resolve(it->get<std::string>(), base_dir);
  }
  if (const auto it = value.find("split"); it != value.end()) {
    if (it->is_object() && it->contains("seed")) {
      throw std::invalid_argument("unknown key split.seed (sub-seeds derive from config.seed)");
    }
    c.split = split_spec_from_json(*it);
  }
  c.model.num_classes = c.classes.size();
  if (const auto it = value.find("model"); it != value.end()) {
    if (it->is_object() && it->contains("seed")) {
      throw std::invalid_argument("unknown key model.seed (sub-seeds derive from config.seed)");
    }
    c.model = model_config_from_json(*it, c.model);
    if (c.model.num_classes != c.classes.size()) {
      throw std::invalid_argument(fmt::format("model.num_classes is {} but {} classes are listed",
                                              c.model.num_classes, c.classes.size()));
    }
  }
  c.model.validate();
  if (const auto it = value.find("augment"); it != value.end()) c.augment = augment_policy_from_json(*it);
  if (const auto it = value.find("train"); it != value.end()) c.train = train_settings_from_json(*it);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open config {}", path.string()));
  json value;
  try {
    value = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(fmt::format("{}: {}", path.string(), e.what()));
  }
  auto base = std::filesystem::absolute(path).parent_path();
  return parse_experiment_config(value, base);
}

json experiment_config_to_json(const ExperimentConfig& c) {
  json model = model_config_to_json(c.model);
  model.erase("seed");
  json split = split_spec_to_json(c.split);
  split.erase("seed");
  return {{"dataset_root", c.dataset_root.string()},
          {"classes", c.classes},
          {"split", split},
          {"model", model},
          {"augment", augment_policy_to_json(c.augment)},
          {"train",
           {{"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"learning_rate", c.train.learning_rate},
            {"record_wall_time", c.train.record_wall_time}}},
          {"seed", c.seed},
          {"out_dir", c.out_dir.string()}};
}

ModelConfig resolved_model_config(const ExperimentConfig& config) {
  ModelConfig m = config.model;
  m.seed = DerivedSeeds::from(config.seed).init;
  return m;
}

namespace {

ExperimentConfig config_for(const CommandOptions& options) {
  if (!options.config) throw std::invalid_argument("--config is required");
  ExperimentConfig c = load_experiment_config(*options.config);
  if (options.seed) c.seed = *options.seed;
  if (options.out_dir) c.out_dir = *options.out_dir;
  return c;
}

Splits load_splits(const ExperimentConfig& c, Dataset& data) {
  if (c.dataset_root.empty()) throw std::invalid_argument("config.dataset_root is required");
  data = load_class_directories(c.dataset_root, c.classes, c.model.input_side);
  SplitSpec spec = c.split;
  spec.seed = DerivedSeeds::from(c.seed).split;
  return split(data.samples, data.class_names.size(), spec);
}

template <typename F>
int guarded(std::ostream& err, const char* command, F body) {
  try {
    return body();
  } catch (const std::exception& e) {
    fmt::print(err, "{}: error: {}\n", command, e.what());
    return 1;
  }
}

} // namespace

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, "train", [&] {
    const ExperimentConfig c = config_for(options);
    const DerivedSeeds seeds = DerivedSeeds::from(c.seed);
    Dataset data;
    const Splits splits = load_splits(c, data);
    fmt::print(out, "loaded {} samples ({} classes); split {}/{}/{}\n", data.samples.size(),
               data.class_names.size(), splits.train.size(), splits.val.size(), splits.test.size());

    CapsNetModel model = build_model(resolved_model_config(c));
    fmt::print(out, "model: {} parameters, regime {}\n", param_count(model), regime_name(c.augment.regime));

    TrainConfig tc;
    tc.epochs = c.train.epochs;
    tc.batch_size = c.train.batch_size;
    tc.learning_rate = c.train.learning_rate;
    tc.shuffle_seed = seeds.shuffle;
    tc.augment_seed = seeds.augment;
    tc.record_wall_time = c.train.record_wall_time;
    const auto history = train(model, splits.train, splits.val, c.augment, tc, [&](const EpochRecord& r) {
      fmt::print(out, "epoch {:>4}  loss {:.5f}  acc {:.4f}  val_loss {:.5f}  val_acc {:.4f}\n", r.epoch,
                 r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
    });

    std::filesystem::create_directories(c.out_dir);
    std::optional<EvalReport> report;
    if (!splits.test.empty()) report = evaluate(model, splits.test);
    auto artifacts = export_artifacts(c.out_dir, history, report ? &*report : nullptr, data.class_names);
    save_checkpoint(c.out_dir / "model.ckpt", model, data.class_names);
    artifacts.push_back("model.ckpt");
    write_split_manifest(c.out_dir / "split_manifest.csv", splits);
    artifacts.push_back("split_manifest.csv");
    artifacts.push_back("run_manifest.json");

    json manifest;
    manifest["toolkit_version"] = kToolkitVersion;
    manifest["config"] = experiment_config_to_json(c);
    manifest["regime"] = regime_name(c.augment.regime);
    manifest["derived_seeds"] = {{"split", seeds.split},
                                 {"init", seeds.init},
                                 {"shuffle", seeds.shuffle},
                                 {"augment", seeds.augment}};
    manifest["param_count"] = param_count(model);
    manifest["class_names"] = data.class_names;
    manifest["split_sizes"] = {{"train", splits.train.size()},
                               {"val", splits.val.size()},
                               {"test", splits.test.size()}};
    manifest["artifacts"] = artifacts;
    std::ofstream mf(c.out_dir / "run_manifest.json");
    mf << manifest.dump(2) << '\n';
    if (!mf) throw std::runtime_error(fmt::format("failed writing {}", (c.out_dir / "run_manifest.json").string()));

    if (report) {
      fmt::print(out, "test: accuracy {:.4f}  loss {:.5f}", report->accuracy, report->loss);
      for (std::size_t k = 0; k < report->auc.size(); ++k) {
        fmt::print(out, "  auc[{}] {:.4f}", data.class_names[k], report->auc[k]);
      }
      fmt::print(out, "\n");
    }
    fmt::print(out, "artifacts written to {}\n", c.out_dir.string());
    return 0;
  });
}

int cmd_eval(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, "eval", [&] {
    if (!options.checkpoint) throw std::invalid_argument("--checkpoint is required");
    if (!std::filesystem::exists(*options.checkpoint)) {
      throw std::runtime_error(fmt::format("checkpoint {} not found", options.checkpoint->string()));
    }
    const Checkpoint ckpt = load_checkpoint(*options.checkpoint);
    const ExperimentConfig c = config_for(options);
    ModelConfig expected = resolved_model_config(c);
    expected.seed = ckpt.model.config.seed;
    if (!(expected == ckpt.model.config)) {
      throw std::invalid_argument(fmt::format(
          "checkpoint {} does not match the config's model section ({} vs {})",
          options.checkpoint->string(), model_config_to_json(ckpt.model.config).dump(),
          model_config_to_json(expected).dump()));
    }
    Dataset data;
    const Splits splits = load_splits(c, data);
    if (!ckpt.class_names.empty() && ckpt.class_names != data.class_names) {
      throw std::invalid_argument("checkpoint class names differ from the dataset's classes");
    }
    const std::vector<ImageSample>* part = nullptr;
    if (options.split == "train") part = &splits.train;
    else if (options.split == "val") part = &splits.val;
    else if (options.split == "test") part = &splits.test;
    else throw std::invalid_argument(fmt::format("--split must be train, val or test, got {}", options.split));

    const EvalReport report = evaluate(ckpt.model, *part);
    const auto dir = options.out_dir ? *options.out_dir : c.out_dir / ("eval_" + options.split);
    export_report(dir, report, data.class_names);
    fmt::print(out, "{} split: {} samples, accuracy {:.4f}, loss {:.5f}\n", options.split, part->size(),
               report.accuracy, report.loss);
    for (std::size_t k = 0; k < report.auc.size(); ++k) {
      fmt::print(out, "  auc[{}] {:.4f}\n", data.class_names[k], report.auc[k]);
    }
    fmt::print(out, "report written to {}\n", dir.string());
    return 0;
  });
}

int cmd_preview_augment(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, "preview-augment", [&] {
    if (options.preview_count < 1) throw std::invalid_argument("-n must be >= 1");
    const ExperimentConfig c = config_for(options);
    Dataset data;
    const Splits splits = load_splits(c, data);
    const auto& pool = splits.train.empty() ? data.samples : splits.train;
    const std::size_t n = std::min(options.preview_count, pool.size());
    std::vector<Tensor> originals;
    for (std::size_t i = 0; i < n; ++i) originals.push_back(pool[i].pixels);
    Rng rng(DerivedSeeds::from(c.seed).augment);
    const auto augmented = augment_batch(originals, c.augment, rng);

    const auto dir = c.out_dir / "preview";
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < n; ++i) {
      write_png(dir / fmt::format("{:03}_original.png", i), originals[i]);
      write_png(dir / fmt::format("{:03}_{}.png", i, regime_name(c.augment.regime)), augmented[i]);
    }
    fmt::print(out, "wrote {} image pairs ({}) to {}\n", n, regime_name(c.augment.regime), dir.string());
    return 0;
  });
}

GradcheckResult gradcheck_model(const ModelConfig& config, std::uint64_t seed, double eps,
                                std::optional<OpKind> corrupt, double corrupt_factor) {
  CapsNetModel model = build_model(config);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  std::vector<double> pixels(config.input_side * config.input_side);
  for (auto& p : pixels) p = pixel(rng);
  const Tensor image = Tensor::from({1, config.input_side, config.input_side}, std::move(pixels));
  const Tensor target = one_hot(0, config.num_classes);

  std::vector<Tensor> params;
  for (const auto* p : model.params()) params.push_back(*p);
  const ScalarFunction loss = [&](Tape&, std::span<const Var> vars) {
    const ModelVars mv{vars[0], vars[1], vars[2], vars[3], vars[4]};
    return bce_loss(forward(mv, config, image).probs, target);
  };
  std::function<void(Tape&)> configure;
  if (corrupt) configure = [&](Tape& tape) { tape.set_backward_scale(*corrupt, corrupt_factor); };

  const FiniteDiffReport r = finite_diff_check(loss, params, eps, configure);
  return {r.max_relative_error, r.per_param, kParamNames[r.worst_param]};
}

int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, "gradcheck", [&] {
    constexpr double kEps = 1e-5;
    constexpr double kThreshold = 1e-4;
    ModelConfig model = ModelConfig::small_test();
    std::uint64_t seed = options.seed.value_or(0);
    if (options.config) {
      const ExperimentConfig c = config_for(options);
      std::ifstream in(*options.config);
      const json raw = json::parse(in);
      if (raw.contains("model")) model = c.model;
      seed = c.seed;
    }
    model.seed = DerivedSeeds::from(seed).init;

    std::optional<OpKind> corrupt;
    if (options.corrupt_op) {
      for (int k = 0; k < static_cast<int>(OpKind::Count); ++k) {
        if (*options.corrupt_op == op_name(static_cast<OpKind>(k))) corrupt = static_cast<OpKind>(k);
      }
      if (!corrupt) throw std::invalid_argument(fmt::format("unknown op {}", *options.corrupt_op));
      fmt::print(out, "corrupting backward rule of {} by factor {}\n", *options.corrupt_op,
                 options.corrupt_factor);
    }

    fmt::print(out, "gradcheck: {} parameters, eps {}\n", param_count(model), kEps);
    const GradcheckResult r = gradcheck_model(model, seed, kEps, corrupt, options.corrupt_factor);
    for (std::size_t p = 0; p < r.per_param.size(); ++p) {
      fmt::print(out, "  {:<16} worst relative error {:.3e}\n", kParamNames[p], r.per_param[p]);
    }
    fmt::print(out, "max relative error {:.3e} (threshold {:.0e})\n", r.max_relative_error, kThreshold);
    if (!(r.max_relative_error < kThreshold)) {
      fmt::print(err, "gradcheck: FAILED, worst parameter {}\n", r.worst_param);
      return 1;
    }
    fmt::print(out, "gradcheck: OK\n");
    return 0;
  });
}

} // namespace capsule
