#include <fstream>
#include <sstream>

#include <doctest.h>

#include "capsule/experiment.hpp"
#include "capsule/serialization.hpp"
#include "test_support.hpp"

using namespace capsule;
using capsule::testing::TempDir;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny_model() {
  return {{"input_side", 12},          {"conv_filters", 4},   {"conv_kernel", 3},
          {"primary_caps_channels", 2}, {"primary_caps_dim", 4}, {"primary_kernel", 3},
          {"primary_stride", 2},        {"class_caps_dim", 4}};
}

/// Synthetic two-class dataset plus a config file pointing at it.
struct Workspace {
  TempDir dir{"experiment"};
  std::filesystem::path config;

  explicit Workspace(json overrides = json::object()) {
    capsule::testing::write_synthetic_dataset(dir / "data", 12, 28, 3);
    json cfg = {{"dataset_root", "data"},
                {"classes", {"A", "H"}},
                {"split", {{"train", 12}, {"val", 4}, {"test", 8}}},
                {"model", tiny_model()},
                {"train", {{"epochs", 2}, {"batch_size", 4}, {"learning_rate", 1e-3}}},
                {"seed", 11},
                {"out_dir", "run"}};
    cfg.merge_patch(overrides);
    config = dir / "config.json";
    std::ofstream(config) << cfg.dump(2);
  }

  CommandOptions options() const {
    CommandOptions o;
    o.config = config;
    return o;
  }
};

} // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults and relative paths") {
    const ExperimentConfig c = parse_experiment_config(json::object(), "/base");
    CHECK(c.classes == std::vector<std::string>{"A", "H"});
    CHECK(c.model.num_classes == 2);
    CHECK(c.split == SplitSpec{});
    CHECK(c.train.epochs == 100);
    CHECK(c.augment.regime == Regime::None);

    const ExperimentConfig d = parse_experiment_config({{"dataset_root", "data"}, {"out_dir", "/abs/out"}}, "/base");
    CHECK(d.dataset_root == std::filesystem::path("/base/data"));
    CHECK(d.out_dir == std::filesystem::path("/abs/out"));
  }

  TEST_CASE("unknown and misplaced keys are named") {
    CHECK_THROWS_WITH(parse_experiment_config({{"epochs", 3}}), doctest::Contains("config.epochs"));
    CHECK_THROWS_WITH(parse_experiment_config({{"train", {{"epoch", 3}}}}), doctest::Contains("train.epoch"));
    CHECK_THROWS_WITH(parse_experiment_config({{"model", {{"seed", 3}}}}), doctest::Contains("model.seed"));
    CHECK_THROWS_WITH(parse_experiment_config({{"split", {{"seed", 3}}}}), doctest::Contains("split.seed"));
    CHECK_THROWS_WITH(parse_experiment_config({{"augment", {{"regime", "wild"}}}}), doctest::Contains("wild"));
    CHECK_THROWS_WITH(parse_experiment_config({{"train", {{"epochs", "ten"}}}}), doctest::Contains("train.epochs"));
    CHECK_THROWS_WITH(parse_experiment_config({{"model", {{"num_classes", 3}}}}),
                      doctest::Contains("num_classes"));
  }

  TEST_CASE("round trip through json") {
    ExperimentConfig c = parse_experiment_config(
        {{"classes", {"A", "B", "H"}}, {"augment", {{"regime", "lossy"}, {"rotation_max_deg", 15.0}}}, {"seed", 9}},
        "/x");
    const ExperimentConfig back = parse_experiment_config(experiment_config_to_json(c), "/x");
    CHECK(back.classes == c.classes);
    CHECK(back.augment == c.augment);
    CHECK(back.model == c.model);
    CHECK(back.seed == 9);
  }

  TEST_CASE("sub-seeds derive from the master seed") {
    const DerivedSeeds a = DerivedSeeds::from(0), b = DerivedSeeds::from(1);
    CHECK(a.split != a.init);
    CHECK(a.shuffle != a.augment);
    CHECK((a.split ^ b.split) == 1);
    ExperimentConfig c;
    c.seed = 5;
    CHECK(resolved_model_config(c).seed == DerivedSeeds::from(5).init);
  }
}

TEST_SUITE("commands") {
  TEST_CASE("train writes the artifact set; eval reproduces its metrics") {
    Workspace ws;
    std::ostringstream out, err;
    REQUIRE(cmd_train(ws.options(), out, err) == 0);
    const auto run = ws.dir / "run";
    for (const char* f : {"history.csv", "metrics.json", "roc_A.csv", "roc_H.csv", "confusion.csv", "accuracy.svg",
                          "loss.svg", "roc.svg", "model.ckpt", "split_manifest.csv", "run_manifest.json"}) {
      CHECK_MESSAGE(std::filesystem::exists(run / f), f);
    }
    const json manifest = json::parse(slurp(run / "run_manifest.json"));
    CHECK(manifest["toolkit_version"] == kToolkitVersion);
    CHECK(manifest["derived_seeds"]["init"] == DerivedSeeds::from(11).init);
    CHECK(manifest["split_sizes"]["test"] == 8);
    CHECK(manifest["class_names"] == json{"A", "H"});
    CHECK(manifest["param_count"] == param_count(load_checkpoint(run / "model.ckpt").model));

    CommandOptions eval = ws.options();
    eval.checkpoint = run / "model.ckpt";
    eval.out_dir = ws.dir / "eval";
    std::ostringstream eout, eerr;
    REQUIRE(cmd_eval(eval, eout, eerr) == 0);
    CHECK(slurp(ws.dir / "eval" / "metrics.json") == slurp(run / "metrics.json"));

    eval.split = "val";
    eval.out_dir.reset();
    CHECK(cmd_eval(eval, eout, eerr) == 0);
    CHECK(std::filesystem::exists(run / "eval_val" / "metrics.json"));
  }

  TEST_CASE("eval failures exit non-zero with a message") {
    Workspace ws;
    CommandOptions o = ws.options();
    o.checkpoint = ws.dir / "missing.ckpt";
    std::ostringstream out, err;
    CHECK(cmd_eval(o, out, err) == 1);
    CHECK(err.str().find("missing.ckpt") != std::string::npos);

    // A checkpoint whose architecture differs from the config.
    ModelConfig other = ModelConfig::small_test();
    save_checkpoint(ws.dir / "other.ckpt", build_model(other), {"A", "H"});
    o.checkpoint = ws.dir / "other.ckpt";
    std::ostringstream err2;
    CHECK(cmd_eval(o, out, err2) == 1);
    CHECK(err2.str().find("does not match") != std::string::npos);

    CommandOptions bad_split = ws.options();
    std::ostringstream tout, terr;
    REQUIRE(cmd_train(ws.options(), tout, terr) == 0);
    bad_split.checkpoint = ws.dir / "run" / "model.ckpt";
    bad_split.split = "holdout";
    std::ostringstream err3;
    CHECK(cmd_eval(bad_split, out, err3) == 1);
    CHECK(err3.str().find("holdout") != std::string::npos);
  }

  TEST_CASE("train reports a missing dataset") {
    Workspace ws(json{{"dataset_root", "nowhere"}});
    std::ostringstream out, err;
    CHECK(cmd_train(ws.options(), out, err) == 1);
    CHECK(err.str().find("nowhere") != std::string::npos);
  }

  TEST_CASE("seed override changes the run") {
    Workspace ws;
    CommandOptions o = ws.options();
    o.seed = 12;
    o.out_dir = ws.dir / "run12";
    std::ostringstream out, err;
    REQUIRE(cmd_train(o, out, err) == 0);
    const json m = json::parse(slurp(ws.dir / "run12" / "run_manifest.json"));
    CHECK(m["config"]["seed"] == 12);
    CHECK(m["derived_seeds"]["split"] == DerivedSeeds::from(12).split);
  }

  TEST_CASE("preview writes original/augmented pairs") {
    Workspace ws(json{{"augment", {{"regime", "lossless"}}}});
    CommandOptions o = ws.options();
    o.preview_count = 3;
    std::ostringstream out, err;
    REQUIRE(cmd_preview_augment(o, out, err) == 0);
    const auto dir = ws.dir / "run" / "preview";
    for (int i = 0; i < 3; ++i) {
      CHECK(std::filesystem::exists(dir / fmt::format("{:03}_original.png", i)));
      CHECK(std::filesystem::exists(dir / fmt::format("{:03}_lossless.png", i)));
    }
    CHECK_FALSE(std::filesystem::exists(dir / "003_original.png"));
    const RawImage img = read_png(dir / "000_lossless.png");
    CHECK(img.width == 12);
  }

  TEST_CASE("gradcheck passes and catches a broken backward rule") {
    Workspace ws;
    std::ostringstream out, err;
    CHECK(cmd_gradcheck(ws.options(), out, err) == 0);
    CHECK(out.str().find("gradcheck: OK") != std::string::npos);
    CHECK(out.str().find("transforms") != std::string::npos);

    for (const char* op : {"squash", "conv2d", "relu"}) {
      CommandOptions o = ws.options();
      o.corrupt_op = op;
      std::ostringstream cout_, cerr_;
      CHECK_MESSAGE(cmd_gradcheck(o, cout_, cerr_) == 1, op);
      CHECK(cerr_.str().find("FAILED") != std::string::npos);
    }

    CommandOptions unknown = ws.options();
    unknown.corrupt_op = "frobnicate";
    std::ostringstream uout, uerr;
    CHECK(cmd_gradcheck(unknown, uout, uerr) == 1);
    CHECK(uerr.str().find("frobnicate") != std::string::npos);
  }
}
