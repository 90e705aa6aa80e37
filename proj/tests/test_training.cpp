#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stack>

#include <doctest.h>

#include "capsule/artifacts.hpp"
#include "capsule/training.hpp"
#include "test_support.hpp"

using namespace capsule;
using capsule::testing::random_tensor;
using capsule::testing::TempDir;

namespace {

double concordance(const std::vector<double>& scores, const std::vector<int>& labels) {
  double hits = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      hits += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return hits / pairs;
}

std::vector<ImageSample> glyph_samples(std::size_t per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ImageSample> out;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t label = 0; label < 2; ++label)
      out.push_back({capsule::testing::synthetic_glyph(label ? 'H' : 'A', 28, rng), label, fmt::format("g{}", out.size())});
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Tag balance check; enough to catch truncated or mis-nested output.
bool tags_balanced(const std::string& xml) {
  std::stack<std::string> open;
  for (std::size_t pos = xml.find('<'); pos != std::string::npos; pos = xml.find('<', pos + 1)) {
    const std::size_t end = xml.find('>', pos);
    if (end == std::string::npos) return false;
    const std::string tag = xml.substr(pos + 1, end - pos - 1);
    if (tag.empty() || tag[0] == '?' || tag[0] == '!' || tag.back() == '/') continue;
    const std::string name = tag.substr(tag[0] == '/' ? 1 : 0, tag.find_first_of(" \n\t") - (tag[0] == '/' ? 1 : 0));
    if (tag[0] == '/') {
      if (open.empty() || open.top() != name) return false;
      open.pop();
    } else {
      open.push(name);
    }
  }
  return open.empty();
}

} // namespace

TEST_SUITE("adam") {
  TEST_CASE("first step moves by the learning rate") {
    Tensor p = Tensor::from({1}, {1.0});
    Tensor* params[] = {&p};
    const Tensor g[] = {Tensor::from({1}, {1.0})};
    AdamState st;
    adam_step(params, g, st);
    CHECK(std::abs(p[0] - 0.999900000001) <= 1e-15);
  }

  TEST_CASE("frozen five-step trace") {
    Tensor p = Tensor::from({1}, {1.0});
    Tensor* params[] = {&p};
    AdamState st;
    st.lr = 0.01;
    const double grads[] = {1, -0.5, 2, 0.1, -1};
    const double expect[] = {0.9900000001, 0.9873366297370904, 0.9807555137842804, 0.9751162334267578,
                             0.9729303044883698};
    for (int i = 0; i < 5; ++i) {
      const Tensor g[] = {Tensor::from({1}, {grads[i]})};
      adam_step(params, g, st);
      CHECK(std::abs(p[0] - expect[i]) <= 1e-12);
    }
    CHECK(st.t == 5);
  }

  TEST_CASE("zero learning rate and zero gradients leave parameters unchanged") {
    std::mt19937_64 rng(1);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5}, rng);
    const Tensor a0 = a, b0 = b;
    Tensor* params[] = {&a, &b};
    AdamState st;
    st.lr = 0.0;
    const Tensor g[] = {random_tensor({3, 4}, rng), random_tensor({5}, rng)};
    adam_step(params, g, st);
    CHECK(a == a0);
    AdamState st2;
    const Tensor zero[] = {Tensor::zeros({3, 4}), Tensor::zeros({5})};
    adam_step(params, zero, st2);
    CHECK(a == a0);
    CHECK(b == b0);
  }

  TEST_CASE("non-finite gradients are fatal and name the parameter") {
    Tensor p = Tensor::from({2}, {1, 2});
    Tensor* params[] = {&p};
    const Tensor g[] = {Tensor::from({2}, {0.1, std::nan("")})};
    const std::string names[] = {"transforms"};
    AdamState st;
    CHECK_THROWS_WITH_AS(adam_step(params, g, st, names), doctest::Contains("transforms"), TrainingError);
    CHECK(p == Tensor::from({2}, {1, 2}));
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("argmax ties go low") {
    const double s[] = {0.2, 0.7, 0.7};
    CHECK(argmax(s) == 1);
  }

  TEST_CASE("roc examples") {
    const double perfect[] = {0.9, 0.8, 0.3, 0.1};
    const int lab[] = {1, 1, 0, 0};
    const auto r = roc_curve(perfect, lab);
    CHECK(r.front() == RocPoint{0, 0});
    CHECK(r.back() == RocPoint{1, 1});
    CHECK(auc(r) == 1.0);
    const int flipped[] = {0, 0, 1, 1};
    CHECK(auc(roc_curve(perfect, flipped)) == 0.0);

    const double constant[] = {0.5, 0.5, 0.5, 0.5};
    const auto c = roc_curve(constant, lab);
    CHECK(c.size() == 2); // one tied step
    CHECK(auc(c) == 0.5);
  }

  TEST_CASE("auc equals the pairwise concordance, ties counted half") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = 2 + rng() % 120;
      std::vector<double> scores(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = static_cast<double>(rng() % 12) / 11.0; // heavy ties
        labels[i] = static_cast<int>(rng() % 2);
      }
      labels[0] = 0;
      labels[1] = 1;
      REQUIRE(std::abs(auc(roc_curve(scores, labels)) - concordance(scores, labels)) <= 1e-12);
    }
  }

  TEST_CASE("roc is monotone") {
    std::mt19937_64 rng(8);
    std::vector<double> s(50);
    std::vector<int> l(50);
    for (std::size_t i = 0; i < 50; ++i) {
      s[i] = std::uniform_real_distribution<double>()(rng);
      l[i] = i % 3 == 0;
    }
    const auto r = roc_curve(s, l);
    for (std::size_t i = 1; i < r.size(); ++i) {
      CHECK(r[i].fpr >= r[i - 1].fpr);
      CHECK(r[i].tpr >= r[i - 1].tpr);
    }
  }

  TEST_CASE("roc needs both classes") {
    const double s[] = {0.1, 0.2};
    const int l[] = {1, 1};
    CHECK_THROWS(roc_curve(s, l));
  }

  TEST_CASE("confusion tallies rows by true class") {
    const std::size_t pred[] = {0, 1, 1, 1, 0};
    const std::size_t truth[] = {0, 0, 1, 1, 1};
    const ConfusionMatrix m = confusion(pred, truth, 2);
    CHECK(m == ConfusionMatrix{{1, 1}, {1, 2}});
    const std::size_t bad[] = {2, 0, 0, 0, 0};
    CHECK_THROWS(confusion(bad, truth, 2));
  }

  TEST_CASE("evaluate agrees with predict and is consistent") {
    const CapsNetModel model = build_model(ModelConfig::small_test());
    const auto samples = glyph_samples(6, 3);
    const EvalReport rep = evaluate(model, samples);
    REQUIRE(rep.auc.size() == 2);
    std::size_t total = 0, correct = 0;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        total += rep.confusion[i][j];
        if (i == j) correct += rep.confusion[i][j];
      }
    CHECK(total == samples.size());
    CHECK(rep.accuracy == doctest::Approx(static_cast<double>(correct) / total));
    const auto [loss, acc] = loss_and_accuracy(model, samples);
    CHECK(loss == doctest::Approx(rep.loss).epsilon(1e-14));
    CHECK(acc == rep.accuracy);
    for (double a : rep.auc) CHECK((a >= 0.0 && a <= 1.0));

    std::vector<ImageSample> one_class;
    for (const auto& s : samples)
      if (s.label == 0) one_class.push_back(s);
    const EvalReport single = evaluate(model, one_class);
    CHECK(std::isnan(single.auc[0]));
    CHECK(single.roc[0].empty());
  }
}

TEST_SUITE("train") {
  TEST_CASE("one epoch returns one record and changes the weights") {
    CapsNetModel model = build_model(ModelConfig::small_test());
    const CapsNetModel before = model;
    const auto data = glyph_samples(4, 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    int calls = 0;
    const auto hist = train(model, data, {}, AugmentPolicy{}, cfg, [&](const EpochRecord&) { ++calls; });
    REQUIRE(hist.size() == 1);
    CHECK(calls == 1);
    CHECK(hist[0].epoch == 1);
    CHECK(std::isfinite(hist[0].train_loss));
    CHECK(std::isnan(hist[0].val_loss));
    CHECK(hist[0].wall_seconds == 0.0);
    CHECK_FALSE(model.transforms == before.transforms);
  }

  TEST_CASE("training is deterministic for fixed seeds, with augmentation") {
    const auto data = glyph_samples(4, 2);
    const auto val = glyph_samples(2, 9);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.shuffle_seed = 5;
    cfg.augment_seed = 6;
    AugmentPolicy pol;
    pol.regime = Regime::Lossy;
    CapsNetModel a = build_model(ModelConfig::small_test()), b = a;
    const auto ha = train(a, data, val, pol, cfg);
    const auto hb = train(b, data, val, pol, cfg);
    CHECK(ha == hb);
    for (std::size_t i = 0; i < 5; ++i) CHECK(*a.params()[i] == *b.params()[i]);
  }

  TEST_CASE("loss falls on a small separable set") {
    CapsNetModel model = build_model(ModelConfig::small_test());
    const auto data = glyph_samples(5, 4);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 5;
    cfg.learning_rate = 1e-3;
    const auto hist = train(model, data, {}, AugmentPolicy{}, cfg);
    CHECK(hist.back().train_loss < hist.front().train_loss);
  }

  TEST_CASE("bad configuration is rejected") {
    CapsNetModel model = build_model(ModelConfig::small_test());
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS(train(model, glyph_samples(1, 1), {}, AugmentPolicy{}, cfg));
    cfg.batch_size = 2;
    CHECK_THROWS(train(model, {}, {}, AugmentPolicy{}, cfg));
  }
}

TEST_SUITE("artifacts") {
  TEST_CASE("history csv round trip keeps NaN and exact doubles") {
    TempDir dir("hist");
    const std::vector<EpochRecord> h{{1, 0.1 + 0.2, 0.5, std::nan(""), std::nan(""), 0.0},
                                     {2, 1.0 / 3.0, 0.75, 0.25, 1.0, 0.0}};
    write_history_csv(dir / "history.csv", h);
    const auto back = read_history_csv(dir / "history.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].train_loss == 0.1 + 0.2);
    CHECK(std::isnan(back[0].val_loss));
    CHECK(back[1] == h[1]);
    CHECK(slurp(dir / "history.csv").starts_with("epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds\n"));
  }

  TEST_CASE("metrics json round trip") {
    EvalReport r;
    r.accuracy = 0.75;
    r.loss = 0.123456789012345;
    r.auc = {0.9, std::nan("")};
    r.roc = {{{0, 0}, {0.5, 1}, {1, 1}}, {}};
    r.confusion = {{3, 1}, {0, 4}};
    const auto j = metrics_to_json(r, {"A", "H"});
    CHECK(j["auc"]["H"].is_null());
    const EvalReport back = metrics_from_json(nlohmann::json::parse(j.dump()), {"A", "H"});
    CHECK(back.accuracy == r.accuracy);
    CHECK(back.loss == r.loss);
    CHECK(back.auc[0] == 0.9);
    CHECK(std::isnan(back.auc[1]));
    CHECK(back.roc[0] == r.roc[0]);
    CHECK(back.confusion == r.confusion);
  }

  TEST_CASE("export writes every file and well-formed charts") {
    TempDir dir("export");
    const CapsNetModel model = build_model(ModelConfig::small_test());
    const EvalReport rep = evaluate(model, glyph_samples(3, 5));
    const std::vector<EpochRecord> h{{1, 0.7, 0.5, 0.6, 0.5, 0}, {2, 0.5, 0.75, 0.55, 0.5, 0}};
    const auto files = export_artifacts(dir.path(), h, &rep, {"A", "H"});
    for (const char* f : {"history.csv", "accuracy.svg", "loss.svg", "metrics.json", "roc_A.csv", "roc_H.csv",
                          "confusion.csv", "roc.svg"}) {
      CHECK(std::filesystem::exists(dir / f));
      CHECK(std::find(files.begin(), files.end(), f) != files.end());
    }
    for (const char* svg : {"accuracy.svg", "loss.svg", "roc.svg"}) {
      const std::string text = slurp(dir / svg);
      CHECK(text.find("<svg") != std::string::npos);
      CHECK(tags_balanced(text));
    }
    CHECK(slurp(dir / "roc_A.csv").starts_with("fpr,tpr\n0,0\n"));
  }

  TEST_CASE("chart with an empty series is still valid") {
    CHECK(tags_balanced(svg_line_chart("t", "x", "y", {{"none", {}, {}}}, 0, 1)));
    CHECK(tags_balanced(svg_line_chart("a<b & c", "x", "y", {{"s", {1, 2}, {0.5, 0.25}}}, 0, 1)));
  }
}
