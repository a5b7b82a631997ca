#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "support/gradient_check.hpp"
#include "support/reference_cnn.hpp"
#include "vismal/classifier.hpp"
#include "vismal/error.hpp"
#include "vismal/random.hpp"

using namespace vismal;

namespace {

ClassifierConfig toy_config() {
  ClassifierConfig cfg;
  cfg.input_width = 16;
  cfg.input_height = 16;
  cfg.conv = {{4, 3}};
  cfg.dense = {8};
  cfg.num_classes = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 20;
  cfg.patience = 0;
  cfg.seed = 5;
  return cfg;
}

// Two classes of constant images: dark and bright.
std::vector<LabeledSample> toy_dataset(std::size_t n, std::uint64_t seed, std::size_t side = 16) {
  Rng rng(seed);
  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const auto level = static_cast<std::uint8_t>((label == 0 ? 20 : 170) + uniform_index(rng, 60));
    out.push_back({GrayImage(side, side, level), label});
  }
  return out;
}

std::vector<double> random_inputs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = uniform_unit(rng);
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vismal_test_classifier_" + name);
}

}  // namespace

TEST_CASE("init_model shapes and determinism") {
  ClassifierConfig cfg;
  const auto a = init_model(cfg);
  const auto b = init_model(cfg);
  CHECK(a == b);
  CHECK(a.dense_kernel(cfg.dense.size()).shape == std::vector<std::size_t>{25, 128});
  CHECK(a.dense_bias(cfg.dense.size()).shape == std::vector<std::size_t>{25});
  CHECK(cfg.flatten_size() == 4 * 4 * 256);
  CHECK(a.dense_kernel(0).shape == std::vector<std::size_t>{256, 4096});

  for (std::size_t i = 0; i < cfg.conv.size(); ++i) {
    const auto& bias = a.conv_bias(i).data;
    CHECK(std::all_of(bias.begin(), bias.end(), [](float v) { return v == 0.0f; }));
    const auto& k = a.conv_kernel(i);
    const double limit = std::sqrt(6.0 / static_cast<double>(k.shape[1] * k.shape[2] * k.shape[3]));
    CHECK(std::all_of(k.data.begin(), k.data.end(), [&](float v) { return std::abs(v) <= limit; }));
  }

  auto other = cfg;
  other.seed += 1;
  CHECK_FALSE(init_model(other) == a);
}

TEST_CASE("shape algebra matches runtime") {
  for (std::size_t stride : {1, 2, 3}) {
    for (std::size_t side : {7, 8, 12}) {
      ClassifierConfig cfg;
      cfg.input_width = side;
      cfg.input_height = side;
      cfg.conv = {{3, 3}, {2, 2}};
      cfg.dense = {5};
      cfg.num_classes = 3;
      cfg.pool_stride = stride;
      const auto m = init_model<double>(cfg);
      const auto expected = reference::forward_one(m, random_inputs(side * side, side + stride));
      // A wrong flatten size would break the dense kernel shape checked here.
      CHECK(m.dense_kernel(0).shape[1] == cfg.flatten_size());
      const auto probs = forward(m, std::span<const double>(random_inputs(side * side, side + stride)), false);
      for (std::size_t j = 0; j < 3; ++j) CHECK(probs.row(0)[j] == doctest::Approx(expected[j]).epsilon(1e-9));
    }
  }
}

TEST_CASE("config validation") {
  ClassifierConfig cfg;
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_classes = 0;
  CHECK_THROWS_AS(init_model(cfg), ConfigError);
  cfg = {};
  cfg.conv.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward yields distributions") {
  const auto cfg = testing::reduced_config();
  const auto m = init_model<double>(cfg);
  const auto x = random_inputs(6 * 64, 3);
  for (bool train : {false, true}) {
    const auto probs = forward(m, std::span<const double>(x), train, 9);
    REQUIRE(probs.rows == 6);
    for (std::size_t i = 0; i < probs.rows; ++i) {
      const auto row = probs.row(i);
      CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(std::all_of(row.begin(), row.end(), [](double p) { return p >= 0.0; }));
    }
  }

  const auto zero = Model::zeros(ClassifierConfig{});
  std::vector<GrayImage> images{GrayImage(64, 64, 37)};
  const auto uniform = forward(zero, std::span<const GrayImage>(images), false);
  for (double p : uniform.row(0)) CHECK(p == doctest::Approx(1.0 / 25.0).epsilon(1e-6));

  std::vector<GrayImage> wrong{GrayImage(32, 64)};
  CHECK_THROWS_AS(forward(zero, std::span<const GrayImage>(wrong), false), ShapeError);
}

TEST_CASE("forward matches the scalar reference on a hand-set model") {
  auto cfg = testing::reduced_config();
  auto m = BasicModel<double>::zeros(cfg);
  std::size_t counter = 0;
  for (auto& t : m.tensors) {
    for (auto& w : t.data) w = 0.3 * std::sin(0.7 * static_cast<double>(++counter));
  }
  std::vector<double> x(2 * 64);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>((i * 37) % 256) / 255.0;
  const auto probs = forward(m, std::span<const double>(x), false);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto ref = reference::forward_one(m, std::vector<double>(x.begin() + s * 64, x.begin() + (s + 1) * 64));
    for (std::size_t j = 0; j < 2; ++j) CHECK(probs.row(s)[j] == doctest::Approx(ref[j]).epsilon(1e-12));
  }

  // Float model agrees with the double reference to single precision.
  Model f = Model::zeros(cfg);
  for (std::size_t t = 0; t < m.tensors.size(); ++t) {
    for (std::size_t k = 0; k < m.tensors[t].data.size(); ++k) f.tensors[t].data[k] = static_cast<float>(m.tensors[t].data[k]);
  }
  std::vector<float> xf(x.begin(), x.end());
  const auto pf = forward(f, std::span<const float>(xf), false);
  for (std::size_t i = 0; i < pf.values.size(); ++i) CHECK(pf.values[i] == doctest::Approx(probs.values[i]).epsilon(1e-5));
}

TEST_CASE("loss") {
  const ClassifierConfig cfg;
  const auto zero = Model::zeros(cfg);
  ProbabilityMatrix onehot{2, 25, std::vector<double>(50, 0.0)};
  onehot.values[3] = 1.0;
  onehot.values[25 + 7] = 1.0;
  const std::vector<std::size_t> labels{3, 7};
  CHECK(loss(onehot, labels, zero, 0.0) == 0.0);

  ProbabilityMatrix uniform{2, 25, std::vector<double>(50, 1.0 / 25.0)};
  CHECK(loss(uniform, labels, zero, 0.0) == doctest::Approx(std::log(25.0)).epsilon(1e-12));
  CHECK(loss(uniform, labels, zero, 0.0) == doctest::Approx(3.2189).epsilon(1e-4));

  // Confident wrong prediction hits the clamp instead of infinity.
  ProbabilityMatrix wrong{1, 25, std::vector<double>(25, 0.0)};
  wrong.values[0] = 1.0;
  const std::vector<std::size_t> one{4};
  CHECK(loss(wrong, one, zero, 0.0) == doctest::Approx(-std::log(1e-12)));

  auto tiny = init_model(testing::reduced_config());
  const double plain = loss(uniform, labels, tiny, 0.0);
  CHECK(loss(uniform, labels, tiny, 0.01) > plain);
  double sq = 0.0;
  for (std::size_t i = 0; i < tiny.config.conv.size(); ++i) {
    for (float w : tiny.conv_kernel(i).data) sq += static_cast<double>(w) * w;
  }
  CHECK(l2_penalty(tiny, 0.01) == doctest::Approx(0.01 * sq));
}

TEST_CASE("analytic gradients match finite differences") {
  auto cfg = testing::reduced_config();
  const auto model = init_model<double>(cfg);
  REQUIRE(model.parameter_count() <= 1000);
  const auto x = random_inputs(4 * 64, 21);
  const std::vector<std::size_t> labels{0, 1, 1, 0};
  const auto checks = testing::finite_difference_check(model, x, labels, 17, 1e-4);
  REQUIRE(checks.size() == model.tensors.size());
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradient agreement holds across seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto cfg = testing::reduced_config();
    cfg.seed = seed;
    const auto model = init_model<double>(cfg);
    const auto x = random_inputs(4 * 64, seed * 7);
    const std::vector<std::size_t> labels{0, 1, 1, 0};
    for (const auto& c : testing::finite_difference_check(model, x, labels, seed, 1e-4)) {
      INFO(seed << " " << c.name);
      CHECK(c.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("optimizer steps") {
  auto cfg = testing::reduced_config();
  cfg.dropout = 0.0;
  auto model = init_model<double>(cfg);
  const auto x = random_inputs(64, 4);
  const std::vector<std::size_t> label{1};

  SUBCASE("repeated sample loss does not increase") {
    auto adam = AdamState<double>::for_model(model);
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 50; ++step) {
      const auto g = backward_and_step(model, std::span<const double>(x), label, adam, 0);
      CHECK(g.loss <= prev + 1e-12);
      prev = g.loss;
    }
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    model.config.learning_rate = 0.0;
    const auto before = model;
    auto adam = AdamState<double>::for_model(model);
    for (int step = 0; step < 3; ++step) backward_and_step(model, std::span<const double>(x), label, adam, 0);
    CHECK(model == before);
  }
  SUBCASE("non-finite input aborts") {
    auto bad = x;
    bad[5] = std::numeric_limits<double>::quiet_NaN();
    auto adam = AdamState<double>::for_model(model);
    CHECK_THROWS_AS(backward_and_step(model, std::span<const double>(bad), label, adam, 0), NumericsError);
  }
}

TEST_CASE("training on a separable toy set") {
  const auto cfg = toy_config();
  const auto data = toy_dataset(40, 1);
  const auto run = train(init_model(cfg), data);
  REQUIRE_FALSE(run.log.empty());
  CHECK(run.log.size() <= 20);
  CHECK(run.log.back().train_accuracy >= 0.95);

  const auto again = train(init_model(cfg), data);
  CHECK(again.model == run.model);
  REQUIRE(again.log.size() == run.log.size());
  for (std::size_t i = 0; i < run.log.size(); ++i) {
    CHECK(again.log[i].loss == run.log[i].loss);
    CHECK(again.log[i].train_accuracy == run.log[i].train_accuracy);
  }

  const auto held_out = toy_dataset(10, 99);
  for (const auto& s : held_out) {
    const auto before = run.model;
    const auto p = predict(run.model, s.image);
    CHECK(p.label == s.label);
    CHECK(p.label == argmax(p.probabilities));
    CHECK(run.model == before);
  }
  CHECK_THROWS_AS(predict(run.model, GrayImage(8, 16)), ShapeError);
}

TEST_CASE("training edge cases") {
  auto cfg = toy_config();
  cfg.epochs = 0;
  const auto initial = init_model(cfg);
  const auto data = toy_dataset(8, 2);
  const auto run = train(initial, data);
  CHECK(run.model == initial);
  CHECK(run.log.empty());

  CHECK_THROWS_AS(train(initial, std::span<const LabeledSample>{}), ConfigError);
  std::vector<LabeledSample> bad{{GrayImage(16, 16), 2}};
  CHECK_THROWS_AS(train(init_model(toy_config()), bad), LabelError);

  std::ostringstream csv;
  const std::vector<EpochLog> log{{1, 0.5, 0.75}};
  write_training_log_csv(log, csv);
  CHECK(csv.str() == "epoch,loss,train_accuracy\n1,0.5,0.75\n");
}

TEST_CASE("argmax tie-break") {
  const std::vector<double> flat(25, 0.04);
  CHECK(argmax(flat) == 0);
  const std::vector<double> tie{0.1, 0.45, 0.45};
  CHECK(argmax(tie) == 1);
  const auto zero = Model::zeros(ClassifierConfig{});
  CHECK(predict(zero, GrayImage(64, 64, 12)).label == 0);
}

TEST_CASE("model persistence") {
  const auto cfg = testing::reduced_config();
  auto m = init_model(cfg);
  m.class_names = {"alpha", "beta"};
  std::stringstream buf;
  save_model(m, buf);
  const std::string bytes = buf.str();
  std::istringstream in(bytes);
  CHECK(load_model(in) == m);

  const auto path = temp_path("model.bin");
  save_model(m, path);
  CHECK(load_model(path) == m);
  CHECK(load_model(path, cfg) == m);
  auto other = cfg;
  other.dense = {7};
  CHECK_THROWS_AS(load_model(path, other), ConfigError);

  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_model(truncated), FormatError);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  std::istringstream versioned(wrong_version);
  CHECK_THROWS_AS(load_model(versioned), FormatError);
  std::istringstream junk("not a model");
  CHECK_THROWS_AS(load_model(junk), FormatError);
  CHECK_THROWS_AS(load_model(temp_path("missing.bin")), IoError);
  std::filesystem::remove(path);
}
