#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "keycap/error.hpp"
#include "keycap/training.hpp"
#include "support.hpp"

using namespace keycap;

namespace {

Parameters scalar_params(double x) {
  Parameters p;
  p.add("x", Tensor::matrix(1, 1, {x}));
  return p;
}

std::vector<Example> random_examples(std::size_t n, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex = support::random_example(12, 4, 6, 2 + rng.below(5), rng);
    ex.id = "ex" + std::to_string(i);
    out.push_back(std::move(ex));
  }
  return out;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 3;
  cfg.learning_rate = 0.01;
  cfg.seed = 4;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("keycap_training_" + name)).string();
}

}  // namespace

TEST_CASE("adam step against the closed form") {
  Parameters p;
  p.add("w", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  Parameters g;
  g.add("w", Tensor::matrix(1, 3, {0.3, -2.0, 0.0}));
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  AdamState st = AdamState::like(p);

  // First step: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
  adam_step(p, g, st, cfg);
  CHECK(st.step == 1);
  const Tensor& w = p.at("w");
  CHECK(std::abs(w[0] - (0.5 - 0.01 * 0.3 / (0.3 + 1e-8))) < 1e-15);
  CHECK(std::abs(w[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-8))) < 1e-15);
  CHECK(w[2] == 2.0);

  // Second step by hand.
  Parameters g2;
  g2.add("w", Tensor::matrix(1, 3, {-0.1, 1.0, 0.5}));
  const double prev[3] = {w[0], w[1], w[2]};
  const double g1v[3] = {0.3, -2.0, 0.0}, g2v[3] = {-0.1, 1.0, 0.5};
  adam_step(p, g2, st, cfg);
  for (int i = 0; i < 3; ++i) {
    const double m = 0.9 * (0.1 * g1v[i]) + 0.1 * g2v[i];
    const double v = 0.999 * (0.001 * g1v[i] * g1v[i]) + 0.001 * g2v[i] * g2v[i];
    const double mh = m / (1 - 0.9 * 0.9), vh = v / (1 - 0.999 * 0.999);
    CHECK(std::abs(p.at("w")[i] - (prev[i] - 0.01 * mh / (std::sqrt(vh) + 1e-8))) < 1e-15);
  }
}

TEST_CASE("zero gradients leave parameters unchanged and decay the moments") {
  Parameters p = scalar_params(1.5);
  AdamState st = AdamState::like(p);
  TrainConfig cfg;
  adam_step(p, scalar_params(0.4), st, cfg);
  const double after_one = p.at("x")[0];
  const double m = st.m.at("x")[0], v = st.v.at("x")[0];
  Parameters fresh = scalar_params(after_one);
  AdamState zero_st = AdamState::like(fresh);
  adam_step(fresh, scalar_params(0.0), zero_st, cfg);
  CHECK(fresh.at("x")[0] == after_one);
  adam_step(p, scalar_params(0.0), st, cfg);
  CHECK(st.m.at("x")[0] == 0.9 * m);
  CHECK(st.v.at("x")[0] == 0.999 * v);
}

TEST_CASE("adam minimises x squared") {
  Parameters p = scalar_params(1.0);
  AdamState st = AdamState::like(p);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  for (int i = 0; i < 200; ++i) adam_step(p, scalar_params(2.0 * p.at("x")[0]), st, cfg);
  CHECK(std::abs(p.at("x")[0]) < 1e-2);
}

TEST_CASE("non-finite gradient names the parameter") {
  Parameters p;
  p.add("a", Tensor::zeros({1, 2}));
  p.add("decoder.out.bias", Tensor::zeros({1, 2}));
  Parameters g = p.zeros_like();
  g.at("decoder.out.bias")[1] = std::nan("");
  AdamState st = AdamState::like(p);
  try {
    adam_step(p, g, st, TrainConfig{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("decoder.out.bias") != std::string::npos);
  }
  g.at("decoder.out.bias")[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_step(p, g, st, TrainConfig{}), NumericError);
}

TEST_CASE("gradient clipping") {
  Parameters g;
  g.add("a", Tensor::matrix(1, 2, {3.0, 0.0}));
  g.add("b", Tensor::matrix(1, 1, {4.0}));
  CHECK(clip_gradients(g, 10.0) == 5.0);
  CHECK(g.at("a")[0] == 3.0);
  clip_gradients(g, 1.0);
  CHECK(std::abs(g.at("a")[0] - 0.6) < 1e-15);
  CHECK(std::abs(g.at("b")[0] - 0.8) < 1e-15);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.learning_rate = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("batch gradient is the token-weighted mean") {
  ModelConfig cfg = support::micro_config();
  CaptionModel model(cfg, 3);
  support::randomize(model.parameters(), 4);
  auto examples = random_examples(3, 9);
  std::vector<const Example*> batch = {&examples[0], &examples[1], &examples[2]};
  Parameters grads = model.parameters().zeros_like();
  const double loss = batch_gradients(model, batch, grads);
  CHECK(std::abs(loss - dataset_loss(model, examples)) < 1e-12);

  // Central difference of dataset_loss on a few scalars.
  SeededRng rng(1);
  for (int probe = 0; probe < 10; ++probe) {
    auto& e = model.parameters().entries()[rng.below(model.parameters().size())];
    const std::size_t i = rng.below(e.value.size());
    const double orig = e.value[i];
    e.value[i] = orig + 1e-5;
    const double up = dataset_loss(model, examples);
    e.value[i] = orig - 1e-5;
    const double down = dataset_loss(model, examples);
    e.value[i] = orig;
    const double numeric = (up - down) / 2e-5, analytic = grads.at(e.name)[i];
    CAPTURE(e.name);
    CHECK(std::abs(analytic - numeric) <= 1e-6 + 1e-4 * std::abs(numeric));
  }
}

TEST_CASE("checkpoint round-trip is byte-exact") {
  ModelConfig cfg = support::micro_config();
  CaptionModel model(cfg, 5);
  Checkpoint c;
  c.params = model.parameters();
  c.adam = AdamState::like(c.params);
  support::randomize(c.adam.m, 1);
  support::randomize(c.adam.v, 2);
  c.adam.step = 17;
  c.vocab_fingerprint = 0xdeadbeef;
  c.config = "seed=1\ntrain.epochs=3\n";
  const auto bytes = c.to_bytes();
  CHECK(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "KCAP");

  const std::string path = temp_path("roundtrip.kcap");
  save_checkpoint(c, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.params == c.params);
  CHECK(back.adam.m == c.adam.m);
  CHECK(back.adam.v == c.adam.v);
  CHECK(back.adam.step == 17);
  CHECK(back.vocab_fingerprint == 0xdeadbeef);
  CHECK(back.config == c.config);
  CHECK(back.to_bytes() == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected with an offset") {
  Checkpoint c;
  c.params = scalar_params(1.25);
  c.adam = AdamState::like(c.params);
  const auto good = c.to_bytes();

  auto expect_format = [](std::vector<std::uint8_t> bytes, const char* fragment) {
    try {
      Checkpoint::from_bytes(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CAPTURE(e.what());
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  };
  expect_format({}, "truncated");
  auto magic = good;
  magic[0] = 'X';
  expect_format(magic, "magic");
  auto version = good;
  version[4] = 2;
  expect_format(version, "version");
  auto flipped = good;
  flipped[good.size() - 10] ^= 0x01;  // inside the payload
  expect_format(flipped, "checksum");
  expect_format(std::vector<std::uint8_t>(good.begin(), good.end() - 5), "truncated");
  auto extra = good;
  extra.push_back(0);
  expect_format(extra, "trailing");

  const std::string empty = temp_path("empty.kcap");
  std::ofstream(empty).close();
  CHECK_THROWS_AS(load_checkpoint(empty), FormatError);
  std::filesystem::remove(empty);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.kcap")), InputError);
}

TEST_CASE("training is deterministic and logs every batch") {
  ModelConfig mc = support::micro_config();
  auto train_set = random_examples(7, 1), val_set = random_examples(2, 2);
  TrainConfig cfg = quick_config();

  CaptionModel a(mc, 11), b(mc, 11);
  std::vector<std::string> lines;
  TrainResult ra = train(a, train_set, val_set, cfg, [&](const LogRecord& r) { lines.push_back(r.format()); });
  TrainResult rb = train(b, train_set, val_set, cfg);
  CHECK(a.parameters() == b.parameters());
  CHECK(ra.best.to_bytes() == rb.best.to_bytes());

  // ceil(7/3) = 3 batches plus one validation record per epoch.
  CHECK(ra.log.size() == 3 * 4);
  CHECK(lines.size() == ra.log.size());
  for (const auto& r : ra.log) CHECK(std::isfinite(r.loss));
  CHECK(lines.front().rfind("epoch=1 batch=1 loss=", 0) == 0);
  CHECK(lines[3].find("val_loss=") != std::string::npos);

  cfg.seed = 5;
  CaptionModel c(mc, 11);
  train(c, train_set, val_set, cfg);
  CHECK_FALSE(c.parameters() == a.parameters());
}

TEST_CASE("best checkpoint tracks the lowest validation loss") {
  ModelConfig mc = support::micro_config();
  auto train_set = random_examples(6, 3), val_set = random_examples(3, 4);
  TrainConfig cfg = quick_config();
  cfg.epochs = 6;
  cfg.learning_rate = 0.05;
  CaptionModel m(mc, 2);
  TrainResult r = train(m, train_set, val_set, cfg);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  for (const auto& rec : r.log) {
    if (rec.val_loss && *rec.val_loss < best) {
      best = *rec.val_loss;
      best_epoch = rec.epoch;
    }
  }
  CHECK(r.best_epoch == best_epoch);
  CHECK(r.best_val_loss == best);
  CHECK(r.best.adam.step == best_epoch * 2);
  CaptionModel restored(mc, r.best.params);
  CHECK(dataset_loss(restored, val_set) == best);
}

TEST_CASE("training loss falls on a small set") {
  ModelConfig mc = support::micro_config();
  auto train_set = random_examples(4, 5);
  TrainConfig cfg = quick_config();
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.03;
  CaptionModel m(mc, 8);
  const double before = dataset_loss(m, train_set);
  train(m, train_set, train_set, cfg);
  CHECK(dataset_loss(m, train_set) < 0.5 * before);
}

TEST_CASE("empty splits are input errors") {
  ModelConfig mc = support::micro_config();
  CaptionModel m(mc, 1);
  auto some = random_examples(2, 1);
  std::vector<Example> none;
  CHECK_THROWS_AS(train(m, none, some, quick_config()), InputError);
  CHECK_THROWS_AS(train(m, some, none, quick_config()), InputError);
}
