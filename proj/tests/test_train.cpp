#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "gar/train.hpp"
#include "test_util.hpp"

using namespace gar;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.hops = 2;
  c.model.word_dim = 8;
  c.model.hidden = 8;
  c.batch_size = 4;
  c.lr0 = 1e-2;
  c.epochs = 4;
  return c;
}

std::vector<ClozeExample> tiny_corpus(std::size_t n, std::uint64_t seed = 3) {
  SynthConfig s;
  s.seed = seed;
  s.n_examples = n;
  s.n_entities = 10;
  s.n_facts = 4;
  return synth_generate(s);
}

double batch_loss_value(const ReaderParams& p, const Batch& b) {
  const BatchOutput out = forward(p, b);
  return batch_loss(out.probabilities, b.answers).item();
}

}  // namespace

TEST_CASE("loss examples") {
  CHECK(loss(Tensor::vector({1.0, 0.0}), 0).item() == 0.0);
  CHECK(loss(Tensor::vector({1.0 / std::exp(1.0), 1.0 - 1.0 / std::exp(1.0)}), 0).item() ==
        doctest::Approx(1.0).epsilon(1e-15));
  const double mean = batch_loss({Tensor::vector({0.5, 0.5}), Tensor::vector({0.75, 0.25})}, {0, 1}).item();
  CHECK(mean == doctest::Approx((std::log(2.0) + std::log(4.0)) / 2).epsilon(1e-15));

  reset_clamp_count();
  CHECK(loss(Tensor::vector({1.0, 0.0}), 1).item() == doctest::Approx(-std::log(kProbabilityFloor)));
  CHECK(clamp_count() == 1);
  CHECK_THROWS_AS(loss(Tensor::vector({1.0}), 1), IndexError);
  CHECK_THROWS_AS(batch_loss({Tensor::vector({1.0})}, {}), DimensionError);
}

TEST_CASE("loss gradient") {
  Tensor p = Tensor::vector({0.2, 0.8}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(loss(p, 1));
  }
  CHECK(p.grad()[0] == 0.0);
  CHECK(p.grad()[1] == doctest::Approx(-1.0 / 0.8).epsilon(1e-14));
}

TEST_CASE("gradient clipping") {
  CHECK(clip_gradients({{30.0, 40.0}}, 10.0) == std::vector<std::vector<double>>{{6.0, 8.0}});
  CHECK(clip_gradients({{3.0, 4.0}}, 10.0) == std::vector<std::vector<double>>{{3.0, 4.0}});
  CHECK(clip_gradients({{0.0, 0.0}, {0.0}}, 10.0) == std::vector<std::vector<double>>{{0.0, 0.0}, {0.0}});
  CHECK_THROWS_AS(clip_gradients({{1.0}}, 0.0), ParameterError);

  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> g(3, std::vector<double>(4));
    for (auto& v : g) {
      for (double& x : v) x = rng.normal() * 10;
    }
    std::vector<std::span<double>> before(g.begin(), g.end());
    const double n0 = global_norm(before);
    const auto clipped = clip_gradients(g, 10.0);
    std::vector<std::vector<double>> copy = clipped;
    std::vector<std::span<double>> after(copy.begin(), copy.end());
    const double n1 = global_norm(after);
    CHECK(n1 <= n0 + 1e-12);
    CHECK(n1 <= 10.0 + 1e-9);
  }
}

TEST_CASE("adam step") {
  const double lr = 1e-3;
  Tensor w = Tensor::vector({0.5, -0.5}, true);
  Tensor frozen = Tensor::vector({2.0}, true);
  w.mutable_grad()[0] = 1.0;
  w.mutable_grad()[1] = 0.0;
  frozen.mutable_grad()[0] = 1.0;
  AdamState state;
  adam_step(state, {w, frozen}, {false, true}, lr);
  CHECK(state.step == 1);
  CHECK(w.at(0) == doctest::Approx(0.5 - lr / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(w.at(1) == -0.5);
  CHECK(frozen.at(0) == 2.0);
  CHECK(state.m[1][0] == 0.0);

  w.zero_grad();
  adam_step(state, {w, frozen}, {false, true}, lr);
  CHECK(state.step == 2);

  AdamState other;
  other.m.assign(1, {0.0});
  other.v.assign(1, {0.0});
  CHECK_THROWS_AS(adam_step(other, {w, frozen}, {false, true}, lr), DimensionError);
  CHECK_THROWS_AS(adam_step(state, {w}, {false, true}, lr), DimensionError);
}

TEST_CASE("learning rate schedule") {
  const std::vector<double> expect{5e-4, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5};
  for (std::size_t e = 1; e <= 5; ++e) CHECK(lr_schedule(e, 5e-4) == expect[e - 1]);
  CHECK(lr_schedule(3, 1.0, 3) == 1.0);
  CHECK(lr_schedule(4, 1.0, 3) == 0.5);
  CHECK_THROWS_AS(lr_schedule(0, 1.0), ParameterError);
}

TEST_CASE("train config validation and json") {
  TrainConfig c = tiny_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = tiny_config();
  c.model.gating = GatingKind::concat;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(train(c, {}, {}), TrainingError);
}

TEST_CASE("one small step lowers the loss on a fixed batch") {
  const auto data = tiny_corpus(8);
  const Vocab vocab = Vocab::build(data);
  const Batch batch = batchify(data, 8, vocab).front();
  int lowered = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ReaderConfig cfg = tiny_config().model;
    cfg.vocab_size = vocab.size();
    ReaderParams p = ReaderParams::init(cfg, seed);
    const auto params = parameter_list(p);
    Tape tape;
    double before = 0;
    {
      TapeScope scope(tape);
      const Tensor l = batch_loss(forward(p, batch).probabilities, batch.answers);
      before = l.item();
      tape.backward(l);
    }
    AdamState state;
    adam_step(state, params, frozen_flags(p), 1e-3);
    if (batch_loss_value(p, batch) < before) ++lowered;
  }
  CHECK(lowered >= 19);
}

TEST_CASE("a single example is memorized") {
  const auto data = tiny_corpus(1);
  TrainConfig c = tiny_config();
  c.epochs = 50;
  c.lr_halve_after = 50;
  c.batch_size = 1;
  const TrainResult r = train(c, data, {});
  CHECK(r.history.back().valid_acc == 1.0);
  CHECK(predict_all(r.best, r.vocab, data)[0] == data[0].answer);
}

TEST_CASE("training is deterministic and resumable") {
  gar::testing::TempDir tmp;
  const auto data = tiny_corpus(24);
  const std::vector<ClozeExample> train_set(data.begin(), data.begin() + 16);
  const std::vector<ClozeExample> valid_set(data.begin() + 16, data.end());
  TrainConfig c = tiny_config();
  c.model.dropout = 0.2;
  TrainOptions o;
  o.timestamps = false;

  o.out_dir = tmp.path / "a";
  const TrainResult a = train(c, train_set, valid_set, o);
  o.out_dir = tmp.path / "b";
  const TrainResult b = train(c, train_set, valid_set, o);
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].train_loss == b.history[i].train_loss);
  CHECK(read_file(tmp.path / "a" / "metrics.log") == read_file(tmp.path / "b" / "metrics.log"));
  CHECK(read_file(tmp.path / "a" / "last.ckpt") == read_file(tmp.path / "b" / "last.ckpt"));
  CHECK(read_file(tmp.path / "a" / "best.ckpt") == read_file(tmp.path / "b" / "best.ckpt"));

  // Stop after two epochs, then resume to four.
  TrainConfig half = c;
  half.epochs = 2;
  o.out_dir = tmp.path / "c";
  train(half, train_set, valid_set, o);
  o.resume = true;
  const TrainResult resumed = train(c, train_set, valid_set, o);
  REQUIRE(resumed.history.size() == 2);
  CHECK(resumed.history[0].epoch == 3);
  CHECK(read_file(tmp.path / "c" / "metrics.log") == read_file(tmp.path / "a" / "metrics.log"));
  CHECK(read_file(tmp.path / "c" / "last.ckpt") == read_file(tmp.path / "a" / "last.ckpt"));

  TrainConfig changed = c;
  changed.model.hidden = 6;
  CHECK_THROWS_AS(train(changed, train_set, valid_set, o), TrainingError);
}

TEST_CASE("a frozen word table is left untouched") {
  const auto data = tiny_corpus(12);
  TrainConfig c = tiny_config();
  c.model.fix_word_table = true;
  c.epochs = 2;
  ReaderConfig m = c.model;
  m.vocab_size = Vocab::build(data).size();
  const ReaderParams initial = ReaderParams::init(m, mix_seed(c.seed, 1));
  const TrainResult r = train(c, data, {});
  const auto before = initial.word_table.data();
  const auto after = r.best.word_table.data();
  CHECK(std::equal(before.begin(), before.end(), after.begin(), after.end()));
  // Everything else moved.
  CHECK(r.best.query_gru[0].forward.W_z.at(0, 0) != initial.query_gru[0].forward.W_z.at(0, 0));
}

TEST_CASE("metrics log carries a timestamp column") {
  gar::testing::TempDir tmp;
  const auto data = tiny_corpus(8);
  TrainConfig c = tiny_config();
  c.epochs = 1;
  TrainOptions o;
  o.out_dir = tmp.path;
  std::size_t calls = 0;
  o.on_epoch = [&](const EpochRecord& r) {
    ++calls;
    CHECK(r.epoch == 1);
  };
  train(c, data, {}, o);
  CHECK(calls == 1);
  const std::string log = read_file(tmp.path / "metrics.log");
  CHECK(std::count(log.begin(), log.end(), ',') == 4);
  CHECK(log.find('T') != std::string::npos);
  CHECK(load_checkpoint(tmp.path / "last.ckpt").epoch == 1);
}
