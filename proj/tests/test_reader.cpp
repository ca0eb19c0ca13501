#include <cmath>

#include "doctest.h"
#include "gar/reader.hpp"
#include "gradcheck.hpp"

using namespace gar;
using gar::testing::gradient_error;
using gar::testing::random_tensor;

namespace {

ClozeExample make_example(std::vector<std::string> doc, std::vector<std::string> query,
                          std::vector<std::string> candidates, std::size_t answer) {
  ClozeExample ex;
  ex.doc = std::move(doc);
  ex.query = std::move(query);
  for (auto& c : candidates) ex.candidates.push_back({c});
  ex.answer = answer;
  REQUIRE_FALSE(finalize_example(ex).has_value());
  return ex;
}

ClozeExample toy() { return make_example({"a", "b", "c", "a", "d"}, {"b", "@cloze", "d"}, {"a", "c", "d"}, 1); }

ReaderConfig toy_config(const Vocab& vocab) {
  ReaderConfig c;
  c.hops = 2;
  c.vocab_size = vocab.size();
  c.word_dim = 3;
  c.hidden = 4;
  return c;
}

// Perturbing word vectors of tokens that never appear changes nothing, so
// check only what the loss touches: every parameter array.
std::vector<Tensor> all_params(const ReaderParams& p) {
  std::vector<Tensor> out;
  for (auto& [name, t] : p.named()) out.push_back(t);
  return out;
}

Tensor nll(const Tensor& probs, std::size_t answer) {
  const std::size_t row = answer;
  return affine(sum(log(gather_rows(reshape(probs, {probs.size(), 1}), std::span(&row, 1)))), -1.0, 0.0);
}

}  // namespace

TEST_CASE("gating names") {
  CHECK(parse_gating("multiply") == GatingKind::multiply);
  CHECK(parse_gating("sum") == GatingKind::sum);
  CHECK(parse_gating("concat") == GatingKind::concat);
  CHECK(to_string(GatingKind::concat) == "concat");
  CHECK_THROWS_AS(parse_gating("max"), ParameterError);
}

TEST_CASE("GA module identities") {
  Rng rng(1);
  const Tensor D = random_tensor({4, 6}, rng);
  // A single query token receives all the attention.
  const Tensor q1 = random_tensor({4, 1}, rng);
  const GaOutput single = ga_module(D, q1, GatingKind::multiply, {true});
  for (std::size_t i = 0; i < 6; ++i) CHECK(single.alpha.at(0, i) == 1.0);

  // Identical all-ones query columns give q~ = 1, and multiply is the identity.
  const Tensor ones = Tensor::full({4, 3}, 1.0);
  const GaOutput id = ga_module(D, ones, GatingKind::multiply, {true, true, true});
  for (std::size_t i = 0; i < D.size(); ++i) CHECK(id.X.data()[i] == D.data()[i]);

  const GaOutput cat = ga_module(D, ones, GatingKind::concat, {true, true, true});
  CHECK(cat.X.shape() == Shape{8, 6});
  const GaOutput plus = ga_module(D, ones, GatingKind::sum, {true, true, true});
  CHECK(plus.X.at(0, 0) == D.at(0, 0) + 1.0);

  CHECK_THROWS_AS(ga_module(D, random_tensor({3, 2}, rng), GatingKind::multiply, {true, true}), DimensionError);
}

TEST_CASE("GA attention columns are distributions over unmasked query tokens") {
  Rng rng(2);
  const Tensor D = random_tensor({4, 5}, rng, 3.0);
  const Tensor Q = random_tensor({4, 3}, rng, 3.0);
  const GaOutput g = ga_module(D, Q, GatingKind::multiply, {true, false, true});
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(g.alpha.at(1, i) == 0.0);
    CHECK(std::abs(g.alpha.at(0, i) + g.alpha.at(2, i) - 1.0) < 1e-12);
  }
}

TEST_CASE("GA module gradients") {
  Rng rng(3);
  auto D = random_tensor({4, 5}, rng), Q = random_tensor({4, 3}, rng);
  for (GatingKind g : {GatingKind::multiply, GatingKind::sum, GatingKind::concat}) {
    CHECK(gradient_error([&] { return gar::testing::probe(ga_module(D, Q, g, {true, true, false}).X); }, {D, Q}) <
          1e-4);
  }
}

TEST_CASE("pointer-sum equals a brute-force per-position sum") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(12), C = 1 + rng.below(5);
    std::vector<double> raw(n);
    for (double& x : raw) x = rng.uniform(-3, 3);
    const Tensor s = softmax_masked(Tensor::vector(raw), std::vector<bool>(n, true));
    std::vector<std::vector<std::size_t>> groups(C);
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.6) groups[rng.below(C)].push_back(i);
    }
    for (auto& g : groups) {
      if (g.empty()) g.push_back(rng.below(n));
      std::sort(g.begin(), g.end());
      g.erase(std::unique(g.begin(), g.end()), g.end());
    }
    const Tensor agg = segment_sum(s, groups);
    for (std::size_t c = 0; c < C; ++c) {
      double expect = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(groups[c].begin(), groups[c].end(), i) != groups[c].end()) expect += s.at(i);
      }
      CHECK(agg.at(c) == expect);
    }
    const Tensor probs = normalize(agg);
    double total = 0;
    for (double p : probs.data()) total += p;
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("end-to-end toy reader gradients") {
  const ClozeExample ex = toy();
  const Vocab vocab = Vocab::build({ex});
  const auto run = [&](ReaderConfig cfg) {
    ReaderParams p = ReaderParams::init(cfg, 17);
    const auto params = all_params(p);
    const double err = gradient_error([&] { return nll(forward(p, vocab, ex).probabilities, ex.answer); }, params);
    CHECK(err < 1e-3);
  };
  ReaderConfig cfg = toy_config(vocab);
  SUBCASE("multiply") { run(cfg); }
  SUBCASE("sum") {
    cfg.gating = GatingKind::sum;
    run(cfg);
  }
  SUBCASE("concat") {
    cfg.gating = GatingKind::concat;
    run(cfg);
  }
  SUBCASE("no GA") {
    cfg.use_ga = false;
    run(cfg);
  }
  SUBCASE("no token attention") {
    cfg.token_attention = false;
    run(cfg);
  }
  SUBCASE("K=1") {
    cfg.hops = 1;
    run(cfg);
  }
  SUBCASE("characters and feature") {
    cfg.use_char = true;
    cfg.char_dim = 3;
    cfg.char_hidden = 2;
    cfg.char_out = 3;
    cfg.use_feature = true;
    run(cfg);
  }
}

TEST_CASE("batched forward equals single-example forward") {
  const std::vector<ClozeExample> examples{
      toy(), make_example({"c", "d", "e", "f", "c", "a", "b"}, {"@cloze", "a"}, {"c", "e", "b"}, 2),
      make_example({"f", "b"}, {"x", "y", "@cloze", "z"}, {"f", "b"}, 0)};
  const Vocab vocab = Vocab::build(examples);
  ReaderConfig cfg = toy_config(vocab);
  cfg.hops = 3;
  cfg.use_char = true;
  cfg.char_dim = 2;
  cfg.char_hidden = 2;
  cfg.char_out = 2;
  cfg.use_feature = true;
  const ReaderParams p = ReaderParams::init(cfg, 5);
  std::vector<const ClozeExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  ForwardOptions opts;
  opts.trace = true;
  const BatchOutput batched = forward(p, make_batch(ptrs, vocab), opts);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const ExampleOutput single = forward(p, vocab, examples[b]);
    REQUIRE(single.probabilities.size() == batched.probabilities[b].size());
    for (std::size_t c = 0; c < single.probabilities.size(); ++c) {
      CHECK(single.probabilities.at(c) == doctest::Approx(batched.probabilities[b].at(c)).epsilon(1e-12));
    }
    REQUIRE(batched.traces[b].alphas.size() == 2);
    CHECK(batched.traces[b].alphas[0].shape() == Shape{examples[b].query.size(), examples[b].doc.size()});
    CHECK(batched.traces[b].s.size() == examples[b].doc.size());
  }
}

TEST_CASE("reader validation and prediction") {
  const ClozeExample ex = toy();
  const Vocab vocab = Vocab::build({ex});
  ReaderConfig cfg = toy_config(vocab);
  cfg.hops = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = toy_config(vocab);
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);

  ReaderParams p = ReaderParams::init(toy_config(vocab), 1);
  p.doc_gru[1] = BiGruParams::init(5, 4, *std::make_unique<Rng>(1));
  CHECK_THROWS_AS(p.validate(), DimensionError);

  const std::vector<double> tie{0.4, 0.4, 0.2};
  CHECK(predict(tie) == 0);
  const std::vector<double> clear{0.1, 0.2, 0.7};
  CHECK(predict(clear) == 2);
}

TEST_CASE("embed_token with and without characters") {
  const ClozeExample ex = toy();
  const Vocab vocab = Vocab::build({ex});
  ReaderConfig cfg = toy_config(vocab);
  ReaderParams p = ReaderParams::init(cfg, 1);
  const Tensor a = embed_token(p, vocab, "a");
  CHECK(a.shape() == Shape{3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.at(i) == p.word_table.at(vocab.id("a"), i));
  // Unknown tokens get a stable vector of their own.
  CHECK(embed_token(p, vocab, "zzz").data()[0] == embed_token(p, vocab, "zzz").data()[0]);
  CHECK(embed_token(p, vocab, "zzz").data()[0] != embed_token(p, vocab, "yyy").data()[0]);

  cfg.use_char = true;
  p = ReaderParams::init(cfg, 1);
  CHECK(embed_token(p, vocab, "abc").shape() == Shape{3 + cfg.char_out});
}

TEST_CASE("pretrained vectors land in the word table") {
  const ClozeExample ex = toy();
  const Vocab vocab = Vocab::build({ex});
  ReaderParams p = ReaderParams::init(toy_config(vocab), 1);
  EmbeddingTable table;
  table.dim = 3;
  table.vectors["c"] = {1, 2, 3};
  table.vectors["unused"] = {4, 5, 6};
  CHECK(p.load_pretrained(vocab, table) == 1);
  CHECK(p.word_table.at(vocab.id("c"), 2) == 3.0);
  table.dim = 4;
  CHECK_THROWS_AS(p.load_pretrained(vocab, table), DimensionError);
}
