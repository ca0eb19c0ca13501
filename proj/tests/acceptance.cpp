// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when
// any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "gar/evalviz.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"
#include "xml_check.hpp"

using namespace gar;
using gar::testing::gradient_error;
using gar::testing::probe;
using gar::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Dataset split(std::vector<ClozeExample> all) {
  Dataset d;
  const std::size_t n_train = all.size() * 8 / 10, n_valid = all.size() / 10;
  d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.valid.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                 all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  d.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), all.end());
  return d;
}

ClozeExample toy_example() {
  ClozeExample ex;
  ex.doc = {"a", "b", "c", "a", "d"};
  ex.query = {"b", "@cloze", "d"};
  ex.candidates = {{"a"}, {"c"}, {"d"}};
  ex.answer = 1;
  finalize_example(ex);
  return ex;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_op = 0.0;
  std::string worst_name;
  auto op = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& in) {
    const double e = gradient_error(f, in);
    if (e > worst_op) {
      worst_op = e;
      worst_name = name;
    }
  };

  auto A = random_tensor({3, 4}, rng), B = random_tensor({4, 2}, rng), C = random_tensor({3, 4}, rng);
  auto v = random_tensor({5}, rng), bias = random_tensor({3}, rng);
  auto pos = Tensor({5}, {0.3, 1.2, 0.7, 2.0, 0.9}, true);
  const std::vector<std::size_t> ids{2, 0, 2}, cols{3, 1}, place{4, 0};
  const std::vector<double> w{0.5, -1.0, 2.0, 0.0};

  op("matmul", [&] { return probe(matmul(A, B)); }, {A, B});
  op("transpose", [&] { return probe(transpose(A)); }, {A});
  op("reshape", [&] { return probe(reshape(A, {2, 6})); }, {A});
  op("add", [&] { return probe(add(A, C)); }, {A, C});
  op("sub", [&] { return probe(sub(A, C)); }, {A, C});
  op("mul", [&] { return probe(mul(A, C)); }, {A, C});
  op("add_bias", [&] { return probe(add_bias(A, bias)); }, {A, bias});
  op("affine", [&] { return probe(affine(A, -1.5, 0.25)); }, {A});
  op("scale_columns", [&] { return probe(scale_columns(A, w)); }, {A});
  op("sigmoid", [&] { return probe(sigmoid(A)); }, {A});
  op("tanh", [&] { return probe(tanh(A)); }, {A});
  op("log", [&] { return probe(log(pos)); }, {pos});
  op("softmax vector", [&] { return probe(softmax_masked(v, {true, true, false, true, true})); }, {v});
  op("softmax columns", [&] { return probe(softmax_masked(A, {true, false, true})); }, {A});
  op("concat rows", [&] { return probe(concat(A, C, 0)); }, {A, C});
  op("concat cols", [&] { return probe(concat(A, C, 1)); }, {A, C});
  op("gather_rows", [&] { return probe(gather_rows(A, ids)); }, {A});
  op("select_columns", [&] { return probe(select_columns(A, cols)); }, {A});
  op("place_columns", [&] { return probe(place_columns(B, place, 5)); }, {B});
  op("dropout", [&] { return probe(dropout(A, 0.3, 77, true)); }, {A});
  op("sum", [&] { return sum(mul(A, A)); }, {A});
  op("segment_sum", [&] { return probe(segment_sum(v, {{0, 3}, {1}, {2, 4}})); }, {v});
  op("normalize", [&] { return probe(normalize(pos)); }, {pos});

  GruCellParams cell = GruCellParams::init(3, 4, rng);
  auto x = random_tensor({3}, rng), h = random_tensor({4}, rng);
  std::vector<Tensor> cell_in{x, h};
  for (auto& [n, t] : cell.named()) cell_in.push_back(t);
  op("gru_step", [&] { return probe(gru_step(cell, x, h)); }, cell_in);

  BiGruParams bi = BiGruParams::init(3, 2, rng);
  auto X = random_tensor({3, 4}, rng);
  std::vector<Tensor> bi_in{X};
  for (auto& [n, t] : bi.named()) bi_in.push_back(t);
  op("bigru_full", [&] { return probe(bigru_full(bi, X)); }, bi_in);

  auto D = random_tensor({4, 5}, rng), Q = random_tensor({4, 3}, rng);
  for (GatingKind g : {GatingKind::multiply, GatingKind::sum, GatingKind::concat}) {
    op("ga_module " + to_string(g), [&] { return probe(ga_module(D, Q, g, {true, true, true}).X); }, {D, Q});
  }

  // End-to-end toy reader: doc 5, query 3, n_h 4, K 2.
  const ClozeExample ex = toy_example();
  const Vocab vocab = Vocab::build({ex});
  ReaderConfig cfg;
  cfg.hops = 2;
  cfg.vocab_size = vocab.size();
  cfg.word_dim = 3;
  cfg.hidden = 4;
  const ReaderParams p = ReaderParams::init(cfg, 17);
  std::vector<Tensor> params;
  for (auto& [n, t] : p.named()) params.push_back(t);
  const double e2e = gradient_error(
      [&] {
        const std::size_t row = ex.answer;
        const Tensor probs = forward(p, vocab, ex).probabilities;
        return affine(sum(log(gather_rows(reshape(probs, {probs.size(), 1}), std::span(&row, 1)))), -1.0, 0.0);
      },
      params);

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_op < 1e-4 && e2e < 1e-3 && secs < 60.0;
  o.detail = "worst op " + fmt("%.2e", worst_op) + " (" + worst_name + "), end-to-end " + fmt("%.2e", e2e) + ", " +
             fmt("%.1f s", secs);
  return o;
}

Outcome zero_gru() {
  Rng rng(1);
  GruCellParams p = GruCellParams::init(3, 4, rng);
  for (auto& [n, t] : p.named()) {
    for (double& x : t.mutable_data()) x = 0.0;
  }
  const Tensor h = random_tensor({4}, rng, 5.0);
  const Tensor out = gru_step(p, random_tensor({3}, rng), h);
  bool exact = true;
  for (std::size_t i = 0; i < 4; ++i) exact = exact && out.at(i) == 0.5 * h.at(i);
  return {exact, exact ? "h = 0.5 h_prev exactly" : "mismatch"};
}

Outcome ga_identities() {
  Rng rng(3);
  const Tensor D = random_tensor({4, 6}, rng);
  const GaOutput single = ga_module(D, random_tensor({4, 1}, rng), GatingKind::multiply, {true});
  bool ok = true;
  for (std::size_t i = 0; i < 6; ++i) ok = ok && single.alpha.at(0, i) == 1.0;
  const GaOutput id = ga_module(D, Tensor::full({4, 3}, 1.0), GatingKind::multiply, {true, true, true});
  for (std::size_t i = 0; i < D.size(); ++i) ok = ok && id.X.data()[i] == D.data()[i];
  return {ok, ok ? "alpha = 1 and identity gating hold exactly" : "identity violated"};
}

Outcome pointer_sum() {
  Rng rng(4);
  std::size_t exact = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(15), C = 1 + rng.below(6);
    std::vector<double> raw(n);
    for (double& x : raw) x = rng.uniform(-4, 4);
    const Tensor s = softmax_masked(Tensor::vector(raw), std::vector<bool>(n, true));
    std::vector<std::vector<std::size_t>> groups(C);
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.7) groups[rng.below(C)].push_back(i);
    }
    for (auto& g : groups) {
      if (g.empty()) g.push_back(rng.below(n));
      std::sort(g.begin(), g.end());
      g.erase(std::unique(g.begin(), g.end()), g.end());
    }
    const Tensor agg = segment_sum(s, groups);
    bool all = true;
    for (std::size_t c = 0; c < C; ++c) {
      double expect = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(groups[c].begin(), groups[c].end(), i) != groups[c].end()) expect += s.at(i);
      }
      all = all && agg.at(c) == expect;
    }
    exact += all ? 1 : 0;
    double total = 0.0;
    const Tensor probs = normalize(agg);
    for (double q : probs.data()) total += q;
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return {exact == 100 && worst < 1e-6,
          std::to_string(exact) + "/100 exact, max |sum-1| " + fmt("%.1e", worst)};
}

Outcome memorization() {
  const auto t0 = Clock::now();
  SynthConfig s;
  s.seed = 21;
  s.n_examples = 200;
  s.hops = 1;
  s.n_entities = 20;
  s.n_facts = 6;
  const auto data = synth_generate(s);
  TrainConfig c;
  c.model.hops = 3;
  c.model.hidden = 32;
  c.model.word_dim = 32;
  c.model.embed_init_std = 1.0;
  c.lr0 = 5e-3;
  c.lr_halve_after = 20;
  c.epochs = 30;
  c.seed = 1;
  double best = 0.0;
  std::size_t reached = 0;
  TrainOptions o;
  o.on_epoch = [&](const EpochRecord& r) {
    best = std::max(best, r.valid_acc);  // no validation set: train accuracy
    if (reached == 0 && r.valid_acc >= 0.99) reached = r.epoch;
  };
  train(c, data, {}, o);
  const double secs = seconds_since(t0);
  return {best >= 0.99 && secs < 300.0,
          "train accuracy " + fmt("%.3f", best) +
              (reached ? " (>= 0.99 at epoch " + std::to_string(reached) + ")" : "") + ", " + fmt("%.0f s", secs)};
}

struct MultiHop {
  Outcome ga, gating, hops;
};

MultiHop multi_hop() {
  const auto t0 = Clock::now();
  SynthConfig s;
  s.seed = 7;
  s.n_examples = 2000;
  s.n_entities = 100;
  s.n_relations = 3;
  s.hops = 2;
  s.n_facts = 9;
  const Dataset d = split(synth_generate(s));

  AblationSpec spec;
  spec.base.model.hidden = 16;
  spec.base.model.word_dim = 16;
  spec.base.model.embed_init_std = 1.0;
  spec.base.lr0 = 3e-3;
  spec.base.lr_halve_after = 8;
  spec.base.epochs = 15;
  spec.hops = {3, 1};
  spec.use_ga = {true, false};
  spec.gating = {GatingKind::multiply, GatingKind::sum, GatingKind::concat};
  spec.seeds = {1, 2, 3, 4, 5};
  spec.baseline = 3;  // K=3 without GA

  AblationOptions opts;
  opts.on_run = [](const AblationConfig& c, const AblationRun& r) {
    std::fprintf(stderr, "  %s seed %llu: test %.4f\n", c.name.c_str(), static_cast<unsigned long long>(r.seed),
                 r.test_acc);
  };
  const AblationTable t = ablate(spec, d, opts);
  const double secs = seconds_since(t0);
  std::fprintf(stderr, "%s", format_table(t).c_str());

  auto row = [&](const std::string& name) -> const AblationRow& {
    for (const auto& r : t.rows) {
      if (r.config.name == name) return r;
    }
    throw std::runtime_error("missing ablation row " + name);
  };
  const AblationRow& mult = row("K=3 ga=multiply");
  const AblationRow& sum_row = row("K=3 ga=sum");
  const AblationRow& cat = row("K=3 ga=concat");
  const AblationRow& noga = row("K=3 no-ga");
  const AblationRow& k1 = row("K=1");

  MultiHop m;
  const double gap = 100.0 * (mult.median_test - noga.median_test);
  const double p = mult.mcnemar_p.value_or(1.0);
  const bool ga_better = mult.versus_baseline.b > mult.versus_baseline.c;
  m.ga.pass = gap >= 5.0 && ga_better && p < 0.05 && secs < 1800.0;
  m.ga.detail = "GA " + fmt("%.1f", 100 * mult.median_test) + " vs no-GA " + fmt("%.1f", 100 * noga.median_test) +
                " (+" + fmt("%.1f", gap) + " pts), McNemar p " + fmt("%.2e", p) + ", " + fmt("%.0f s", secs);
  m.gating.pass = mult.median_test >= sum_row.median_test && mult.median_test >= cat.median_test;
  m.gating.detail = "multiply " + fmt("%.1f", 100 * mult.median_test) + ", sum " +
                    fmt("%.1f", 100 * sum_row.median_test) + ", concat " + fmt("%.1f", 100 * cat.median_test);
  m.hops.pass = mult.median_test >= k1.median_test;
  m.hops.detail =
      "K=3 " + fmt("%.1f", 100 * mult.median_test) + " vs K=1 " + fmt("%.1f", 100 * k1.median_test);
  return m;
}

Outcome statistics() {
  const double a = mcnemar_exact(8, 2), b = proportion_test(60, 100, 0.5);
  // Independent references: the binomial sum C(10,8)+C(10,9)+C(10,10) over
  // 2^10 and the normal upper tail at z = 2.
  const double ref_a = (45.0 + 10.0 + 1.0) / 1024.0;
  const double ref_b = 0.5 * std::erfc(2.0 / std::sqrt(2.0));
  const bool ok = std::abs(a - ref_a) < 1e-12 && std::abs(b - 0.0228) < 1e-3 && std::abs(b - ref_b) < 1e-12;
  return {ok, "mcnemar(8,2) " + fmt("%.10f", a) + ", proportion(60,100,0.5) " + fmt("%.5f", b)};
}

std::string strip_timestamps(const std::string& log) {
  std::istringstream in(log);
  std::string out, line;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',') + 1) + "\n";
  return out;
}

Outcome determinism() {
  gar::testing::TempDir tmp;
  SynthConfig s;
  s.seed = 9;
  s.n_examples = 60;
  s.hops = 2;
  s.n_entities = 20;
  const Dataset d = split(synth_generate(s));
  TrainConfig c;
  c.model.hops = 3;
  c.model.hidden = 8;
  c.model.word_dim = 8;
  c.model.dropout = 0.3;
  c.model.use_char = true;
  c.model.char_dim = 4;
  c.model.char_hidden = 4;
  c.model.char_out = 4;
  c.model.use_feature = true;
  c.batch_size = 8;
  c.epochs = 3;
  c.lr0 = 5e-3;
  TrainOptions o;
  o.out_dir = tmp.path / "a";
  train(c, d.train, d.valid, o);
  o.out_dir = tmp.path / "b";
  train(c, d.train, d.valid, o);
  const auto la = read_file(tmp.path / "a/metrics.log"), lb = read_file(tmp.path / "b/metrics.log");
  const bool logs = !la.empty() && strip_timestamps(la) == strip_timestamps(lb);
  bool ckpts = true;
  for (const char* f : {"best.ckpt", "last.ckpt"}) {
    const auto ca = read_file(tmp.path / "a" / f);
    ckpts = ckpts && !ca.empty() && ca == read_file(tmp.path / "b" / f);
  }
  return {logs && ckpts, std::string("metrics ") + (logs ? "identical" : "differ") + ", checkpoints " +
                             (ckpts ? "identical" : "differ")};
}

Outcome schedule_and_clip() {
  const std::vector<double> expect{5e-4, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5};
  bool ok = true;
  std::string seq;
  for (std::size_t e = 1; e <= 5; ++e) {
    const double lr = lr_schedule(e, 5e-4);
    ok = ok && lr == expect[e - 1];
    seq += (e > 1 ? " " : "") + fmt("%.4g", lr);
  }
  const auto clipped = clip_gradients({{30.0, 40.0}}, 10.0);
  ok = ok && clipped == std::vector<std::vector<double>>{{6.0, 8.0}};
  return {ok, "lr [" + seq + "], clip [" + fmt("%g", clipped[0][0]) + " " + fmt("%g", clipped[0][1]) + "]"};
}

Outcome attention_files() {
  gar::testing::TempDir tmp;
  SynthConfig s;
  s.seed = 13;
  s.n_examples = 40;
  s.hops = 2;
  s.n_entities = 15;
  s.n_facts = 5;
  const auto data = synth_generate(s);
  TrainConfig c;
  c.model.hops = 3;
  c.model.hidden = 8;
  c.model.word_dim = 8;
  c.batch_size = 8;
  c.epochs = 3;
  c.lr0 = 5e-3;
  const TrainResult r = train(c, data, {});

  bool ok = true;
  double worst = 0.0;
  std::size_t svgs = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto dir = tmp.path / ("ex" + std::to_string(i));
    attention_export(r.best, r.vocab, data[i], dir);
    std::vector<std::string> csvs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if (entry.path().extension() == ".csv") csvs.push_back(name);
      if (entry.path().extension() == ".svg") {
        ok = ok && gar::testing::xml_root(read_file(entry.path())) == "svg";
        ++svgs;
      }
    }
    std::sort(csvs.begin(), csvs.end());
    ok = ok && csvs == std::vector<std::string>{"alpha_layer1.csv", "alpha_layer2.csv", "s.csv"};
    for (const auto& name : csvs) {
      std::istringstream in(read_file(dir / name));
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        std::stringstream ls(line);
        std::string field;
        std::getline(ls, field, ',');  // row label
        double total = 0.0;
        while (std::getline(ls, field, ',')) total += std::stod(field);
        worst = std::max(worst, std::abs(total - 1.0));
      }
    }
  }
  ok = ok && worst < 1e-6 && svgs == 15;
  return {ok, "5 examples x (2 alpha + 1 s) CSVs, max |row sum-1| " + fmt("%.1e", worst) + ", " +
                  std::to_string(svgs) + " SVGs well formed"};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int n, const char* title, const Outcome& o) {
    std::printf("criterion %2d  %s  %-28s %s\n", n, o.pass ? "PASS" : "FAIL", title, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [&](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "gradient suite", guarded(gradient_suite));
  report(2, "zero-parameter GRU", guarded(zero_gru));
  report(3, "GA identities", guarded(ga_identities));
  report(4, "pointer-sum oracle", guarded(pointer_sum));
  report(5, "memorization", guarded(memorization));
  MultiHop m;
  try {
    m = multi_hop();
  } catch (const std::exception& e) {
    m.ga = m.gating = m.hops = Outcome{false, std::string("exception: ") + e.what()};
  }
  report(6, "multi-hop GA vs no GA", m.ga);
  report(7, "gating comparison", m.gating);
  report(8, "hop sweep", m.hops);
  report(9, "statistics oracles", guarded(statistics));
  report(10, "determinism", guarded(determinism));
  report(11, "schedule and clipping", guarded(schedule_and_clip));
  report(12, "attention export", guarded(attention_files));
  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
