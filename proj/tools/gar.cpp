// gar: generate data, train, evaluate, ablate and visualize the reader.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "gar/checkpoint.hpp"
#include "gar/config.hpp"
#include "gar/corpus.hpp"
#include "gar/evalviz.hpp"
#include "gar/train.hpp"

namespace fs = std::filesystem;
using namespace gar;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

// Errors caused by the invocation rather than by the work itself.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path default_output(const fs::path& given, const char* fallback) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("GAR_OUTPUT_DIR"); env && *env) return env;
  return fallback;
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " path is required");
  if (!fs::is_regular_file(p)) throw UsageError(what + " file not found: " + p.string());
}

void require_writable_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw UsageError("cannot create output directory " + p.string());
}

std::vector<ClozeExample> load_split(const fs::path& p, std::size_t max_doc_len) {
  LoadResult r = load_examples(p, max_doc_len);
  for (const auto& rej : r.rejected) {
    std::cerr << p.string() << ":" << rej.line << ": rejected record " << rej.record << ": " << rej.reason << "\n";
  }
  return std::move(r.examples);
}

// Key=value options shared by commands that build a RunConfig.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key=value configuration file")->check(CLI::ExistingFile);
    for (const auto& key : run_config_keys()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (key == "hops") flag += ",--k";
      app->add_option(flag, values[key], "overrides '" + key + "'");
    }
    app->add_option("--set", sets, "extra key=value override");
  }

  RunConfig resolve(CLI::App* app) const {
    RunConfig rc;
    try {
      if (!file.empty()) apply_file(rc, file);
      for (const auto& key : run_config_keys()) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (app->count(flag) > 0) rc.set(key, values.at(key));
      }
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        rc.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return rc;
  }
};

template <class T>
std::vector<T> parse_list(const std::string& text, T (*one)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(one(item));
  }
  if (out.empty()) throw UsageError("empty list '" + text + "'");
  return out;
}

bool parse_bool(const std::string& s) {
  RunConfig probe;
  try {
    probe.set("use_ga", s);
  } catch (const ConfigError&) {
    throw UsageError("expected true or false, got '" + s + "'");
  }
  return probe.train.model.use_ga;
}

int run_synth(const SynthConfig& cfg, const fs::path& out_arg) {
  const fs::path out = default_output(out_arg, "data");
  require_writable_dir(out);
  const auto all = synth_generate(cfg);
  Dataset ds;
  const std::size_t n_train = all.size() * 8 / 10, n_valid = all.size() / 10;
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.valid.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                  all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  ds.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), all.end());
  write_examples(out / "train.txt", ds.train);
  write_examples(out / "valid.txt", ds.valid);
  write_examples(out / "test.txt", ds.test);
  std::cout << format_stats(corpus_stats(ds));
  return 0;
}

int run_train(const RunConfig& rc, bool resume) {
  require_file(rc.train_path, "training data");
  if (!rc.valid_path.empty()) require_file(rc.valid_path, "validation data");
  if (!rc.embeddings.empty()) require_file(rc.embeddings, "embedding");
  const fs::path out = default_output(rc.output_dir, "run");
  require_writable_dir(out);
  if (resume && !fs::exists(out / "last.ckpt")) throw UsageError("nothing to resume in " + out.string());
  try {
    rc.train.validate();
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }

  const auto train_set = load_split(rc.train_path, rc.max_doc_len);
  const auto valid_set = rc.valid_path.empty() ? std::vector<ClozeExample>{} : load_split(rc.valid_path, rc.max_doc_len);
  std::optional<EmbeddingTable> table;
  if (!rc.embeddings.empty()) table = load_embeddings(rc.embeddings, rc.train.model.word_dim);

  {
    std::ofstream cfg(out / "config.txt");
    cfg << format_run_config(rc);
  }
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  opts.pretrained = table ? &*table : nullptr;
  opts.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %zu  lr %.4g  loss %.6f  valid %.4f\n", r.epoch, r.lr, r.train_loss, r.valid_acc);
    std::fflush(stdout);
  };
  const TrainResult res = train(rc.train, train_set, valid_set, opts);
  std::printf("best epoch %zu  valid %.4f  checkpoint %s\n", res.best_epoch, res.best_valid,
              (out / "best.ckpt").string().c_str());
  if (clamp_count() > 0) std::fprintf(stderr, "warning: probability clamp fired %zu times\n", clamp_count());
  return 0;
}

Checkpoint open_checkpoint(const fs::path& p) {
  require_file(p, "checkpoint");
  return load_checkpoint(p);
}

int run_eval(const fs::path& ck_path, const fs::path& data, std::size_t max_doc_len, std::optional<double> p0) {
  require_file(data, "evaluation data");
  const Checkpoint ck = open_checkpoint(ck_path);
  const auto examples = load_split(data, max_doc_len);
  if (examples.empty()) throw UsageError("no usable examples in " + data.string());
  const auto preds = predict_all(ck.params, ck.vocab, examples);
  const double acc = accuracy(preds, examples);
  const auto k = static_cast<std::size_t>(std::llround(acc * static_cast<double>(examples.size())));
  std::printf("accuracy %.4f (%zu/%zu)\n", acc, k, examples.size());
  if (p0) std::printf("one-sided proportion test vs %.4f: p = %.6g\n", *p0, proportion_test(k, examples.size(), *p0));
  return 0;
}

int run_predict(const fs::path& ck_path, const fs::path& data, std::size_t max_doc_len) {
  require_file(data, "input data");
  const Checkpoint ck = open_checkpoint(ck_path);
  const auto examples = load_split(data, max_doc_len);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const ExampleOutput out = forward(ck.params, ck.vocab, examples[i]);
    const std::size_t best = predict(out.probabilities.data());
    std::string cand;
    for (const auto& t : examples[i].candidates[best]) cand += (cand.empty() ? "" : " ") + t;
    std::printf("%zu\t%s\t%.6f\n", i, cand.c_str(), out.probabilities.at(best));
  }
  return 0;
}

int run_viz(const fs::path& ck_path, const fs::path& data, const fs::path& out_arg, std::optional<std::size_t> index,
            bool all_rows, std::size_t max_doc_len) {
  require_file(data, "input data");
  const fs::path out = default_output(out_arg, "viz");
  require_writable_dir(out);
  const Checkpoint ck = open_checkpoint(ck_path);
  const auto examples = load_split(data, max_doc_len);
  if (index && *index >= examples.size()) throw UsageError("example index outside the file");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (index && i != *index) continue;
    char name[32];
    std::snprintf(name, sizeof name, "ex_%04zu", i);
    const auto files = attention_export(ck.params, ck.vocab, examples[i], out / name, {all_rows});
    for (const auto& f : files) std::cout << f.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated-attention cloze reader"};
  app.require_subcommand(1);

  SynthConfig synth;
  fs::path synth_out;
  auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic fact-chain corpus (80/10/10 split)");
  cmd_synth->add_option("--out", synth_out, "output directory (default $GAR_OUTPUT_DIR or ./data)");
  cmd_synth->add_option("--seed", synth.seed);
  cmd_synth->add_option("--n-examples", synth.n_examples);
  cmd_synth->add_option("--n-entities", synth.n_entities);
  cmd_synth->add_option("--n-relations", synth.n_relations);
  cmd_synth->add_option("--n-facts", synth.n_facts, "facts per document");
  cmd_synth->add_option("--hops", synth.hops)->check(CLI::Range(1, 2));

  ConfigFlags train_flags;
  bool resume = false;
  auto* cmd_train = app.add_subcommand("train", "train a reader");
  train_flags.attach(cmd_train);
  cmd_train->add_flag("--resume", resume, "continue from <output-dir>/last.ckpt");

  fs::path ck_path, data;
  std::size_t max_doc_len = 0;
  std::optional<double> p0;
  auto* cmd_eval = app.add_subcommand("eval", "accuracy of a checkpoint on a data file");
  auto* cmd_predict = app.add_subcommand("predict", "print the chosen candidate and its probability");
  auto* cmd_viz = app.add_subcommand("viz", "export attention CSVs and heatmaps");
  for (auto* c : {cmd_eval, cmd_predict, cmd_viz}) {
    c->add_option("--checkpoint", ck_path)->required();
    c->add_option("--data", data)->required();
    c->add_option("--max-doc-len", max_doc_len);
  }
  cmd_eval->add_option("--p0", p0, "null accuracy for the one-sided proportion test");
  fs::path viz_out;
  std::optional<std::size_t> viz_index;
  bool all_rows = false;
  cmd_viz->add_option("--out", viz_out, "output directory (default $GAR_OUTPUT_DIR or ./viz)");
  cmd_viz->add_option("--index", viz_index, "export only this example");
  cmd_viz->add_flag("--all-rows", all_rows, "rows for every document position, not only candidates");

  ConfigFlags ablate_flags;
  std::string vary_ga = "true", vary_gating = "multiply", vary_hops = "3", vary_feature = "false",
              vary_char = "false", vary_fix = "false", vary_tok = "true", fractions = "1", seeds = "1";
  std::size_t baseline = 0;
  fs::path ablate_csv;
  auto* cmd_ablate = app.add_subcommand("ablate", "train a grid of configurations over seeds");
  ablate_flags.attach(cmd_ablate);
  cmd_ablate->add_option("--vary-use-ga", vary_ga, "comma list");
  cmd_ablate->add_option("--vary-gating", vary_gating, "comma list of multiply,sum,concat");
  cmd_ablate->add_option("--vary-hops", vary_hops, "comma list of K in 1..4");
  cmd_ablate->add_option("--vary-use-feature", vary_feature);
  cmd_ablate->add_option("--vary-use-char", vary_char);
  cmd_ablate->add_option("--vary-fix-word-table", vary_fix);
  cmd_ablate->add_option("--vary-token-attention", vary_tok);
  cmd_ablate->add_option("--fractions", fractions, "training fractions, e.g. 0.5,0.75,1");
  cmd_ablate->add_option("--seeds", seeds, "comma list");
  cmd_ablate->add_option("--baseline", baseline, "row index the others are tested against");
  cmd_ablate->add_option("--csv", ablate_csv, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*cmd_synth) return run_synth(synth, synth_out);
    if (*cmd_train) return run_train(train_flags.resolve(cmd_train), resume);
    if (*cmd_eval) return run_eval(ck_path, data, max_doc_len, p0);
    if (*cmd_predict) return run_predict(ck_path, data, max_doc_len);
    if (*cmd_viz) return run_viz(ck_path, data, viz_out, viz_index, all_rows, max_doc_len);
    if (*cmd_ablate) {
      const RunConfig rc = ablate_flags.resolve(cmd_ablate);
      require_file(rc.train_path, "training data");
      require_file(rc.test_path, "test data");
      if (!rc.valid_path.empty()) require_file(rc.valid_path, "validation data");
      AblationSpec spec;
      spec.base = rc.train;
      spec.use_ga = parse_list<bool>(vary_ga, parse_bool);
      spec.gating = parse_list<GatingKind>(vary_gating, [](const std::string& s) { return parse_gating(s); });
      spec.hops = parse_list<std::size_t>(vary_hops, [](const std::string& s) { return std::size_t(std::stoul(s)); });
      spec.use_feature = parse_list<bool>(vary_feature, parse_bool);
      spec.use_char = parse_list<bool>(vary_char, parse_bool);
      spec.fix_word_table = parse_list<bool>(vary_fix, parse_bool);
      spec.token_attention = parse_list<bool>(vary_tok, parse_bool);
      spec.train_fraction = parse_list<double>(fractions, [](const std::string& s) { return std::stod(s); });
      spec.seeds = parse_list<std::uint64_t>(seeds, [](const std::string& s) { return std::uint64_t(std::stoull(s)); });
      spec.baseline = baseline;
      try {
        spec.validate();
        expand(spec);
      } catch (const ParameterError& e) {
        throw UsageError(e.what());
      }
      Dataset ds;
      ds.train = load_split(rc.train_path, rc.max_doc_len);
      if (!rc.valid_path.empty()) ds.valid = load_split(rc.valid_path, rc.max_doc_len);
      ds.test = load_split(rc.test_path, rc.max_doc_len);
      std::optional<EmbeddingTable> table;
      if (!rc.embeddings.empty()) table = load_embeddings(rc.embeddings, rc.train.model.word_dim);
      AblationOptions opts;
      opts.pretrained = table ? &*table : nullptr;
      opts.on_run = [](const AblationConfig& c, const AblationRun& r) {
        std::fprintf(stderr, "%s seed %llu: valid %.4f test %.4f\n", c.name.c_str(),
                     static_cast<unsigned long long>(r.seed), r.valid_acc, r.test_acc);
      };
      const AblationTable t = ablate(spec, ds, opts);
      std::cout << format_table(t);
      if (!ablate_csv.empty()) {
        std::ofstream out(ablate_csv);
        if (!out) throw std::runtime_error("cannot write " + ablate_csv.string());
        out << format_csv(t);
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
