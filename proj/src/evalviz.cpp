#include "gar/evalviz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gar/random.hpp"

namespace gar {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += ch;
    }
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string matrix_csv(const std::string& corner, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& cells) {
  std::string out = csv_field(corner);
  for (const auto& c : col_labels) out += "," + csv_field(c);
  out += "\n";
  for (std::size_t r = 0; r < cells.size(); ++r) {
    out += csv_field(row_labels[r]);
    for (const double v : cells[r]) out += "," + exact(v);
    out += "\n";
  }
  return out;
}

std::string describe(const TrainConfig& c, double fraction) {
  std::string name = "K=" + std::to_string(c.model.hops);
  if (c.model.hops > 1) {
    name += c.model.use_ga ? " ga=" + to_string(c.model.gating) : " no-ga";
    if (c.model.use_ga && !c.model.token_attention) name += " -tokatt";
  }
  if (c.model.use_feature) name += " +feature";
  if (c.model.use_char) name += " +char";
  if (c.model.fix_word_table) name += " fixed-L";
  if (fraction != 1.0) name += " frac=" + fixed(fraction, 2);
  return name;
}

}  // namespace

double accuracy(const std::vector<std::size_t>& predictions, const std::vector<ClozeExample>& examples) {
  if (examples.empty()) throw ParameterError("accuracy: no examples");
  if (predictions.size() != examples.size()) throw DimensionError("accuracy: one prediction per example");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) correct += predictions[i] == examples[i].answer ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double accuracy(const ReaderParams& params, const Vocab& vocab, const std::vector<ClozeExample>& examples) {
  if (examples.empty()) throw ParameterError("accuracy: no examples");
  return accuracy(predict_all(params, vocab, examples), examples);
}

double proportion_test(std::size_t k_correct, std::size_t n, double p0) {
  if (n == 0) throw ParameterError("proportion_test: n must be positive");
  if (k_correct > n) throw ParameterError("proportion_test: k exceeds n");
  if (!(p0 > 0.0 && p0 < 1.0)) throw ParameterError("proportion_test: p0 must lie in (0, 1)");
  const double nn = static_cast<double>(n);
  const double z = (static_cast<double>(k_correct) / nn - p0) / std::sqrt(p0 * (1.0 - p0) / nn);
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double mcnemar_exact(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  if (n == 0) throw ParameterError("mcnemar_exact: no discordant pairs, the test is undefined");
  const std::size_t k = std::max(b, c);
  double p = 0.0;
  if (n <= 60) {
    // Exact integer arithmetic where it fits.
    unsigned long long total = 0, binom = 1;
    for (std::size_t i = 0; i <= n; ++i) {
      if (i >= k) total += binom;
      binom = binom * (n - i) / (i + 1);
    }
    p = std::ldexp(static_cast<double>(total), -static_cast<int>(n));
  } else {
    const double dn = static_cast<double>(n);
    for (std::size_t i = k; i <= n; ++i) {
      const double di = static_cast<double>(i);
      p += std::exp(std::lgamma(dn + 1) - std::lgamma(di + 1) - std::lgamma(dn - di + 1) - dn * std::log(2.0));
    }
  }
  return std::min(1.0, p);
}

Disagreement disagreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                          const std::vector<ClozeExample>& examples) {
  if (a.size() != examples.size() || b.size() != examples.size()) {
    throw DimensionError("disagreement: prediction lists must cover the same examples");
  }
  Disagreement d;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const bool ra = a[i] == examples[i].answer, rb = b[i] == examples[i].answer;
    if (ra && !rb) ++d.b;
    if (rb && !ra) ++d.c;
  }
  return d;
}

std::vector<ClozeExample> subsample(const std::vector<ClozeExample>& examples, double fraction,
                                    std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ParameterError("subsample: fraction must lie in (0, 1]");
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(examples.size())));
  if (keep >= examples.size()) return examples;
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xf4ac));
  rng.shuffle(idx);
  idx.resize(std::max<std::size_t>(keep, 1));
  std::sort(idx.begin(), idx.end());
  std::vector<ClozeExample> out;
  for (const std::size_t i : idx) out.push_back(examples[i]);
  return out;
}

void AblationSpec::validate() const {
  base.validate();
  if (use_ga.empty() || gating.empty() || hops.empty() || use_feature.empty() || use_char.empty() ||
      fix_word_table.empty() || token_attention.empty() || train_fraction.empty()) {
    throw ParameterError("ablation: every grid axis needs at least one value");
  }
  if (seeds.empty()) throw ParameterError("ablation: no seeds");
  for (const auto k : hops) {
    if (k < 1 || k > 4) throw ParameterError("ablation: K must lie in 1..4");
  }
  for (const double f : train_fraction) {
    if (!(f > 0.0 && f <= 1.0)) throw ParameterError("ablation: train fraction must lie in (0, 1]");
  }
}

std::vector<AblationConfig> expand(const AblationSpec& spec) {
  spec.validate();
  std::vector<AblationConfig> out;
  for (const std::size_t k : spec.hops)
    for (const bool ga : spec.use_ga)
      for (const GatingKind g : spec.gating)
        for (const bool tok : spec.token_attention)
          for (const bool feat : spec.use_feature)
            for (const bool ch : spec.use_char)
              for (const bool fix : spec.fix_word_table)
                for (const double frac : spec.train_fraction) {
                  TrainConfig c = spec.base;
                  c.model.hops = k;
                  c.model.use_ga = k > 1 && ga;
                  c.model.gating = c.model.use_ga ? g : GatingKind::multiply;
                  c.model.token_attention = c.model.use_ga ? tok : true;
                  c.model.use_feature = feat;
                  c.model.use_char = ch;
                  c.model.fix_word_table = fix;
                  const bool seen = std::any_of(out.begin(), out.end(), [&](const AblationConfig& a) {
                    return a.fraction == frac && a.config.model == c.model;
                  });
                  if (!seen) out.push_back({describe(c, frac), c, frac});
                }
  if (spec.baseline >= out.size()) throw ParameterError("ablation: baseline index outside the grid");
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ParameterError("median: no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationTable ablate(const AblationSpec& spec, const Dataset& dataset, const AblationOptions& options) {
  const auto configs = expand(spec);
  if (dataset.train.empty() || dataset.test.empty()) throw ParameterError("ablation: needs train and test splits");
  AblationTable table;
  table.baseline = spec.baseline;
  for (const auto& cfg : configs) {
    AblationRow row;
    row.config = cfg;
    std::vector<double> valids, tests;
    for (const std::uint64_t seed : spec.seeds) {
      TrainConfig tc = cfg.config;
      tc.seed = seed;
      const auto train_part = subsample(dataset.train, cfg.fraction, seed);
      TrainOptions to;
      to.pretrained = options.pretrained;
      const TrainResult trained = train(tc, train_part, dataset.valid, to);
      AblationRun run;
      run.seed = seed;
      run.valid_acc = trained.best_valid;
      run.test_predictions = predict_all(trained.best, trained.vocab, dataset.test, tc.batch_size);
      run.test_acc = accuracy(run.test_predictions, dataset.test);
      valids.push_back(run.valid_acc);
      tests.push_back(run.test_acc);
      if (options.on_run) options.on_run(cfg, run);
      row.runs.push_back(std::move(run));
    }
    row.median_valid = median(valids);
    row.median_test = median(tests);
    table.rows.push_back(std::move(row));
  }
  const auto& base = table.rows[table.baseline];
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    if (r == table.baseline) continue;
    auto& row = table.rows[r];
    for (std::size_t s = 0; s < row.runs.size(); ++s) {
      const Disagreement d = disagreement(row.runs[s].test_predictions, base.runs[s].test_predictions, dataset.test);
      row.versus_baseline.b += d.b;
      row.versus_baseline.c += d.c;
    }
    if (row.versus_baseline.b + row.versus_baseline.c > 0) {
      row.mcnemar_p = mcnemar_exact(row.versus_baseline.b, row.versus_baseline.c);
    }
  }
  return table;
}

std::string format_table(const AblationTable& table) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Model", "Seeds", "Valid", "Test", "Wins/Losses", "McNemar p"});
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    std::string wl = "-", p = r == table.baseline ? "(baseline)" : "-";
    if (r != table.baseline) {
      wl = std::to_string(row.versus_baseline.b) + "/" + std::to_string(row.versus_baseline.c);
      if (row.mcnemar_p) p = exact(*row.mcnemar_p);
    }
    cells.push_back({row.config.name, std::to_string(row.runs.size()), fixed(100 * row.median_valid, 1),
                     fixed(100 * row.median_test, 1), wl, p});
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (std::size_t l = 0; l < cells.size(); ++l) {
    for (std::size_t c = 0; c < cells[l].size(); ++c) {
      const auto& v = cells[l][c];
      const std::string pad(width[c] - v.size(), ' ');
      out += c == 0 ? v + pad : "  " + pad + v;
    }
    out += "\n";
    if (l == 0) out += std::string(std::accumulate(width.begin(), width.end(), 2 * (width.size() - 1)), '-') + "\n";
  }
  return out;
}

std::string format_csv(const AblationTable& table) {
  std::string out = "model,seeds,median_valid,median_test,only_model,only_baseline,mcnemar_p,per_seed_test\n";
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    std::string per_seed;
    for (const auto& run : row.runs) {
      if (!per_seed.empty()) per_seed += ";";
      per_seed += std::to_string(run.seed) + ":" + exact(run.test_acc);
    }
    out += csv_field(row.config.name) + "," + std::to_string(row.runs.size()) + "," + exact(row.median_valid) +
           "," + exact(row.median_test) + "," + std::to_string(row.versus_baseline.b) + "," +
           std::to_string(row.versus_baseline.c) + "," + (row.mcnemar_p ? exact(*row.mcnemar_p) : "") + "," +
           per_seed + "\n";
  }
  return out;
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n\r") == std::string::npos) return text;
  std::string out = "\"";
  for (const char ch : text) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string heatmap_svg(const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& cells, const std::string& title) {
  constexpr int cell = 24, left = 140, top = 110;
  const int w = left + cell * static_cast<int>(col_labels.size()) + 20;
  const int h = top + cell * static_cast<int>(row_labels.size()) + 20;
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
      << w << ' ' << h << "\" font-family=\"monospace\" font-size=\"11\">\n"
      << "<title>" << xml_escape(title) << "</title>\n"
      << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n"
      << "<text x=\"4\" y=\"14\" font-size=\"12\">" << xml_escape(title) << "</text>\n";
  for (std::size_t c = 0; c < col_labels.size(); ++c) {
    const int x = left + cell * static_cast<int>(c) + cell / 2;
    svg << "<text x=\"" << x << "\" y=\"" << top - 6 << "\" transform=\"rotate(-60 " << x << ' ' << top - 6
        << ")\">" << xml_escape(col_labels[c]) << "</text>\n";
  }
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    const int y = top + cell * static_cast<int>(r);
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
        << xml_escape(row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      const double v = std::clamp(cells[r][c], 0.0, 1.0);
      const int g = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      svg << "<rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << y << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << g << ',' << g << ',' << g
          << ")\" stroke=\"#ccc\" stroke-width=\"0.5\"><title>" << exact(cells[r][c]) << "</title></rect>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::filesystem::path> attention_export(const ReaderParams& params, const Vocab& vocab,
                                                    const ClozeExample& example,
                                                    const std::filesystem::path& out_dir,
                                                    const ExportOptions& options) {
  const ExampleOutput result = forward(params, vocab, example);
  std::filesystem::create_directories(out_dir);

  std::vector<std::size_t> rows;
  if (options.all_rows) {
    rows.resize(example.doc.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  } else {
    for (const auto& group : example.positions) rows.insert(rows.end(), group.begin(), group.end());
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  }
  std::vector<std::string> row_labels, doc_labels, query_labels;
  for (const std::size_t i : rows) row_labels.push_back(std::to_string(i) + ":" + example.doc[i]);
  for (std::size_t i = 0; i < example.doc.size(); ++i) doc_labels.push_back(std::to_string(i) + ":" + example.doc[i]);
  for (const auto& t : example.query) query_labels.push_back(t);

  std::vector<std::filesystem::path> written;
  for (std::size_t k = 0; k < result.trace.alphas.size(); ++k) {
    const Tensor& alpha = result.trace.alphas[k];  // [|Q| x |D|]
    std::vector<std::vector<double>> cells;
    for (const std::size_t i : rows) {
      std::vector<double> line(alpha.rows());
      for (std::size_t j = 0; j < alpha.rows(); ++j) line[j] = alpha.at(j, i);
      cells.push_back(std::move(line));
    }
    const std::string stem = "alpha_layer" + std::to_string(k + 1);
    write_file(out_dir / (stem + ".csv"), matrix_csv("document", row_labels, query_labels, cells));
    write_file(out_dir / (stem + ".svg"),
               heatmap_svg(row_labels, query_labels, cells, "query attention, layer " + std::to_string(k + 1)));
    written.push_back(out_dir / (stem + ".csv"));
    written.push_back(out_dir / (stem + ".svg"));
  }

  const auto s = result.trace.s.data();
  const std::vector<std::vector<double>> s_row{std::vector<double>(s.begin(), s.end())};
  write_file(out_dir / "s.csv", matrix_csv("", {"s"}, doc_labels, s_row));
  write_file(out_dir / "s.svg", heatmap_svg({"s"}, doc_labels, s_row, "document attention s"));
  written.push_back(out_dir / "s.csv");
  written.push_back(out_dir / "s.svg");
  return written;
}

}  // namespace gar
