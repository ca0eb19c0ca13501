// Accuracy, significance tests, ablation grids and attention export.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gar/corpus.hpp"
#include "gar/reader.hpp"
#include "gar/train.hpp"

namespace gar {

double accuracy(const std::vector<std::size_t>& predictions, const std::vector<ClozeExample>& examples);
double accuracy(const ReaderParams& params, const Vocab& vocab, const std::vector<ClozeExample>& examples);

// One-sided p-value for H0: accuracy <= p0, normal approximation.
double proportion_test(std::size_t k_correct, std::size_t n, double p0);

// P(X >= max(b, c)) for X ~ Binomial(b + c, 1/2).
double mcnemar_exact(std::size_t b, std::size_t c);

struct Disagreement {
  std::size_t b = 0;  // only A correct
  std::size_t c = 0;  // only B correct
};
Disagreement disagreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                          const std::vector<ClozeExample>& examples);

// Deterministic subset keeping the original order.
std::vector<ClozeExample> subsample(const std::vector<ClozeExample>& examples, double fraction,
                                    std::uint64_t seed);

struct AblationSpec {
  TrainConfig base;
  std::vector<bool> use_ga{true};
  std::vector<GatingKind> gating{GatingKind::multiply};
  std::vector<std::size_t> hops{3};
  std::vector<bool> use_feature{false};
  std::vector<bool> use_char{false};
  std::vector<bool> fix_word_table{false};
  std::vector<bool> token_attention{true};
  std::vector<double> train_fraction{1.0};
  std::vector<std::uint64_t> seeds{1};
  // Index into expand(spec) of the configuration others are tested against.
  std::size_t baseline = 0;

  void validate() const;
};

struct AblationConfig {
  std::string name;
  TrainConfig config;
  double fraction = 1.0;
};

// Cartesian product of the grid. Without a GA module (K=1 or use_ga off)
// the gating and token-attention settings collapse into one configuration.
std::vector<AblationConfig> expand(const AblationSpec& spec);

struct AblationRun {
  std::uint64_t seed = 0;
  double valid_acc = 0;
  double test_acc = 0;
  std::vector<std::size_t> test_predictions;
};

struct AblationRow {
  AblationConfig config;
  std::vector<AblationRun> runs;
  double median_valid = 0;
  double median_test = 0;
  Disagreement versus_baseline;  // pooled over seeds
  std::optional<double> mcnemar_p;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::size_t baseline = 0;
};

struct AblationOptions {
  const EmbeddingTable* pretrained = nullptr;
  std::function<void(const AblationConfig&, const AblationRun&)> on_run;
};

double median(std::vector<double> values);

AblationTable ablate(const AblationSpec& spec, const Dataset& dataset, const AblationOptions& options = {});
std::string format_table(const AblationTable& table);
std::string format_csv(const AblationTable& table);

struct ExportOptions {
  bool all_rows = false;  // every document position instead of candidate positions only
};

// Writes alpha_layer<k>.csv/.svg for k = 1..K-1 and s.csv/.svg into out_dir;
// returns the paths written.
std::vector<std::filesystem::path> attention_export(const ReaderParams& params, const Vocab& vocab,
                                                    const ClozeExample& example,
                                                    const std::filesystem::path& out_dir,
                                                    const ExportOptions& options = {});

std::string csv_field(const std::string& text);
// Grayscale heatmap: 0 is white, 1 is black.
std::string heatmap_svg(const std::vector<std::string>& row_labels, const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& cells, const std::string& title);

}  // namespace gar
