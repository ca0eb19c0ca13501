// Cross-entropy training with ADAM, global-norm clipping and a halving
// learning-rate schedule.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "gar/checkpoint.hpp"
#include "gar/corpus.hpp"
#include "gar/reader.hpp"

namespace gar {

struct TrainConfig {
  ReaderConfig model;  // vocab_size is filled in from the training data
  std::size_t batch_size = 32;
  double lr0 = 5e-4;
  double clip_threshold = 10.0;
  std::size_t epochs = 10;
  // Epochs run at lr0 before halving starts.
  std::size_t lr_halve_after = 2;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

inline constexpr double kProbabilityFloor = 1e-12;

// -log Pr(answer), with Pr clamped at kProbabilityFloor.
Tensor loss(const Tensor& probabilities, std::size_t answer);
// Mean of the per-example losses.
Tensor batch_loss(const std::vector<Tensor>& probabilities, const std::vector<std::size_t>& answers);
// How many times the clamp fired on this thread.
std::size_t clamp_count();
void reset_clamp_count();

double global_norm(std::span<const std::span<double>> grads);
// Rescales in place when the global L2 norm exceeds threshold; returns the
// norm before clipping.
double clip_gradients(std::span<const std::span<double>> grads, double threshold);
std::vector<std::vector<double>> clip_gradients(std::vector<std::vector<double>> grads, double threshold);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// One update of every parameter from its gradient (missing gradient counts
// as zero). Frozen parameters are left untouched, moments included.
void adam_step(AdamState& state, const std::vector<Tensor>& params, const std::vector<bool>& frozen,
               double lr, const AdamConfig& config = {});

double lr_schedule(std::size_t epoch, double lr0, std::size_t halve_after = 2);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double valid_acc = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  // When set: best.ckpt, last.ckpt and metrics.log are written here.
  std::filesystem::path out_dir;
  const EmbeddingTable* pretrained = nullptr;
  bool resume = false;  // continue from out_dir/last.ckpt
  bool timestamps = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ReaderParams best;
  Vocab vocab;
  std::size_t best_epoch = 0;
  double best_valid = -1.0;
  std::vector<EpochRecord> history;
};

TrainResult train(const TrainConfig& config, const std::vector<ClozeExample>& train_set,
                  const std::vector<ClozeExample>& valid_set, const TrainOptions& options = {});

// Predicted candidate index per example, evaluated in batches.
std::vector<std::size_t> predict_all(const ReaderParams& params, const Vocab& vocab,
                                     const std::vector<ClozeExample>& examples, std::size_t batch_size = 32);

// Parameter handles in named() order and their frozen flags.
std::vector<Tensor> parameter_list(const ReaderParams& params);
std::vector<bool> frozen_flags(const ReaderParams& params);

}  // namespace gar
