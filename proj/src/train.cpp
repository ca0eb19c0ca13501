#include "gar/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <numeric>

#include "gar/random.hpp"

namespace gar {

namespace {

thread_local std::size_t t_clamps = 0;

std::string format_metrics(const EpochRecord& r, bool timestamp) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,", r.epoch, r.lr, r.train_loss, r.valid_acc);
  std::string line = buf;
  if (timestamp) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    line += ts;
  }
  return line;
}

ReaderParams clone(const ReaderParams& p) {
  ReaderParams copy = ReaderParams::init(p.config, 0);
  auto dst = copy.named();
  const auto src = p.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto values = src[i].second.data();
    std::copy(values.begin(), values.end(), dst[i].second.mutable_data().begin());
  }
  return copy;
}

void dump_batch(const std::filesystem::path& dir, std::size_t batch_id,
                const std::vector<const ClozeExample*>& chunk) {
  if (dir.empty()) return;
  std::vector<ClozeExample> examples;
  for (const auto* ex : chunk) examples.push_back(*ex);
  write_examples(dir / ("nan_batch_" + std::to_string(batch_id) + ".txt"), examples);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ParameterError("train: batch_size must be positive");
  if (!(lr0 > 0)) throw ParameterError("train: lr0 must be positive");
  if (!(clip_threshold > 0)) throw ParameterError("train: clip threshold must be positive");
  if (epochs == 0) throw ParameterError("train: epochs must be positive");
  if (!(model.dropout >= 0.0 && model.dropout < 1.0)) throw ParameterError("train: dropout must lie in [0, 1)");
  if (model.hops < 1 || model.word_dim == 0 || model.hidden == 0) {
    throw ParameterError("train: K and model dimensions must be positive");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},     {"batch_size", c.batch_size},
          {"lr0", c.lr0},                  {"clip_threshold", c.clip_threshold},
          {"epochs", c.epochs},            {"lr_halve_after", c.lr_halve_after},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = reader_config_from_json(j.at("model"));
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr0 = j.at("lr0").get<double>();
  c.clip_threshold = j.at("clip_threshold").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.lr_halve_after = j.at("lr_halve_after").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Tensor loss(const Tensor& probabilities, std::size_t answer) {
  if (probabilities.rank() != 1) throw DimensionError("loss: expected a probability vector");
  if (answer >= probabilities.size()) {
    throw IndexError("loss: answer " + std::to_string(answer) + " outside " +
                     std::to_string(probabilities.size()) + " candidates");
  }
  if (probabilities.at(answer) < kProbabilityFloor) {
    ++t_clamps;
    return Tensor::vector({-std::log(kProbabilityFloor)});
  }
  const std::size_t row = answer;
  const Tensor p = gather_rows(reshape(probabilities, {probabilities.size(), 1}), std::span(&row, 1));
  return affine(sum(log(p)), -1.0, 0.0);
}

Tensor batch_loss(const std::vector<Tensor>& probabilities, const std::vector<std::size_t>& answers) {
  if (probabilities.empty() || probabilities.size() != answers.size()) {
    throw DimensionError("batch_loss: need one answer per example");
  }
  std::vector<Tensor> terms;
  terms.reserve(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    terms.push_back(reshape(loss(probabilities[i], answers[i]), {1}));
  }
  return affine(sum(concat(terms, 0)), 1.0 / static_cast<double>(terms.size()), 0.0);
}

std::size_t clamp_count() { return t_clamps; }
void reset_clamp_count() { t_clamps = 0; }

double global_norm(std::span<const std::span<double>> grads) {
  double sq = 0.0;
  for (const auto g : grads) {
    for (const double v : g) sq += v * v;
  }
  return std::sqrt(sq);
}

double clip_gradients(std::span<const std::span<double>> grads, double threshold) {
  if (!(threshold > 0)) throw ParameterError("clip_gradients: threshold must be positive");
  const double norm = global_norm(grads);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (const auto g : grads) {
      for (double& v : g) v *= scale;
    }
  }
  return norm;
}

std::vector<std::vector<double>> clip_gradients(std::vector<std::vector<double>> grads, double threshold) {
  std::vector<std::span<double>> views(grads.begin(), grads.end());
  clip_gradients(views, threshold);
  return grads;
}

void adam_step(AdamState& state, const std::vector<Tensor>& params, const std::vector<bool>& frozen,
               double lr, const AdamConfig& config) {
  if (frozen.size() != params.size()) throw DimensionError("adam_step: one frozen flag per parameter");
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size() || v.size() != p.size()) {
      throw DimensionError("adam_step: state for parameter " + std::to_string(i) + " has the wrong size");
    }
    if (frozen[i]) continue;
    const auto& g = p.node()->grad;
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.eps);
    }
  }
}

double lr_schedule(std::size_t epoch, double lr0, std::size_t halve_after) {
  if (epoch < 1) throw ParameterError("lr_schedule: epochs are numbered from 1");
  if (epoch <= halve_after) return lr0;
  return std::ldexp(lr0, -static_cast<int>(epoch - halve_after));
}

std::vector<Tensor> parameter_list(const ReaderParams& params) {
  std::vector<Tensor> out;
  for (auto& [name, t] : params.named()) out.push_back(t);
  return out;
}

std::vector<bool> frozen_flags(const ReaderParams& params) {
  std::vector<bool> out;
  for (auto& [name, t] : params.named()) out.push_back(params.frozen(name));
  return out;
}

std::vector<std::size_t> predict_all(const ReaderParams& params, const Vocab& vocab,
                                     const std::vector<ClozeExample>& examples, std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const ClozeExample*> chunk;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) chunk.push_back(&examples[i]);
    const BatchOutput result = forward(params, make_batch(chunk, vocab));
    for (const auto& p : result.probabilities) out.push_back(predict(p.data()));
  }
  return out;
}

TrainResult train(const TrainConfig& config, const std::vector<ClozeExample>& train_set,
                  const std::vector<ClozeExample>& valid_set, const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw TrainingError("train: the training set is empty");
  const auto& dir = options.out_dir;
  if (!dir.empty()) std::filesystem::create_directories(dir);

  TrainResult result;
  ReaderParams params;
  AdamState adam;
  std::size_t first_epoch = 1;
  if (options.resume) {
    if (dir.empty()) throw TrainingError("train: resuming needs an output directory");
    Checkpoint last = load_checkpoint(dir / "last.ckpt");
    ReaderConfig expected = config.model;
    expected.vocab_size = last.params.config.vocab_size;
    if (!(last.params.config == expected)) {
      throw TrainingError("train: checkpoint model config differs from the requested one");
    }
    params = std::move(last.params);
    result.vocab = std::move(last.vocab);
    adam.step = last.adam_step;
    adam.m = std::move(last.adam_m);
    adam.v = std::move(last.adam_v);
    first_epoch = last.epoch + 1;
    result.best_valid = last.best_valid;
    result.best_epoch = last.best_epoch;
    result.best = std::filesystem::exists(dir / "best.ckpt") ? load_checkpoint(dir / "best.ckpt").params
                                                             : clone(params);
  } else {
    result.vocab = Vocab::build(train_set);
    ReaderConfig model = config.model;
    model.vocab_size = result.vocab.size();
    params = ReaderParams::init(model, mix_seed(config.seed, 1));
    if (options.pretrained) params.load_pretrained(result.vocab, *options.pretrained);
    if (!dir.empty()) std::ofstream(dir / "metrics.log", std::ios::trunc);
  }

  const auto param_list = parameter_list(params);
  const auto frozen = frozen_flags(params);
  std::vector<std::span<double>> grads;

  for (std::size_t epoch = first_epoch; epoch <= config.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config.lr0, config.lr_halve_after);
    const std::uint64_t epoch_seed = mix_seed(config.seed, 1000 + epoch);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(epoch_seed);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batch_id = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_id) {
      std::vector<const ClozeExample*> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        chunk.push_back(&train_set[order[i]]);
      }
      const Batch batch = make_batch(chunk, result.vocab);
      Tape tape;
      {
        TapeScope scope(tape);
        ForwardOptions fo;
        fo.mode = Mode::train;
        fo.dropout_seed = mix_seed(epoch_seed, batch_id + 1);
        const BatchOutput out = forward(params, batch, fo);
        const Tensor l = batch_loss(out.probabilities, batch.answers);
        if (!std::isfinite(l.item())) {
          dump_batch(dir, batch_id, chunk);
          throw TrainingError("train: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_id));
        }
        loss_sum += l.item() * static_cast<double>(chunk.size());
        tape.backward(l);
      }
      grads.clear();
      for (std::size_t i = 0; i < param_list.size(); ++i) {
        Tensor p = param_list[i];
        if (!frozen[i] && p.has_grad()) grads.push_back(p.mutable_grad());
      }
      clip_gradients(grads, config.clip_threshold);
      adam_step(adam, param_list, frozen, lr);
      for (auto p : param_list) p.zero_grad();
    }

    EpochRecord record{epoch, lr, loss_sum / static_cast<double>(train_set.size()), 0.0};
    const auto& scored = valid_set.empty() ? train_set : valid_set;
    const auto preds = predict_all(params, result.vocab, scored, config.batch_size);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == scored[i].answer ? 1 : 0;
    record.valid_acc = static_cast<double>(correct) / static_cast<double>(scored.size());
    result.history.push_back(record);

    const bool improved = record.valid_acc > result.best_valid;
    if (improved) {
      result.best_valid = record.valid_acc;
      result.best_epoch = epoch;
      result.best = clone(params);
    }
    if (!dir.empty()) {
      std::ofstream(dir / "metrics.log", std::ios::app) << format_metrics(record, options.timestamps) << '\n';
      Checkpoint ck;
      ck.params = params;
      ck.vocab = result.vocab;
      ck.epoch = epoch;
      ck.best_valid = result.best_valid;
      ck.best_epoch = result.best_epoch;
      ck.train_config = to_json(config);
      if (improved) save_checkpoint(dir / "best.ckpt", ck);
      ck.adam_step = adam.step;
      ck.adam_m = adam.m;
      ck.adam_v = adam.v;
      save_checkpoint(dir / "last.ckpt", ck);
    }
    if (options.on_epoch) options.on_epoch(record);
  }
  if (!result.best.word_table.defined()) result.best = clone(params);
  return result;
}

}  // namespace gar
