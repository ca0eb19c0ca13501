// Binary model archive. Layout: the magic line, a little-endian u64 header
// length, a JSON header (model config, vocabulary, training position, and the
// name and shape of every array), then the arrays' raw IEEE-754 doubles in
// header order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gar/corpus.hpp"
#include "gar/reader.hpp"
#include "json.hpp"

namespace gar {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ReaderParams params;
  Vocab vocab;
  std::size_t epoch = 0;
  double best_valid = -1.0;
  std::size_t best_epoch = 0;
  // Optimizer moments, parallel to params.named(); empty for a bare model.
  std::uint64_t adam_step = 0;
  std::vector<std::vector<double>> adam_m, adam_v;
  nlohmann::json train_config;  // opaque to this module
};

nlohmann::json to_json(const ReaderConfig& config);
ReaderConfig reader_config_from_json(const nlohmann::json& j);

// Written to a sibling temp file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gar
