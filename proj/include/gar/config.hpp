// Flat key=value run configuration shared by the command-line tool.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gar/train.hpp"

namespace gar {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TrainConfig train;
  std::filesystem::path train_path, valid_path, test_path;
  std::filesystem::path embeddings;
  std::filesystem::path output_dir;
  std::filesystem::path checkpoint;
  std::size_t max_doc_len = 0;

  // Throws ConfigError for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
};

// Every accepted key, in documentation order.
const std::vector<std::string>& run_config_keys();

// Lines are `key = value`; `#` starts a comment; blank lines are ignored.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in);
void apply_file(RunConfig& config, const std::filesystem::path& path);
std::string format_run_config(const RunConfig& config);

}  // namespace gar
