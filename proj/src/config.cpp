#include "gar/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace gar {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys{
      "train", "valid", "test", "embeddings", "output_dir", "checkpoint", "max_doc_len",
      "batch_size", "lr0", "clip_threshold", "epochs", "lr_halve_after", "seed",
      "hops", "hidden", "word_dim", "embed_init_std", "use_char", "char_dim", "char_hidden", "char_out",
      "use_feature", "feature_dim", "use_ga", "token_attention", "gating", "dropout", "fix_word_table"};
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto& m = train.model;
  if (key == "train") train_path = v;
  else if (key == "valid") valid_path = v;
  else if (key == "test") test_path = v;
  else if (key == "embeddings") embeddings = v;
  else if (key == "output_dir") output_dir = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "max_doc_len") max_doc_len = to_size(key, v);
  else if (key == "batch_size") train.batch_size = to_size(key, v);
  else if (key == "lr0") train.lr0 = to_double(key, v);
  else if (key == "clip_threshold") train.clip_threshold = to_double(key, v);
  else if (key == "epochs") train.epochs = to_size(key, v);
  else if (key == "lr_halve_after") train.lr_halve_after = to_size(key, v);
  else if (key == "seed") train.seed = to_size(key, v);
  else if (key == "hops" || key == "k") m.hops = to_size(key, v);
  else if (key == "hidden") m.hidden = to_size(key, v);
  else if (key == "word_dim") m.word_dim = to_size(key, v);
  else if (key == "embed_init_std") m.embed_init_std = to_double(key, v);
  else if (key == "use_char") m.use_char = to_bool(key, v);
  else if (key == "char_dim") m.char_dim = to_size(key, v);
  else if (key == "char_hidden") m.char_hidden = to_size(key, v);
  else if (key == "char_out") m.char_out = to_size(key, v);
  else if (key == "use_feature") m.use_feature = to_bool(key, v);
  else if (key == "feature_dim") m.feature_dim = to_size(key, v);
  else if (key == "use_ga") m.use_ga = to_bool(key, v);
  else if (key == "token_attention") m.token_attention = to_bool(key, v);
  else if (key == "gating") {
    try {
      m.gating = parse_gating(v);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "dropout") m.dropout = to_double(key, v);
  else if (key == "fix_word_table") m.fix_word_table = to_bool(key, v);
  else throw ConfigError("unknown configuration key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  const auto& m = train.model;
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  if (key == "train") return train_path.string();
  if (key == "valid") return valid_path.string();
  if (key == "test") return test_path.string();
  if (key == "embeddings") return embeddings.string();
  if (key == "output_dir") return output_dir.string();
  if (key == "checkpoint") return checkpoint.string();
  if (key == "max_doc_len") return std::to_string(max_doc_len);
  if (key == "batch_size") return std::to_string(train.batch_size);
  if (key == "lr0") return num(train.lr0);
  if (key == "clip_threshold") return num(train.clip_threshold);
  if (key == "epochs") return std::to_string(train.epochs);
  if (key == "lr_halve_after") return std::to_string(train.lr_halve_after);
  if (key == "seed") return std::to_string(train.seed);
  if (key == "hops" || key == "k") return std::to_string(m.hops);
  if (key == "hidden") return std::to_string(m.hidden);
  if (key == "word_dim") return std::to_string(m.word_dim);
  if (key == "embed_init_std") return num(m.embed_init_std);
  if (key == "use_char") return b(m.use_char);
  if (key == "char_dim") return std::to_string(m.char_dim);
  if (key == "char_hidden") return std::to_string(m.char_hidden);
  if (key == "char_out") return std::to_string(m.char_out);
  if (key == "use_feature") return b(m.use_feature);
  if (key == "feature_dim") return std::to_string(m.feature_dim);
  if (key == "use_ga") return b(m.use_ga);
  if (key == "token_attention") return b(m.token_attention);
  if (key == "gating") return to_string(m.gating);
  if (key == "dropout") return num(m.dropout);
  if (key == "fix_word_table") return b(m.fix_word_table);
  throw ConfigError("unknown configuration key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  for (const auto& [key, value] : parse_key_values(in)) {
    try {
      config.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
}

std::string format_run_config(const RunConfig& config) {
  std::string out;
  for (const auto& key : run_config_keys()) out += key + " = " + config.get(key) + "\n";
  return out;
}

}  // namespace gar
