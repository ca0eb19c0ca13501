#include "gar/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace gar {

namespace {

constexpr char kMagic[] = "GARCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little, "archive layout assumes a little-endian host");

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

void read_doubles(std::istream& in, std::span<double> values, const std::string& what) {
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) throw CheckpointError("checkpoint truncated while reading " + what);
}

}  // namespace

nlohmann::json to_json(const ReaderConfig& c) {
  return {{"hops", c.hops},
          {"vocab_size", c.vocab_size},
          {"word_dim", c.word_dim},
          {"embed_init_std", c.embed_init_std},
          {"hidden", c.hidden},
          {"use_char", c.use_char},
          {"char_dim", c.char_dim},
          {"char_hidden", c.char_hidden},
          {"char_out", c.char_out},
          {"use_feature", c.use_feature},
          {"feature_dim", c.feature_dim},
          {"use_ga", c.use_ga},
          {"token_attention", c.token_attention},
          {"gating", to_string(c.gating)},
          {"dropout", c.dropout},
          {"fix_word_table", c.fix_word_table}};
}

ReaderConfig reader_config_from_json(const nlohmann::json& j) {
  ReaderConfig c;
  try {
    c.hops = j.at("hops").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.word_dim = j.at("word_dim").get<std::size_t>();
    c.embed_init_std = j.at("embed_init_std").get<double>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.use_char = j.at("use_char").get<bool>();
    c.char_dim = j.at("char_dim").get<std::size_t>();
    c.char_hidden = j.at("char_hidden").get<std::size_t>();
    c.char_out = j.at("char_out").get<std::size_t>();
    c.use_feature = j.at("use_feature").get<bool>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.use_ga = j.at("use_ga").get<bool>();
    c.token_attention = j.at("token_attention").get<bool>();
    c.gating = parse_gating(j.at("gating").get<std::string>());
    c.dropout = j.at("dropout").get<double>();
    c.fix_word_table = j.at("fix_word_table").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad model config in checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto named = ck.params.named();
  const bool with_adam = !ck.adam_m.empty();
  if (with_adam && (ck.adam_m.size() != named.size() || ck.adam_v.size() != named.size())) {
    throw CheckpointError("optimizer state does not match the parameter list");
  }

  nlohmann::json header;
  header["model"] = to_json(ck.params.config);
  header["vocab"] = ck.vocab.tokens();
  header["epoch"] = ck.epoch;
  header["best_valid"] = ck.best_valid;
  header["best_epoch"] = ck.best_epoch;
  header["adam_step"] = ck.adam_step;
  header["has_adam"] = with_adam;
  header["train_config"] = ck.train_config;
  auto& arrays = header["arrays"];
  arrays = nlohmann::json::array();
  for (const auto& [name, t] : named) arrays.push_back({{"name", name}, {"shape", t.shape()}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, kMagicLen);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
      write_doubles(out, named[i].second.data());
      if (with_adam) {
        if (ck.adam_m[i].size() != named[i].second.size() || ck.adam_v[i].size() != named[i].second.size()) {
          throw CheckpointError("optimizer moments for " + named[i].first + " have the wrong size");
        }
        write_doubles(out, ck.adam_m[i]);
        write_doubles(out, ck.adam_v[i]);
      }
    }
    out.flush();
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw CheckpointError(path.string() + " is not a model checkpoint");
  }
  const std::uint64_t len = read_u64(in);
  if (!in || len > (1ULL << 32)) throw CheckpointError("corrupt checkpoint header in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("checkpoint header truncated in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  const ReaderConfig config = reader_config_from_json(header.at("model"));
  ck.params = ReaderParams::init(config, 0);
  ck.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
  if (ck.vocab.size() != config.vocab_size) {
    throw CheckpointError("checkpoint vocabulary has " + std::to_string(ck.vocab.size()) +
                          " entries but the model expects " + std::to_string(config.vocab_size));
  }
  ck.epoch = header.at("epoch").get<std::size_t>();
  ck.best_valid = header.at("best_valid").get<double>();
  ck.best_epoch = header.at("best_epoch").get<std::size_t>();
  ck.adam_step = header.at("adam_step").get<std::uint64_t>();
  ck.train_config = header.value("train_config", nlohmann::json{});
  const bool with_adam = header.at("has_adam").get<bool>();

  auto named = ck.params.named();
  const auto& arrays = header.at("arrays");
  if (arrays.size() != named.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(arrays.size()) + " arrays, model has " +
                          std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    const auto stored_name = arrays[i].at("name").get<std::string>();
    const auto stored_shape = arrays[i].at("shape").get<Shape>();
    if (stored_name != name || stored_shape != t.shape()) {
      throw CheckpointError("checkpoint array " + stored_name + " " + shape_string(stored_shape) +
                            " does not match model array " + name + " " + shape_string(t.shape()));
    }
    read_doubles(in, t.mutable_data(), name);
    if (with_adam) {
      ck.adam_m.emplace_back(t.size());
      ck.adam_v.emplace_back(t.size());
      read_doubles(in, ck.adam_m.back(), name + " moments");
      read_doubles(in, ck.adam_v.back(), name + " moments");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes in " + path.string());
  return ck;
}

}  // namespace gar
