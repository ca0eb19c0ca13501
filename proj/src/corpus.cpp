#include "gar/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "gar/random.hpp"

namespace gar {

bool operator==(const ClozeExample& a, const ClozeExample& b) {
  return a.doc == b.doc && a.query == b.query && a.cloze == b.cloze &&
         a.candidates == b.candidates && a.answer == b.answer && a.positions == b.positions;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<std::vector<std::size_t>> candidate_positions(
    const std::vector<std::string>& doc, const std::vector<std::vector<std::string>>& candidates) {
  std::vector<std::vector<std::size_t>> positions(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const std::set<std::string_view> parts(candidates[c].begin(), candidates[c].end());
    for (std::size_t i = 0; i < doc.size(); ++i) {
      if (parts.contains(doc[i])) positions[c].push_back(i);
    }
  }
  return positions;
}

std::optional<std::string> finalize_example(ClozeExample& example) {
  if (example.doc.empty()) return "empty document";
  const auto placeholders = std::count(example.query.begin(), example.query.end(), kClozeToken);
  if (placeholders != 1) {
    return "query must contain exactly one " + std::string(kClozeToken) + ", found " +
           std::to_string(placeholders);
  }
  example.cloze = static_cast<std::size_t>(
      std::find(example.query.begin(), example.query.end(), kClozeToken) - example.query.begin());
  if (example.candidates.empty()) return "no candidates";
  if (example.answer >= example.candidates.size()) return "answer is not among the candidates";
  for (const auto& c : example.candidates) {
    if (c.empty()) return "empty candidate";
  }
  example.positions = candidate_positions(example.doc, example.candidates);
  for (std::size_t c = 0; c < example.candidates.size(); ++c) {
    if (example.positions[c].empty()) {
      std::string text;
      for (const auto& t : example.candidates[c]) text += (text.empty() ? "" : " ") + t;
      return "candidate '" + text + "' does not occur in the document";
    }
  }
  return std::nullopt;
}

ParseError::ParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// Drops tail tokens beyond max_len together with candidates that no longer
// occur. Returns a reason when the answer itself disappears.
std::optional<std::string> truncate(ClozeExample& example, std::size_t max_len) {
  if (max_len == 0 || example.doc.size() <= max_len) return std::nullopt;
  example.doc.resize(max_len);
  auto positions = candidate_positions(example.doc, example.candidates);
  if (positions[example.answer].empty()) return "answer occurs only beyond the truncated document";
  std::vector<std::vector<std::string>> kept;
  std::size_t answer = 0;
  for (std::size_t c = 0; c < example.candidates.size(); ++c) {
    if (positions[c].empty()) continue;
    if (c == example.answer) answer = kept.size();
    kept.push_back(std::move(example.candidates[c]));
  }
  example.candidates = std::move(kept);
  example.answer = answer;
  return std::nullopt;
}

}  // namespace

LoadResult parse_examples(std::istream& in, std::size_t max_doc_len) {
  LoadResult result;
  std::vector<std::string> record;
  std::size_t line_no = 0, record_start = 0, record_index = 0;

  auto flush = [&]() {
    if (record.empty()) return;
    if (record.size() != 4) {
      throw ParseError(record_start, "record has " + std::to_string(record.size()) +
                                         " lines, expected document, query, answer and candidates");
    }
    ClozeExample ex;
    ex.doc = tokenize(record[0]);
    ex.query = tokenize(record[1]);
    const auto answer = tokenize(record[2]);
    std::stringstream cands(record[3]);
    std::string part;
    while (std::getline(cands, part, '|')) {
      auto tokens = tokenize(part);
      if (tokens.empty()) throw ParseError(record_start + 3, "empty candidate in candidate list");
      ex.candidates.push_back(std::move(tokens));
    }
    const auto hit = std::find(ex.candidates.begin(), ex.candidates.end(), answer);
    std::optional<std::string> reason;
    if (hit == ex.candidates.end()) {
      reason = "answer '" + join(answer) + "' is not among the candidates";
    } else {
      ex.answer = static_cast<std::size_t>(hit - ex.candidates.begin());
      reason = finalize_example(ex);
      if (!reason) reason = truncate(ex, max_doc_len);
      if (!reason) reason = finalize_example(ex);
    }
    if (reason) {
      result.rejected.push_back({record_index, record_start, *reason});
    } else {
      result.examples.push_back(std::move(ex));
    }
    ++record_index;
    record.clear();
  };

  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) {
      flush();
      continue;
    }
    if (record.empty()) record_start = line_no;
    record.push_back(line);
  }
  flush();
  return result;
}

LoadResult load_examples(const std::filesystem::path& path, std::size_t max_doc_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open example file " + path.string());
  return parse_examples(in, max_doc_len);
}

void write_examples(std::ostream& out, const std::vector<ClozeExample>& examples) {
  for (const auto& ex : examples) {
    out << join(ex.doc) << '\n' << join(ex.query) << '\n' << join(ex.candidates.at(ex.answer)) << '\n';
    for (std::size_t c = 0; c < ex.candidates.size(); ++c) {
      if (c) out << " | ";
      out << join(ex.candidates[c]);
    }
    out << "\n\n";
  }
}

void write_examples(const std::filesystem::path& path, const std::vector<ClozeExample>& examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write example file " + path.string());
  write_examples(out, examples);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

EmbeddingTable parse_embeddings(std::istream& in, std::size_t dim) {
  EmbeddingTable table;
  table.dim = dim;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::vector<double> values;
    std::string field;
    while (fields >> field) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != field.size()) throw ParseError(line_no, "not a number: '" + field + "'");
      values.push_back(v);
    }
    if (values.size() != dim) {
      throw ParseError(line_no, "expected " + std::to_string(dim) + " values for '" + token +
                                    "', found " + std::to_string(values.size()));
    }
    const auto key = tokenize(token).front();
    if (table.vectors.contains(key)) {
      table.warnings.push_back("line " + std::to_string(line_no) + ": duplicate token '" + key +
                               "', keeping the later vector");
    }
    table.vectors[key] = std::move(values);
  }
  return table;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  return parse_embeddings(in, dim);
}

// ---------------------------------------------------------------------------

Vocab::Vocab() {
  add("<pad>");
  add("<oov>");
  add(std::string(kClozeToken));
}

std::size_t Vocab::add(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

Vocab Vocab::build(const std::vector<ClozeExample>& examples) {
  Vocab vocab;
  for (const auto& ex : examples) {
    for (const auto& t : ex.doc) vocab.add(t);
    for (const auto& t : ex.query) vocab.add(t);
    for (const auto& c : ex.candidates) {
      for (const auto& t : c) vocab.add(t);
    }
  }
  return vocab;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab vocab;
  if (tokens.size() < 3 || tokens[0] != "<pad>" || tokens[1] != "<oov>" || tokens[2] != kClozeToken) {
    throw std::invalid_argument("vocabulary must start with <pad>, <oov>, @cloze");
  }
  for (const auto& t : tokens) {
    if (vocab.ids_.contains(t) && vocab.ids_.at(t) >= 3) {
      throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
    }
    vocab.add(t);
  }
  return vocab;
}

std::size_t Vocab::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kOov : it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

std::vector<std::array<int, 2>> qe_comm(const std::vector<std::string>& doc,
                                        const std::vector<std::string>& query) {
  std::unordered_set<std::string> in_query;
  for (const auto& t : query) {
    auto norm = tokenize(t);
    if (!norm.empty() && norm.front() != kClozeToken) in_query.insert(norm.front());
  }
  std::vector<std::array<int, 2>> flags;
  flags.reserve(doc.size());
  for (const auto& t : doc) {
    auto norm = tokenize(t);
    const bool present = !norm.empty() && in_query.contains(norm.front());
    flags.push_back(present ? std::array<int, 2>{0, 1} : std::array<int, 2>{1, 0});
  }
  return flags;
}

Batch make_batch(const std::vector<const ClozeExample*>& examples, const Vocab& vocab) {
  if (examples.empty()) throw std::invalid_argument("make_batch: no examples");
  Batch batch;
  const std::size_t B = examples.size();
  batch.size = B;
  for (const auto* ex : examples) {
    batch.doc_len = std::max(batch.doc_len, ex->doc.size());
    batch.query_len = std::max(batch.query_len, ex->query.size());
  }
  const std::size_t TD = batch.doc_len, TQ = batch.query_len;
  batch.doc_ids.assign(TD * B, Vocab::kPad);
  batch.doc_mask.assign(TD * B, false);
  batch.doc_oov.assign(TD * B, 0);
  batch.doc_feature.assign(TD * B, 0);
  batch.doc_word.assign(TD * B, 0);
  batch.query_ids.assign(TQ * B, Vocab::kPad);
  batch.query_mask.assign(TQ * B, false);
  batch.query_oov.assign(TQ * B, 0);
  batch.query_word.assign(TQ * B, 0);

  std::unordered_map<std::string, std::size_t> word_index;
  auto word_of = [&](const std::string& token) {
    auto [it, inserted] = word_index.try_emplace(token, batch.words.size());
    if (inserted) batch.words.push_back(token);
    return it->second;
  };
  auto oov_key = [&](const std::string& token, std::size_t id) -> std::uint64_t {
    return id == Vocab::kOov ? (hash_string(token) | 1ULL) : 0ULL;
  };

  for (std::size_t b = 0; b < B; ++b) {
    const ClozeExample& ex = *examples[b];
    const auto flags = qe_comm(ex.doc, ex.query);
    for (std::size_t t = 0; t < ex.doc.size(); ++t) {
      const std::size_t slot = t * B + b;
      batch.doc_ids[slot] = vocab.id(ex.doc[t]);
      batch.doc_mask[slot] = true;
      batch.doc_oov[slot] = oov_key(ex.doc[t], batch.doc_ids[slot]);
      batch.doc_feature[slot] = static_cast<std::size_t>(flags[t][1]);
      batch.doc_word[slot] = word_of(ex.doc[t]);
    }
    for (std::size_t t = 0; t < ex.query.size(); ++t) {
      const std::size_t slot = t * B + b;
      batch.query_ids[slot] = vocab.id(ex.query[t]);
      batch.query_mask[slot] = true;
      batch.query_oov[slot] = oov_key(ex.query[t], batch.query_ids[slot]);
      batch.query_word[slot] = word_of(ex.query[t]);
    }
    batch.doc_lengths.push_back(ex.doc.size());
    batch.query_lengths.push_back(ex.query.size());
    batch.cloze.push_back(ex.cloze);
    batch.answers.push_back(ex.answer);
    batch.candidate_positions.push_back(ex.positions);
  }

  const std::size_t W = batch.words.size();
  for (const auto& w : batch.words) batch.char_len = std::max(batch.char_len, w.size());
  batch.char_ids.assign(batch.char_len * W, Vocab::kCharPad);
  batch.char_mask.assign(batch.char_len * W, false);
  for (std::size_t w = 0; w < W; ++w) {
    const auto& word = batch.words[w];
    for (std::size_t c = 0; c < word.size(); ++c) {
      batch.char_ids[c * W + w] = Vocab::char_id(static_cast<unsigned char>(word[c]));
      batch.char_mask[c * W + w] = true;
    }
  }
  return batch;
}

std::vector<Batch> batchify(const std::vector<ClozeExample>& examples, std::size_t batch_size,
                            const Vocab& vocab) {
  if (examples.empty()) throw std::invalid_argument("batchify: no examples");
  if (batch_size == 0) throw std::invalid_argument("batchify: batch size must be positive");
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<const ClozeExample*> chunk;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
      chunk.push_back(&examples[i]);
    }
    batches.push_back(make_batch(chunk, vocab));
  }
  return batches;
}

// ---------------------------------------------------------------------------

namespace {

// Entities and relations as ids; a chain of hops facts a -r1-> b -r2-> c.
struct IdFact {
  std::size_t s, r, o;
};

class FactSet {
 public:
  // A (subject, relation) pair maps to one object, so every walk is unique.
  bool fits(const IdFact& f) const {
    if (f.s == f.o) return false;
    const auto it = objects_.find(key(f));
    return it == objects_.end() || it->second == f.o;
  }
  bool fits(const std::vector<IdFact>& chain) const {
    FactSet probe = *this;
    for (const auto& f : chain) {
      if (!probe.fits(f)) return false;
      probe.add(f);
    }
    return true;
  }
  void add(const IdFact& f) { objects_[key(f)] = f.o; }
  std::optional<std::size_t> follow(std::size_t s, std::size_t r) const {
    const auto it = objects_.find(s * 1000003 + r);
    if (it == objects_.end()) return std::nullopt;
    return it->second;
  }

 private:
  static std::size_t key(const IdFact& f) { return f.s * 1000003 + f.r; }
  std::unordered_map<std::size_t, std::size_t> objects_;
};

std::string entity(std::size_t e) { return "e" + std::to_string(e); }
std::string relation(std::size_t r) { return "r" + std::to_string(r); }

std::size_t other_than(Rng& rng, std::size_t n, std::size_t avoid) {
  const std::size_t pick = rng.below(n - 1);
  return pick >= avoid ? pick + 1 : pick;
}

std::vector<std::size_t> distinct_entities(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(k);
  return all;
}

std::optional<ClozeExample> draw_example(const SynthConfig& cfg, Rng& rng) {
  const std::size_t E = cfg.n_entities, R = cfg.n_relations;
  const auto ents = distinct_entities(rng, E, std::min<std::size_t>(E, 9));
  const std::size_t c = ents[0], x = ents[1], y = ents[2];
  const std::size_t r1 = rng.below(R), r2 = rng.below(R);

  // Designed chains first: the answer chain, then near misses that share the
  // cue or the relations with it. They are kept only while they fit.
  std::vector<std::vector<IdFact>> designed;
  if (cfg.hops == 1) {
    designed.push_back({{c, r1, x}});
    if (R > 1 && ents.size() > 3) designed.push_back({{c, other_than(rng, R, r1), ents[3]}});
    if (ents.size() > 5) designed.push_back({{ents[4], r1, ents[5]}});
  } else {
    designed.push_back({{c, r1, x}, {x, r2, y}});
    if (R > 1 && ents.size() > 4) designed.push_back({{c, other_than(rng, R, r1), ents[3]}, {ents[3], r2, ents[4]}});
    if (ents.size() > 7) designed.push_back({{ents[5], r1, ents[6]}, {ents[6], r2, ents[7]}});
    if (R > 1 && ents.size() > 8) designed.push_back({{c, r1, x}, {x, other_than(rng, R, r2), ents[8]}});
  }

  FactSet facts;
  std::vector<std::vector<IdFact>> chains;
  std::size_t n_facts = 0;
  for (const auto& chain : designed) {
    std::size_t fresh = 0;
    for (const auto& f : chain) fresh += facts.follow(f.s, f.r) ? 0 : 1;
    if (n_facts + fresh > cfg.n_facts || !facts.fits(chain)) continue;
    for (const auto& f : chain) facts.add(f);
    chains.push_back(chain);
    n_facts += fresh;
  }
  if (chains.empty() || chains.front().front().s != c) return std::nullopt;

  for (std::size_t attempt = 0; n_facts < cfg.n_facts && attempt < 50 * cfg.n_facts; ++attempt) {
    const std::size_t len = std::min<std::size_t>(cfg.hops, cfg.n_facts - n_facts);
    std::vector<IdFact> chain;
    std::size_t s = rng.below(E);
    for (std::size_t h = 0; h < len; ++h) {
      const std::size_t o = other_than(rng, E, s);
      chain.push_back({s, rng.below(R), o});
      s = o;
    }
    bool known = false;
    for (const auto& f : chain) known = known || facts.follow(f.s, f.r).has_value();
    if (known || !facts.fits(chain)) continue;
    for (const auto& f : chain) facts.add(f);
    chains.push_back(chain);
    n_facts += chain.size();
  }

  // The walk must still land on the intended answer, and for two hops no
  // single fact may link the cue to it.
  std::optional<std::size_t> answer = facts.follow(c, r1);
  if (cfg.hops == 2 && answer) answer = facts.follow(*answer, r2);
  if (answer != (cfg.hops == 1 ? x : y)) return std::nullopt;
  if (cfg.hops == 2) {
    for (std::size_t r = 0; r < R; ++r) {
      if (facts.follow(c, r) == answer) return std::nullopt;
    }
  }

  // Chains stay contiguous and are written in full, so a fact shared by two
  // chains appears in both; only the chain order is shuffled.
  rng.shuffle(chains);
  ClozeExample ex;
  for (const auto& chain : chains) {
    for (const auto& f : chain) ex.doc.insert(ex.doc.end(), {entity(f.s), relation(f.r), entity(f.o), "."});
  }
  ex.query = {entity(c), relation(r1)};
  if (cfg.hops == 2) ex.query.push_back(relation(r2));
  ex.query.emplace_back(kClozeToken);

  std::set<std::size_t> seen;
  for (const auto& chain : chains) {
    for (const auto& f : chain) seen.insert({f.s, f.o});
  }
  for (const std::size_t e : seen) {
    ex.candidates.push_back({entity(e)});
    if (e == *answer) ex.answer = ex.candidates.size() - 1;
  }
  if (finalize_example(ex)) return std::nullopt;
  return ex;
}

}  // namespace

std::vector<ClozeExample> synth_generate(const SynthConfig& cfg) {
  if (cfg.hops != 1 && cfg.hops != 2) throw GenerationError("synth: hops must be 1 or 2");
  if (cfg.n_relations == 0 || cfg.n_examples == 0 || cfg.n_facts == 0) {
    throw GenerationError("synth: relation, example and fact counts must be positive");
  }
  if (cfg.n_facts < static_cast<std::size_t>(cfg.hops)) {
    throw GenerationError("synth: a document needs at least " + std::to_string(cfg.hops) + " facts");
  }
  const std::size_t needed = cfg.hops == 1 ? 2 : 3;
  if (cfg.n_entities < needed) {
    throw GenerationError("synth: " + std::to_string(cfg.hops) + "-hop questions need at least " +
                          std::to_string(needed) + " entities");
  }
  Rng rng(mix_seed(cfg.seed, 0x5e7a11));
  std::vector<ClozeExample> out;
  const std::size_t budget = 1000 + 200 * cfg.n_examples;
  for (std::size_t attempt = 0; out.size() < cfg.n_examples; ++attempt) {
    if (attempt >= budget) throw GenerationError("synth: parameters leave too few valid questions");
    if (auto ex = draw_example(cfg, rng)) out.push_back(std::move(*ex));
  }
  return out;
}

std::vector<Fact> parse_facts(const std::vector<std::string>& doc) {
  std::vector<Fact> facts;
  for (std::size_t i = 0; i + 2 < doc.size(); i += 4) facts.push_back({doc[i], doc[i + 1], doc[i + 2]});
  return facts;
}

CorpusStats corpus_stats(const Dataset& dataset) {
  CorpusStats stats;
  stats.n_train = dataset.train.size();
  stats.n_valid = dataset.valid.size();
  stats.n_test = dataset.test.size();
  std::unordered_set<std::string> vocab;
  for (const auto* split : {&dataset.train, &dataset.valid, &dataset.test}) {
    for (const auto& ex : *split) {
      stats.max_doc_len = std::max(stats.max_doc_len, ex.doc.size());
      for (const auto& t : ex.doc) vocab.insert(t);
      for (const auto& t : ex.query) {
        if (t != kClozeToken) vocab.insert(t);
      }
    }
  }
  stats.vocab = vocab.size();
  return stats;
}

std::string format_stats(const CorpusStats& stats) {
  std::ostringstream out;
  auto row = [&](std::string_view name, std::size_t value) {
    out << std::left << std::setw(16) << name << std::right << std::setw(10) << value << '\n';
  };
  row("# train", stats.n_train);
  row("# validation", stats.n_valid);
  row("# test", stats.n_test);
  row("# vocab", stats.vocab);
  row("max doc length", stats.max_doc_len);
  return out.str();
}

}  // namespace gar
