// Cloze examples, file formats, vocabulary, synthetic corpora and batching.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gar {

inline constexpr std::string_view kClozeToken = "@cloze";

// A document d, a query q with one placeholder, candidates C and answer a.
struct ClozeExample {
  std::vector<std::string> doc;
  std::vector<std::string> query;
  std::size_t cloze = 0;  // 0-based index of the placeholder in `query`
  std::vector<std::vector<std::string>> candidates;
  std::size_t answer = 0;  // index into `candidates`
  // positions[c]: ascending 0-based document positions holding any token of
  // candidate c.
  std::vector<std::vector<std::size_t>> positions;
};

bool operator==(const ClozeExample& a, const ClozeExample& b);

// Lowercased whitespace tokens.
std::vector<std::string> tokenize(std::string_view text);

std::vector<std::vector<std::size_t>> candidate_positions(
    const std::vector<std::string>& doc, const std::vector<std::vector<std::string>>& candidates);

// Recomputes `cloze` and `positions` from the tokens. Returns the reason the
// example violates an invariant, or nullopt when it is well formed.
std::optional<std::string> finalize_example(ClozeExample& example);

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Rejection {
  std::size_t record = 0;  // 0-based record index in the file
  std::size_t line = 0;    // 1-based first line of the record
  std::string reason;
};

struct LoadResult {
  std::vector<ClozeExample> examples;
  std::vector<Rejection> rejected;
};

// Native format, one record per example followed by a blank line:
//   document tokens
//   query tokens containing @cloze
//   answer tokens
//   candidate | candidate | ...
// max_doc_len == 0 disables truncation.
LoadResult parse_examples(std::istream& in, std::size_t max_doc_len = 0);
LoadResult load_examples(const std::filesystem::path& path, std::size_t max_doc_len = 0);
void write_examples(std::ostream& out, const std::vector<ClozeExample>& examples);
void write_examples(const std::filesystem::path& path, const std::vector<ClozeExample>& examples);

struct EmbeddingTable {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;
  std::vector<std::string> warnings;
};

// `<token> <v1> ... <vdim>` per line; duplicate tokens keep the last vector.
EmbeddingTable parse_embeddings(std::istream& in, std::size_t dim);
EmbeddingTable load_embeddings(const std::filesystem::path& path, std::size_t dim);

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kOov = 1;
  static constexpr std::size_t kCloze = 2;
  static constexpr std::size_t kCharPad = 0;
  // Characters are UTF-8 bytes shifted past the padding id.
  static constexpr std::size_t kCharCount = 257;

  Vocab();
  static Vocab build(const std::vector<ClozeExample>& examples);
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static std::size_t char_id(unsigned char c) { return static_cast<std::size_t>(c) + 1; }

 private:
  std::size_t add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// f_i = [0,1] when document token i occurs in the query, else [1,0].
std::vector<std::array<int, 2>> qe_comm(const std::vector<std::string>& doc,
                                        const std::vector<std::string>& query);

// Padded, time-major batch: slot t*size + b holds position t of example b.
struct Batch {
  std::size_t size = 0;
  std::size_t doc_len = 0;
  std::size_t query_len = 0;

  std::vector<std::size_t> doc_ids;
  std::vector<bool> doc_mask;
  std::vector<std::uint64_t> doc_oov;  // nonzero key for out-of-vocabulary tokens
  std::vector<std::size_t> doc_feature;  // qe-comm row: 1 when the token is in the query
  std::vector<std::size_t> doc_word;   // index into `words`

  std::vector<std::size_t> query_ids;
  std::vector<bool> query_mask;
  std::vector<std::uint64_t> query_oov;
  std::vector<std::size_t> query_word;

  std::vector<std::size_t> doc_lengths;
  std::vector<std::size_t> query_lengths;
  std::vector<std::size_t> cloze;
  std::vector<std::size_t> answers;
  // Per example, per candidate: positions within the example's padded row.
  std::vector<std::vector<std::vector<std::size_t>>> candidate_positions;

  // Distinct tokens of the batch and their characters, time-major
  // [char_len x words.size()].
  std::vector<std::string> words;
  std::size_t char_len = 0;
  std::vector<std::size_t> char_ids;
  std::vector<bool> char_mask;
};

Batch make_batch(const std::vector<const ClozeExample*>& examples, const Vocab& vocab);
std::vector<Batch> batchify(const std::vector<ClozeExample>& examples, std::size_t batch_size,
                            const Vocab& vocab);

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_entities = 12;
  std::size_t n_relations = 3;
  std::size_t n_examples = 100;
  int hops = 1;
  std::size_t n_facts = 6;  // facts per document
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A knowledge-graph fact "subject relation object".
struct Fact {
  std::string subject, relation, object;
};

// Documents are sequences of facts "s r o ."; the query "cue r_1 [r_2] @cloze"
// asks for the entity reached from the cue by following the relations.
std::vector<ClozeExample> synth_generate(const SynthConfig& config);
// Parses the fact sentences of a synthetic document.
std::vector<Fact> parse_facts(const std::vector<std::string>& doc);

struct Dataset {
  std::vector<ClozeExample> train, valid, test;
};

struct CorpusStats {
  std::size_t n_train = 0, n_valid = 0, n_test = 0;
  std::size_t vocab = 0;
  std::size_t max_doc_len = 0;
};

CorpusStats corpus_stats(const Dataset& dataset);
std::string format_stats(const CorpusStats& stats);

}  // namespace gar
