// The Gated-Attention Reader: token embeddings, a K-layer stack of document
// and query Bi-GRUs joined by gated attention, and pointer-sum answer
// selection over candidates.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gar/corpus.hpp"
#include "gar/seq.hpp"
#include "gar/tensor.hpp"

namespace gar {

enum class GatingKind { multiply, sum, concat };

std::string to_string(GatingKind kind);
GatingKind parse_gating(std::string_view name);

struct ReaderConfig {
  std::size_t hops = 3;  // K
  std::size_t vocab_size = 0;
  std::size_t word_dim = 100;
  // Standard deviation of randomly initialized word and character vectors.
  double embed_init_std = 0.1;
  std::size_t hidden = 128;  // n_h of every document and query Bi-GRU
  bool use_char = false;
  std::size_t char_dim = 25;
  std::size_t char_hidden = 50;
  std::size_t char_out = 50;
  bool use_feature = false;
  std::size_t feature_dim = 2;
  bool use_ga = true;
  // When false, every document token is gated by the query column at the
  // cloze position instead of its own attention-weighted query vector.
  bool token_attention = true;
  GatingKind gating = GatingKind::multiply;
  double dropout = 0.0;
  bool fix_word_table = false;

  void validate() const;
  std::size_t embed_dim() const { return word_dim + (use_char ? char_out : 0); }
  // Input width of the document Bi-GRU at layer k (1-based).
  std::size_t layer_input_dim(std::size_t k) const;
  bool operator==(const ReaderConfig&) const = default;
};

struct ReaderParams {
  ReaderConfig config;
  std::vector<BiGruParams> doc_gru;    // layers 1..K
  std::vector<BiGruParams> query_gru;  // layers 1..K
  Tensor word_table;                   // [|V| x word_dim]
  Tensor char_table;                   // [chars x char_dim]
  BiGruParams char_gru;
  Tensor char_proj;                    // [char_out x 2*char_hidden]
  Tensor char_bias;                    // [char_out]
  Tensor feature_table;                // [2 x feature_dim]

  static ReaderParams init(const ReaderConfig& config, std::uint64_t seed);

  // Every parameter array under a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  bool frozen(const std::string& name) const;
  void validate() const;

  // Copies vectors for vocabulary tokens found in `table`; returns the count.
  std::size_t load_pretrained(const Vocab& vocab, const EmbeddingTable& table);
};

struct GaOutput {
  Tensor X;      // gated document representation
  Tensor alpha;  // [|Q| x |D|]; column i is the query attention of token i
};

// Combines each document column with its query vector.
Tensor gate(const Tensor& D, const Tensor& q_tilde, GatingKind gating);

// alpha_i = softmax(Q^T d_i) over unmasked query tokens, q~_i = Q alpha_i,
// x_i = gate(d_i, q~_i).
GaOutput ga_module(const Tensor& D, const Tensor& Q, GatingKind gating,
                   const std::vector<bool>& query_mask);

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::uint64_t dropout_seed = 0;
  bool trace = false;
};

struct AttentionTrace {
  std::vector<Tensor> alphas;  // layers 1..K-1, each [|Q| x |D|] (unpadded)
  Tensor s;                    // [|D|]
  std::vector<double> probabilities;
};

struct BatchOutput {
  std::vector<Tensor> probabilities;  // per example, over its candidates
  std::vector<AttentionTrace> traces;
};

BatchOutput forward(const ReaderParams& params, const Batch& batch, const ForwardOptions& options = {});

struct ExampleOutput {
  Tensor probabilities;
  AttentionTrace trace;
};

ExampleOutput forward(const ReaderParams& params, const Vocab& vocab, const ClozeExample& example,
                      const ForwardOptions& options = {});

// x = L(w) || C(w) (or L(w) alone without the character model).
Tensor embed_token(const ReaderParams& params, const Vocab& vocab, std::string_view token);

// Deterministic stand-in vector for a token missing from the vocabulary.
std::vector<double> oov_vector(std::uint64_t key, std::size_t dim);

// argmax with ties going to the lowest index.
std::size_t predict(std::span<const double> probabilities);

}  // namespace gar
