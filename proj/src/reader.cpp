#include "gar/reader.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gar/random.hpp"

namespace gar {

namespace {

constexpr double kEmbeddingScale = 0.1;

Tensor random_normal(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = scale * rng.normal();
  return Tensor::matrix(rows, cols, std::move(values), true);
}

Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.uniform(-limit, limit);
  return Tensor::matrix(rows, cols, std::move(values), true);
}

// Column indices of example b in a time-major [. x T*B] matrix.
std::vector<std::size_t> example_columns(std::size_t b, std::size_t steps, std::size_t batch) {
  std::vector<std::size_t> cols(steps);
  for (std::size_t t = 0; t < steps; ++t) cols[t] = t * batch + b;
  return cols;
}

std::vector<bool> example_mask(const std::vector<bool>& mask, std::size_t b, std::size_t steps,
                               std::size_t batch) {
  std::vector<bool> out(steps);
  for (std::size_t t = 0; t < steps; ++t) out[t] = mask[t * batch + b];
  return out;
}

// Word (and optionally character) embeddings for a time-major id sequence.
Tensor embed_sequence(const ReaderParams& p, const std::vector<std::size_t>& ids,
                      const std::vector<std::uint64_t>& oov, const std::vector<std::size_t>& word,
                      const Tensor& char_embeddings) {
  Tensor x = transpose(gather_rows(p.word_table, ids));
  if (std::any_of(oov.begin(), oov.end(), [](std::uint64_t k) { return k != 0; })) {
    const std::size_t dim = p.config.word_dim, n = ids.size();
    std::vector<double> known(n), fill(dim * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      known[j] = oov[j] == 0 ? 1.0 : 0.0;
      if (oov[j] == 0) continue;
      const auto v = oov_vector(oov[j], dim);
      for (std::size_t r = 0; r < dim; ++r) fill[r * n + j] = v[r];
    }
    x = add(scale_columns(x, known), Tensor::matrix(dim, n, std::move(fill)));
  }
  if (p.config.use_char) x = concat(x, select_columns(char_embeddings, word), 0);
  return x;
}

Tensor char_embeddings(const ReaderParams& p, const Batch& batch) {
  const std::size_t W = batch.words.size();
  const Tensor chars = transpose(gather_rows(p.char_table, batch.char_ids));
  const Tensor finals = bigru_final_states(p.char_gru, chars, W, batch.char_mask);
  return add_bias(matmul(p.char_proj, finals), p.char_bias);
}

Tensor unpadded(const Tensor& m, std::size_t rows, std::size_t cols) {
  std::vector<double> values(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) values[r * cols + c] = m.at(r, c);
  }
  return Tensor::matrix(rows, cols, std::move(values));
}

}  // namespace

std::string to_string(GatingKind kind) {
  switch (kind) {
    case GatingKind::multiply: return "multiply";
    case GatingKind::sum: return "sum";
    case GatingKind::concat: return "concat";
  }
  return "multiply";
}

GatingKind parse_gating(std::string_view name) {
  if (name == "multiply" || name == "mul") return GatingKind::multiply;
  if (name == "sum" || name == "add") return GatingKind::sum;
  if (name == "concat" || name == "concatenate") return GatingKind::concat;
  throw ParameterError("unknown gating kind '" + std::string(name) + "'");
}

void ReaderConfig::validate() const {
  if (hops < 1) throw ParameterError("reader: K must be at least 1");
  if (vocab_size < 3) throw ParameterError("reader: vocabulary is empty");
  if (word_dim == 0 || hidden == 0) throw ParameterError("reader: dimensions must be positive");
  if (use_char && (char_dim == 0 || char_hidden == 0 || char_out == 0)) {
    throw ParameterError("reader: character model dimensions must be positive");
  }
  if (use_feature && feature_dim == 0) throw ParameterError("reader: feature_dim must be positive");
  if (!(embed_init_std >= 0.0)) throw ParameterError("reader: embed_init_std must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("reader: dropout must lie in [0, 1)");
}

std::size_t ReaderConfig::layer_input_dim(std::size_t k) const {
  std::size_t dim = k == 1 ? embed_dim()
                           : (use_ga && gating == GatingKind::concat ? 4 * hidden : 2 * hidden);
  if (k == hops && use_feature) dim += feature_dim;
  return dim;
}

ReaderParams ReaderParams::init(const ReaderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ReaderParams p;
  p.config = config;
  p.word_table = random_normal(config.vocab_size, config.word_dim, config.embed_init_std, rng);
  for (std::size_t k = 1; k <= config.hops; ++k) {
    p.doc_gru.push_back(BiGruParams::init(config.layer_input_dim(k), config.hidden, rng));
    p.query_gru.push_back(BiGruParams::init(config.embed_dim(), config.hidden, rng));
  }
  if (config.use_char) {
    p.char_table = random_normal(Vocab::kCharCount, config.char_dim, config.embed_init_std, rng);
    p.char_gru = BiGruParams::init(config.char_dim, config.char_hidden, rng);
    p.char_proj = glorot(config.char_out, 2 * config.char_hidden, rng);
    p.char_bias = Tensor::zeros({config.char_out}, true);
  }
  if (config.use_feature) p.feature_table = random_normal(2, config.feature_dim, config.embed_init_std, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ReaderParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("word_table", word_table);
  for (std::size_t k = 0; k < doc_gru.size(); ++k) {
    for (auto& [name, t] : doc_gru[k].named()) out.emplace_back("doc" + std::to_string(k + 1) + "." + name, t);
    for (auto& [name, t] : query_gru[k].named()) out.emplace_back("query" + std::to_string(k + 1) + "." + name, t);
  }
  if (config.use_char) {
    out.emplace_back("char_table", char_table);
    for (auto& [name, t] : char_gru.named()) out.emplace_back("char." + name, t);
    out.emplace_back("char_proj", char_proj);
    out.emplace_back("char_bias", char_bias);
  }
  if (config.use_feature) out.emplace_back("feature_table", feature_table);
  return out;
}

bool ReaderParams::frozen(const std::string& name) const {
  return config.fix_word_table && name == "word_table";
}

void ReaderParams::validate() const {
  config.validate();
  if (word_table.shape() != Shape{config.vocab_size, config.word_dim}) {
    throw DimensionError("reader: word table " + shape_string(word_table.shape()) + " does not match config");
  }
  if (doc_gru.size() != config.hops || query_gru.size() != config.hops) {
    throw DimensionError("reader: expected " + std::to_string(config.hops) + " layers");
  }
  for (std::size_t k = 1; k <= config.hops; ++k) {
    const auto& d = doc_gru[k - 1];
    const auto& q = query_gru[k - 1];
    d.validate();
    q.validate();
    if (d.n_in() != config.layer_input_dim(k) || d.n_h() != config.hidden) {
      throw DimensionError("reader: document Bi-GRU " + std::to_string(k) + " does not chain");
    }
    if (q.n_in() != config.embed_dim() || q.n_h() != config.hidden) {
      throw DimensionError("reader: query Bi-GRU " + std::to_string(k) + " does not match embeddings");
    }
  }
  if (config.use_char) {
    char_gru.validate();
    if (char_table.shape() != Shape{Vocab::kCharCount, config.char_dim} ||
        char_gru.n_in() != config.char_dim || char_gru.n_h() != config.char_hidden ||
        char_proj.shape() != Shape{config.char_out, 2 * config.char_hidden} ||
        char_bias.shape() != Shape{config.char_out}) {
      throw DimensionError("reader: character model does not match config");
    }
  }
  if (config.use_feature && feature_table.shape() != Shape{2, config.feature_dim}) {
    throw DimensionError("reader: feature table does not match config");
  }
}

std::size_t ReaderParams::load_pretrained(const Vocab& vocab, const EmbeddingTable& table) {
  if (table.dim != config.word_dim) {
    throw DimensionError("pretrained vectors have dimension " + std::to_string(table.dim) +
                         ", word table expects " + std::to_string(config.word_dim));
  }
  std::size_t loaded = 0;
  auto data = word_table.mutable_data();
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto it = table.vectors.find(vocab.token(id));
    if (it == table.vectors.end()) continue;
    std::copy(it->second.begin(), it->second.end(), data.begin() + static_cast<std::ptrdiff_t>(id * config.word_dim));
    ++loaded;
  }
  return loaded;
}

// ---------------------------------------------------------------------------

Tensor gate(const Tensor& D, const Tensor& q_tilde, GatingKind gating) {
  switch (gating) {
    case GatingKind::multiply: return mul(D, q_tilde);
    case GatingKind::sum: return add(D, q_tilde);
    case GatingKind::concat: return concat(D, q_tilde, 0);
  }
  return mul(D, q_tilde);
}

GaOutput ga_module(const Tensor& D, const Tensor& Q, GatingKind gating,
                   const std::vector<bool>& query_mask) {
  if (D.rank() != 2 || Q.rank() != 2 || D.rows() != Q.rows()) {
    throw DimensionError("ga_module: document " + shape_string(D.shape()) + " and query " +
                         shape_string(Q.shape()) + " differ in feature dimension");
  }
  const Tensor alpha = softmax_masked(matmul(transpose(Q), D), query_mask);
  const Tensor q_tilde = matmul(Q, alpha);
  return {gate(D, q_tilde, gating), alpha};
}

BatchOutput forward(const ReaderParams& p, const Batch& batch, const ForwardOptions& options) {
  const ReaderConfig& cfg = p.config;
  const std::size_t B = batch.size, TD = batch.doc_len, TQ = batch.query_len;
  const bool training = options.mode == Mode::train;
  std::uint64_t dropout_site = 0;
  auto drop = [&](const Tensor& t) {
    return dropout(t, cfg.dropout, mix_seed(options.dropout_seed, dropout_site++), training);
  };

  for (std::size_t b = 0; b < B; ++b) {
    if (batch.cloze[b] >= batch.query_lengths[b]) {
      throw IndexError("forward: cloze position missing from query of example " + std::to_string(b));
    }
    const auto& groups = batch.candidate_positions[b];
    if (std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.empty(); })) {
      throw ParameterError("forward: no candidate of example " + std::to_string(b) + " occurs in the document");
    }
  }

  Tensor chars;
  if (cfg.use_char) chars = char_embeddings(p, batch);
  Tensor X = drop(embed_sequence(p, batch.doc_ids, batch.doc_oov, batch.doc_word, chars));
  const Tensor Y = drop(embed_sequence(p, batch.query_ids, batch.query_oov, batch.query_word, chars));

  std::vector<std::vector<std::size_t>> doc_cols(B), query_cols(B);
  std::vector<std::vector<bool>> doc_masks(B), query_masks(B);
  for (std::size_t b = 0; b < B; ++b) {
    doc_cols[b] = example_columns(b, TD, B);
    query_cols[b] = example_columns(b, TQ, B);
    doc_masks[b] = example_mask(batch.doc_mask, b, TD, B);
    query_masks[b] = example_mask(batch.query_mask, b, TQ, B);
  }
  // Regathers per-example blocks (example-major) into time-major order.
  std::vector<std::size_t> to_time_major(TD * B);
  for (std::size_t t = 0; t < TD; ++t) {
    for (std::size_t b = 0; b < B; ++b) to_time_major[t * B + b] = b * TD + t;
  }

  BatchOutput out;
  if (options.trace) out.traces.resize(B);

  Tensor D, Q;
  for (std::size_t k = 1; k <= cfg.hops; ++k) {
    if (k == cfg.hops && cfg.use_feature) {
      X = concat(X, transpose(gather_rows(p.feature_table, batch.doc_feature)), 0);
    }
    if (k > 1) X = drop(X);
    D = bigru_batch(p.doc_gru[k - 1], X, B, batch.doc_mask);
    const bool gated_layer = k < cfg.hops && cfg.use_ga;
    if (k == cfg.hops || gated_layer) Q = bigru_batch(p.query_gru[k - 1], Y, B, batch.query_mask);
    if (k == cfg.hops) break;
    if (!cfg.use_ga) {
      X = D;
      continue;
    }
    std::vector<Tensor> gated(B);
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor Db = select_columns(D, doc_cols[b]);
      const Tensor Qb = select_columns(Q, query_cols[b]);
      if (cfg.token_attention) {
        GaOutput g = ga_module(Db, Qb, cfg.gating, query_masks[b]);
        gated[b] = g.X;
        if (options.trace) {
          out.traces[b].alphas.push_back(unpadded(g.alpha, batch.query_lengths[b], batch.doc_lengths[b]));
        }
      } else {
        const std::vector<std::size_t> cloze(TD, batch.cloze[b]);
        gated[b] = gate(Db, select_columns(Qb, cloze), cfg.gating);
      }
    }
    X = select_columns(concat(gated, 1), to_time_major);
  }

  for (std::size_t b = 0; b < B; ++b) {
    const Tensor Db = select_columns(D, doc_cols[b]);
    const std::size_t cloze_col = batch.cloze[b] * B + b;
    const Tensor q = select_columns(Q, std::span(&cloze_col, 1));
    const Tensor scores = reshape(matmul(transpose(Db), q), {TD});
    const Tensor s = softmax_masked(scores, doc_masks[b]);
    const Tensor probs = normalize(segment_sum(s, batch.candidate_positions[b]));
    out.probabilities.push_back(probs);
    if (options.trace) {
      const std::size_t len = batch.doc_lengths[b];
      out.traces[b].s = Tensor::vector(std::vector<double>(s.data().begin(), s.data().begin() + static_cast<std::ptrdiff_t>(len)));
      out.traces[b].probabilities.assign(probs.data().begin(), probs.data().end());
    }
  }
  return out;
}

ExampleOutput forward(const ReaderParams& params, const Vocab& vocab, const ClozeExample& example,
                      const ForwardOptions& options) {
  const Batch batch = make_batch({&example}, vocab);
  ForwardOptions opts = options;
  opts.trace = true;
  BatchOutput out = forward(params, batch, opts);
  return {out.probabilities.front(), std::move(out.traces.front())};
}

Tensor embed_token(const ReaderParams& params, const Vocab& vocab, std::string_view token) {
  if (token.empty()) throw ParameterError("embed_token: token has no characters");
  ClozeExample ex;
  ex.doc = {std::string(token)};
  ex.query = {std::string(kClozeToken)};
  ex.candidates = {{std::string(token)}};
  const Batch batch = make_batch({&ex}, vocab);
  Tensor chars;
  if (params.config.use_char) chars = char_embeddings(params, batch);
  const Tensor x = embed_sequence(params, batch.doc_ids, batch.doc_oov, batch.doc_word, chars);
  return reshape(x, {x.rows()});
}

std::vector<double> oov_vector(std::uint64_t key, std::size_t dim) {
  Rng rng(key);
  std::vector<double> v(dim);
  for (double& x : v) x = kEmbeddingScale * rng.normal();
  return v;
}

std::size_t predict(std::span<const double> probabilities) {
  if (probabilities.empty()) throw ParameterError("predict: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probabilities.size(); ++i) {
    if (probabilities[i] > probabilities[best]) best = i;
  }
  return best;
}

}  // namespace gar
