#include "gar/seq.hpp"

#include <cmath>
#include <numeric>

namespace gar {

namespace {

thread_local std::uint64_t t_step_count = 0;

Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.uniform(-limit, limit);
  return Tensor::matrix(rows, cols, std::move(values), true);
}

struct Projection {
  Tensor r, z, h;
};

Projection project(const GruCellParams& p, const Tensor& x) {
  return {add_bias(matmul(p.W_r, x), p.b_r), add_bias(matmul(p.W_z, x), p.b_z),
          add_bias(matmul(p.W_h, x), p.b_h)};
}

// The recurrence proper, given the input projections W x + b of one step.
// A zero entry in `carry_mask` freezes that column's state.
Tensor gru_update(const GruCellParams& p, const Projection& in, const Tensor& h_prev,
                  std::span<const double> carry_mask) {
  ++t_step_count;
  const Tensor r = sigmoid(add(in.r, matmul(p.U_r, h_prev)));
  Tensor z = sigmoid(add(in.z, matmul(p.U_z, h_prev)));
  if (!carry_mask.empty()) z = scale_columns(z, carry_mask);
  const Tensor candidate = tanh(add(in.h, matmul(p.U_h, mul(r, h_prev))));
  return add(mul(affine(z, -1.0, 1.0), h_prev), mul(z, candidate));
}

std::vector<Tensor> run_direction(const GruCellParams& p, const Tensor& X, std::size_t batch,
                                  const std::vector<bool>& mask, const Tensor& h0, bool reverse) {
  const std::size_t steps = X.cols() / batch;
  const Projection all = project(p, X);
  std::vector<Tensor> states(steps);
  Tensor h = h0;
  std::vector<std::size_t> columns(batch);
  std::vector<double> carry(batch);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = reverse ? steps - 1 - i : i;
    std::iota(columns.begin(), columns.end(), t * batch);
    bool all_real = true;
    for (std::size_t b = 0; b < batch; ++b) {
      carry[b] = mask[t * batch + b] ? 1.0 : 0.0;
      all_real = all_real && mask[t * batch + b];
    }
    const Projection step{select_columns(all.r, columns), select_columns(all.z, columns),
                          select_columns(all.h, columns)};
    h = gru_update(p, step, h, all_real ? std::span<const double>{} : std::span<const double>(carry));
    states[t] = h;
  }
  return states;
}

void check_sequence(const BiGruParams& p, const Tensor& X, std::size_t batch,
                    const std::vector<bool>& mask) {
  p.validate();
  if (X.rank() != 2 || X.rows() != p.n_in()) {
    throw DimensionError("bigru: input " + shape_string(X.shape()) + " does not match n_in " +
                         std::to_string(p.n_in()));
  }
  if (batch == 0 || X.cols() % batch != 0) {
    throw DimensionError("bigru: " + std::to_string(X.cols()) + " columns do not split into batch " +
                         std::to_string(batch));
  }
  if (mask.size() != X.cols()) throw DimensionError("bigru: mask length does not match input columns");
}

}  // namespace

GruCellParams GruCellParams::init(std::size_t n_in, std::size_t n_h, Rng& rng) {
  GruCellParams p;
  p.W_r = glorot(n_h, n_in, rng);
  p.U_r = glorot(n_h, n_h, rng);
  p.b_r = Tensor::zeros({n_h}, true);
  p.W_z = glorot(n_h, n_in, rng);
  p.U_z = glorot(n_h, n_h, rng);
  p.b_z = Tensor::zeros({n_h}, true);
  p.W_h = glorot(n_h, n_in, rng);
  p.U_h = glorot(n_h, n_h, rng);
  p.b_h = Tensor::zeros({n_h}, true);
  return p;
}

GruCellParams GruCellParams::zeros(std::size_t n_in, std::size_t n_h) {
  GruCellParams p;
  for (Tensor* w : {&p.W_r, &p.W_z, &p.W_h}) *w = Tensor::zeros({n_h, n_in}, true);
  for (Tensor* u : {&p.U_r, &p.U_z, &p.U_h}) *u = Tensor::zeros({n_h, n_h}, true);
  for (Tensor* b : {&p.b_r, &p.b_z, &p.b_h}) *b = Tensor::zeros({n_h}, true);
  return p;
}

void GruCellParams::validate() const {
  for (const Tensor* t : {&W_r, &U_r, &b_r, &W_z, &U_z, &b_z, &W_h, &U_h, &b_h}) {
    if (!t->defined()) throw DimensionError("GRU cell: missing parameter array");
  }
  const std::size_t in = n_in(), h = n_h();
  for (const Tensor* w : {&W_r, &W_z, &W_h}) {
    if (w->shape() != Shape{h, in}) throw DimensionError("GRU cell: inconsistent W " + shape_string(w->shape()));
  }
  for (const Tensor* u : {&U_r, &U_z, &U_h}) {
    if (u->shape() != Shape{h, h}) throw DimensionError("GRU cell: inconsistent U " + shape_string(u->shape()));
  }
  for (const Tensor* b : {&b_r, &b_z, &b_h}) {
    if (b->shape() != Shape{h}) throw DimensionError("GRU cell: inconsistent b " + shape_string(b->shape()));
  }
}

std::vector<std::pair<std::string, Tensor>> GruCellParams::named() const {
  return {{"W_r", W_r}, {"U_r", U_r}, {"b_r", b_r}, {"W_z", W_z}, {"U_z", U_z},
          {"b_z", b_z}, {"W_h", W_h}, {"U_h", U_h}, {"b_h", b_h}};
}

BiGruParams BiGruParams::init(std::size_t n_in, std::size_t n_h, Rng& rng) {
  BiGruParams p;
  p.forward = GruCellParams::init(n_in, n_h, rng);
  p.backward = GruCellParams::init(n_in, n_h, rng);
  return p;
}

void BiGruParams::validate() const {
  forward.validate();
  backward.validate();
  if (forward.n_in() != backward.n_in() || forward.n_h() != backward.n_h()) {
    throw DimensionError("Bi-GRU: forward and backward cells disagree on dimensions");
  }
}

std::vector<std::pair<std::string, Tensor>> BiGruParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : forward.named()) out.emplace_back("fwd." + name, t);
  for (auto& [name, t] : backward.named()) out.emplace_back("bwd." + name, t);
  return out;
}

Tensor gru_step(const GruCellParams& p, const Tensor& x_t, const Tensor& h_prev) {
  p.validate();
  if (x_t.rows() != p.n_in() || h_prev.rows() != p.n_h() || x_t.rank() != h_prev.rank() ||
      x_t.cols() != h_prev.cols()) {
    throw DimensionError("gru_step: input " + shape_string(x_t.shape()) + " and state " +
                         shape_string(h_prev.shape()) + " do not fit cell [n_in=" +
                         std::to_string(p.n_in()) + ", n_h=" + std::to_string(p.n_h()) + "]");
  }
  return gru_update(p, project(p, x_t), h_prev, {});
}

Tensor bigru_full(const BiGruParams& p, const Tensor& X, const Tensor& h0) {
  if (X.rank() != 2) throw DimensionError("bigru_full: input must be [n_in x T]");
  const std::vector<bool> mask(X.cols(), true);
  check_sequence(p, X, 1, mask);
  Tensor start = h0.defined() ? reshape(h0, {p.n_h(), 1}) : Tensor::zeros({p.n_h(), 1});
  if (start.rows() != p.n_h()) throw DimensionError("bigru_full: h0 does not match n_h");
  const auto fwd = run_direction(p.forward, X, 1, mask, start, false);
  const auto bwd = run_direction(p.backward, X, 1, mask, start, true);
  return concat(concat(fwd, 1), concat(bwd, 1), 0);
}

Tensor bigru_column(const Tensor& full, std::size_t ell) {
  if (full.rank() != 2) throw DimensionError("bigru_column: expected a full-output matrix");
  if (ell < 1 || ell > full.cols()) {
    throw IndexError("bigru_column: position " + std::to_string(ell) + " outside 1.." +
                     std::to_string(full.cols()));
  }
  const std::size_t column = ell - 1;
  return reshape(select_columns(full, std::span(&column, 1)), {full.rows()});
}

Tensor bigru_batch(const BiGruParams& p, const Tensor& X, std::size_t batch,
                   const std::vector<bool>& mask) {
  check_sequence(p, X, batch, mask);
  const Tensor h0 = Tensor::zeros({p.n_h(), batch});
  const auto fwd = run_direction(p.forward, X, batch, mask, h0, false);
  const auto bwd = run_direction(p.backward, X, batch, mask, h0, true);
  return concat(concat(fwd, 1), concat(bwd, 1), 0);
}

Tensor bigru_final_states(const BiGruParams& p, const Tensor& X, std::size_t batch,
                          const std::vector<bool>& mask) {
  check_sequence(p, X, batch, mask);
  const Tensor h0 = Tensor::zeros({p.n_h(), batch});
  const auto fwd = run_direction(p.forward, X, batch, mask, h0, false);
  const auto bwd = run_direction(p.backward, X, batch, mask, h0, true);
  return concat(fwd.back(), bwd.front(), 0);
}

std::uint64_t gru_step_count() { return t_step_count; }
void reset_gru_step_count() { t_step_count = 0; }

}  // namespace gar
