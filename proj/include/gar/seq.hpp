// GRU cells and bidirectional GRU encoders.
//
// Sequences are stored column-wise: an input of T steps for a batch of B
// sequences is a [n_in x T*B] matrix in time-major order, so step t of
// sequence b lives in column t*B + b. A single sequence is the B = 1 case.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gar/random.hpp"
#include "gar/tensor.hpp"

namespace gar {

struct GruCellParams {
  Tensor W_r, U_r, b_r;
  Tensor W_z, U_z, b_z;
  Tensor W_h, U_h, b_h;

  std::size_t n_in() const { return W_r.cols(); }
  std::size_t n_h() const { return W_r.rows(); }

  // Glorot-uniform matrices, zero biases.
  static GruCellParams init(std::size_t n_in, std::size_t n_h, Rng& rng);
  static GruCellParams zeros(std::size_t n_in, std::size_t n_h);

  // Throws DimensionError unless all nine arrays agree on n_in and n_h.
  void validate() const;
  std::vector<std::pair<std::string, Tensor>> named() const;
};

struct BiGruParams {
  GruCellParams forward;
  GruCellParams backward;

  std::size_t n_in() const { return forward.n_in(); }
  std::size_t n_h() const { return forward.n_h(); }
  std::size_t output_dim() const { return 2 * forward.n_h(); }

  static BiGruParams init(std::size_t n_in, std::size_t n_h, Rng& rng);
  void validate() const;
  std::vector<std::pair<std::string, Tensor>> named() const;
};

// One recurrence step. x_t is [n_in] or [n_in x B]; h_prev matches [n_h (x B)].
Tensor gru_step(const GruCellParams& p, const Tensor& x_t, const Tensor& h_prev);

// Full output of a Bi-GRU over one sequence X [n_in x T]: column i is the
// forward state after x_1..x_i stacked on the backward state after x_T..x_i.
// h0 is the initial state of both directions ([n_h]); undefined means zero.
Tensor bigru_full(const BiGruParams& p, const Tensor& X, const Tensor& h0 = {});

// Column `ell` (1-based) of a full output.
Tensor bigru_column(const Tensor& full, std::size_t ell);

// Batched full output over a time-major [n_in x T*B] input. mask has T*B
// entries in the same order; on masked steps each direction carries its
// previous state unchanged, so padding never leaks into real positions.
Tensor bigru_batch(const BiGruParams& p, const Tensor& X, std::size_t batch,
                   const std::vector<bool>& mask);

// [2n_h x B]: final forward state stacked on final backward state (the state
// after reading the sequence right-to-left down to its first element).
Tensor bigru_final_states(const BiGruParams& p, const Tensor& X, std::size_t batch,
                          const std::vector<bool>& mask);

// Number of recurrence steps executed on this thread.
std::uint64_t gru_step_count();
void reset_gru_step_count();

}  // namespace gar
