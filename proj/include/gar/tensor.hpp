// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every op in this header is a free function that computes its result
// eagerly. When a Tape is active on the calling thread (see TapeScope) and at
// least one input requires a gradient, the op also records its backward rule.
// Shapes are rank 1 ([n]) or rank 2 ([rows x cols]); a rank-1 tensor behaves
// as a column wherever a matrix is expected.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gar {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : 1; }

  std::span<const double> data() const { return node_->data; }
  // Parameter updates only; forward results are treated as immutable.
  std::span<double> mutable_data() { return node_->data; }

  double item() const;
  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled when no gradient has reached this tensor.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Ordered record of executed differentiable ops.
class Tape {
 public:
  void record(TensorNode* output, std::function<void()> backward_rule);

  // Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  std::size_t visited() const { return visited_; }
  void clear();

 private:
  struct Entry {
    TensorNode* output;
    std::function<void()> backward_rule;
  };
  std::vector<Entry> entries_;
  std::size_t visited_ = 0;
};

// Makes `tape` the active recording target for this thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

enum class ElementwiseOp { add, sub, mul };
enum class ActivationKind { sigmoid, tanh };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// a + b broadcast along columns; b has a.rows() entries.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// scale * a + shift, elementwise.
Tensor affine(const Tensor& a, double scale, double shift);
// Multiplies column j of a by the constant weights[j].
Tensor scale_columns(const Tensor& a, std::span<const double> weights);

Tensor activation(ActivationKind kind, const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);

// Rank 1: softmax over the vector. Rank 2: independent softmax per column,
// with mask indexing rows. Masked entries are exactly zero.
Tensor softmax_masked(const Tensor& v, const std::vector<bool>& mask);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor select_columns(const Tensor& a, std::span<const std::size_t> columns);
// Inverse layout of select_columns: a zero [rows x n_columns] matrix with
// column columns[j] set to a's column j. Targets must be distinct.
Tensor place_columns(const Tensor& a, std::span<const std::size_t> columns,
                     std::size_t n_columns);

Tensor dropout(const Tensor& a, double rate, std::uint64_t rng_state, bool training);

Tensor sum(const Tensor& a);
// Rank-1 output with out[g] = sum of v over groups[g].
Tensor segment_sum(const Tensor& v, const std::vector<std::vector<std::size_t>>& groups);
// v / sum(v) for a rank-1 tensor with positive sum.
Tensor normalize(const Tensor& v);

}  // namespace gar
