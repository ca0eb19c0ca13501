#include "gar/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gar {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

thread_local Tape* t_active_tape = nullptr;

using NodePtr = std::shared_ptr<TensorNode>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (t_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

bool tracking(const std::vector<Tensor>& inputs) {
  if (t_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Returns the gradient buffer of `node` if it participates in differentiation.
double* grad_target(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty() || shape.size() > 2) {
    throw DimensionError("tensor rank must be 1 or 2, got " + shape_string(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (product(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(product(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------

void Tape::record(TensorNode* output, std::function<void()> backward_rule) {
  entries_.push_back({output, std::move(backward_rule)});
}

void Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any differentiable tensor");
  }
  TensorNode* root = loss.node();
  root->ensure_grad();
  root->grad[0] += 1.0;
  visited_ = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    ++visited_;
    if (it->output->grad.empty()) continue;
    it->backward_rule();
  }
}

void Tape::clear() {
  entries_.clear();
  visited_ = 0;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  Shape shape = b.rank() == 1 ? Shape{m} : Shape{m, n};
  const bool rg = tracking({&a, &b});
  Tensor c(std::move(shape), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), bn = b.node_ptr(), cn = c.node_ptr(), m, k, n] {
      ConstMap dc(cn->grad.data(), m, n);
      if (double* ga = grad_target(an)) {
        MutMap(ga, m, k).noalias() += dc * ConstMap(bn->data.data(), k, n).transpose();
      }
      if (double* gb = grad_target(bn)) {
        MutMap(gb, k, n).noalias() += ConstMap(an->data.data(), m, k).transpose() * dc;
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
  const bool rg = tracking({&a});
  Tensor c({n, m}, std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), m, n] {
      if (double* ga = grad_target(an)) {
        MutMap(ga, m, n) += ConstMap(cn->grad.data(), n, m).transpose();
      }
    });
  }
  return c;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (product(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  const bool rg = tracking({&a});
  Tensor c(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr()] {
      if (double* ga = grad_target(an)) {
        for (std::size_t i = 0; i < cn->grad.size(); ++i) ga[i] += cn->grad[i];
      }
    });
  }
  return c;
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_defined(a, "elementwise");
  require_defined(b, "elementwise");
  require_same_shape(a, b, "elementwise");
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const double* x = a.data().data();
  const double* y = b.data().data();
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      break;
    case ElementwiseOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      break;
  }
  const bool rg = tracking({&a, &b});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [op, an = a.node_ptr(), bn = b.node_ptr(), cn = c.node_ptr(), n] {
      const double* g = cn->grad.data();
      double* ga = grad_target(an);
      double* gb = grad_target(bn);
      switch (op) {
        case ElementwiseOp::add:
          if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          break;
        case ElementwiseOp::sub:
          if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          break;
        case ElementwiseOp::mul:
          if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->data[i];
          if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * an->data[i];
          break;
      }
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_defined(a, "add_bias");
  require_defined(bias, "add_bias");
  if (bias.rank() != 1 || bias.size() != a.rows()) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not fit " +
                         shape_string(a.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < m; ++r) {
    const double v = bias.at(r);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += v;
  }
  const bool rg = tracking({&a, &bias});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), bn = bias.node_ptr(), cn = c.node_ptr(), m, n] {
      const double* g = cn->grad.data();
      if (double* ga = grad_target(an)) {
        for (std::size_t i = 0; i < m * n; ++i) ga[i] += g[i];
      }
      if (double* gb = grad_target(bn)) {
        for (std::size_t r = 0; r < m; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < n; ++c) acc += g[r * n + c];
          gb[r] += acc;
        }
      }
    });
  }
  return c;
}

Tensor affine(const Tensor& a, double scale, double shift) {
  require_defined(a, "affine");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * a.at(i) + shift;
  const bool rg = tracking({&a});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), scale] {
      if (double* ga = grad_target(an)) {
        for (std::size_t i = 0; i < cn->grad.size(); ++i) ga[i] += scale * cn->grad[i];
      }
    });
  }
  return c;
}

Tensor scale_columns(const Tensor& a, std::span<const double> weights) {
  require_defined(a, "scale_columns");
  const std::size_t m = a.rows(), n = a.cols();
  if (weights.size() != n) {
    throw DimensionError("scale_columns: " + std::to_string(weights.size()) +
                         " weights for " + shape_string(a.shape()));
  }
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.at(r * n + c) * w[c];
  }
  const bool rg = tracking({&a});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), w = std::move(w), m, n] {
      if (double* ga = grad_target(an)) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += cn->grad[r * n + c] * w[c];
        }
      }
    });
  }
  return c;
}

Tensor activation(ActivationKind kind, const Tensor& a) {
  require_defined(a, "activation");
  std::vector<double> out(a.size());
  const double* x = a.data().data();
  if (kind == ActivationKind::sigmoid) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (x[i] >= 0.0) {
        out[i] = 1.0 / (1.0 + std::exp(-x[i]));
      } else {
        const double e = std::exp(x[i]);
        out[i] = e / (1.0 + e);
      }
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  }
  const bool rg = tracking({&a});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [kind, an = a.node_ptr(), cn = c.node_ptr()] {
      double* ga = grad_target(an);
      if (!ga) return;
      const auto& y = cn->data;
      const auto& g = cn->grad;
      if (kind == ActivationKind::sigmoid) {
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      } else {
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      }
    });
  }
  return c;
}

Tensor sigmoid(const Tensor& a) { return activation(ActivationKind::sigmoid, a); }
Tensor tanh(const Tensor& a) { return activation(ActivationKind::tanh, a); }

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.at(i) > 0.0)) throw ParameterError("log: non-positive input " + std::to_string(a.at(i)));
    out[i] = std::log(a.at(i));
  }
  const bool rg = tracking({&a});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr()] {
      if (double* ga = grad_target(an)) {
        for (std::size_t i = 0; i < cn->grad.size(); ++i) ga[i] += cn->grad[i] / an->data[i];
      }
    });
  }
  return c;
}

Tensor softmax_masked(const Tensor& v, const std::vector<bool>& mask) {
  require_defined(v, "softmax_masked");
  const std::size_t m = v.rows(), n = v.cols();
  if (mask.size() != m) {
    throw DimensionError("softmax_masked: mask of length " + std::to_string(mask.size()) +
                         " for " + shape_string(v.shape()));
  }
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw ParameterError("softmax_masked: every position is masked");
  }
  std::vector<double> out(m * n, 0.0);
  const double* x = v.data().data();
  for (std::size_t c = 0; c < n; ++c) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < m; ++r) {
      if (mask[r]) peak = std::max(peak, x[r * n + c]);
    }
    double total = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      if (!mask[r]) continue;
      const double e = std::exp(x[r * n + c] - peak);
      out[r * n + c] = e;
      total += e;
    }
    for (std::size_t r = 0; r < m; ++r) out[r * n + c] /= total;
  }
  const bool rg = tracking({&v});
  Tensor y(v.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(y.node(), [vn = v.node_ptr(), yn = y.node_ptr(), m, n] {
      double* gv = grad_target(vn);
      if (!gv) return;
      const auto& p = yn->data;
      const auto& g = yn->grad;
      for (std::size_t c = 0; c < n; ++c) {
        double dot = 0.0;
        for (std::size_t r = 0; r < m; ++r) dot += p[r * n + c] * g[r * n + c];
        for (std::size_t r = 0; r < m; ++r) gv[r * n + c] += p[r * n + c] * (g[r * n + c] - dot);
      }
    });
  }
  return y;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) { return concat(std::vector<Tensor>{a, b}, axis); }

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const std::size_t rank = parts.front().rank();
  if (axis >= rank) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range");
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    if (ok && rank == 2) ok = axis == 0 ? p.cols() == parts.front().cols() : p.rows() == parts.front().rows();
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_string(parts.front().shape()) +
                           " and " + shape_string(p.shape()) + " along axis " + std::to_string(axis));
    }
  }
  // Axis 0 (and any rank-1 concat) is a plain append in row-major order.
  const bool append = axis == 0;
  Shape shape = parts.front().shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.shape()[axis];
  const std::size_t rows = shape[0];
  const std::size_t cols = rank == 2 ? shape[1] : 1;
  std::vector<double> out(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    if (append) {
      std::copy(p.data().begin(), p.data().end(), out.begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += p.rows();
    } else {
      const std::size_t pc = p.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                    out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
      }
      offset += pc;
    }
  }
  const bool rg = tracking(parts);
  Tensor c(std::move(shape), std::move(out), rg);
  if (rg) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    t_active_tape->record(c.node(), [nodes = std::move(nodes), offsets = std::move(offsets),
                                     cn = c.node_ptr(), append, rows, cols] {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        double* gp = grad_target(nodes[k]);
        if (!gp) continue;
        const auto& ps = nodes[k]->shape;
        if (append) {
          const std::size_t base = offsets[k] * cols;
          for (std::size_t i = 0; i < nodes[k]->data.size(); ++i) gp[i] += cn->grad[base + i];
        } else {
          const std::size_t pc = ps[1];
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < pc; ++j) gp[r * pc + j] += cn->grad[r * cols + offsets[k] + j];
          }
        }
      }
    });
  }
  return c;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be a matrix");
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<std::size_t> index(ids.begin(), ids.end());
  std::vector<double> out(index.size() * d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v) {
      throw IndexError("gather_rows: id " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(index[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const bool rg = tracking({&table});
  Tensor c({index.size(), d}, std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [tn = table.node_ptr(), cn = c.node_ptr(), index = std::move(index), d] {
      if (double* gt = grad_target(tn)) {
        for (std::size_t i = 0; i < index.size(); ++i) {
          for (std::size_t j = 0; j < d; ++j) gt[index[i] * d + j] += cn->grad[i * d + j];
        }
      }
    });
  }
  return c;
}

Tensor select_columns(const Tensor& a, std::span<const std::size_t> columns) {
  require_defined(a, "select_columns");
  if (columns.empty()) throw DimensionError("select_columns: no columns");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<std::size_t> index(columns.begin(), columns.end());
  const std::size_t k = index.size();
  for (std::size_t c : index) {
    if (c >= n) {
      throw IndexError("select_columns: column " + std::to_string(c) + " out of range for " +
                       shape_string(a.shape()));
    }
  }
  std::vector<double> out(m * k);
  const double* x = a.data().data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * n + index[j]];
  }
  const bool rg = tracking({&a});
  Tensor c({m, k}, std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), index = std::move(index), m, n, k] {
      if (double* ga = grad_target(an)) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t j = 0; j < k; ++j) ga[r * n + index[j]] += cn->grad[r * k + j];
        }
      }
    });
  }
  return c;
}

Tensor place_columns(const Tensor& a, std::span<const std::size_t> columns, std::size_t n_columns) {
  require_defined(a, "place_columns");
  const std::size_t m = a.rows(), k = a.cols();
  if (columns.size() != k) {
    throw DimensionError("place_columns: " + std::to_string(columns.size()) + " targets for " +
                         shape_string(a.shape()));
  }
  std::vector<std::size_t> index(columns.begin(), columns.end());
  std::vector<bool> used(n_columns, false);
  for (std::size_t c : index) {
    if (c >= n_columns) throw IndexError("place_columns: target column " + std::to_string(c) + " out of range");
    if (used[c]) throw IndexError("place_columns: duplicate target column " + std::to_string(c));
    used[c] = true;
  }
  std::vector<double> out(m * n_columns, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * n_columns + index[j]] = a.at(r * k + j);
  }
  const bool rg = tracking({&a});
  Tensor c({m, n_columns}, std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), index = std::move(index), m, k, n_columns] {
      if (double* ga = grad_target(an)) {
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t j = 0; j < k; ++j) ga[r * k + j] += cn->grad[r * n_columns + index[j]];
        }
      }
    });
  }
  return c;
}

namespace {

// splitmix64; the mask stream depends only on the seed.
std::uint64_t splitmix_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Tensor dropout(const Tensor& a, double rate, std::uint64_t rng_state, bool training) {
  require_defined(a, "dropout");
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> scale(a.size());
  std::uint64_t state = rng_state;
  for (double& s : scale) {
    const double u = static_cast<double>(splitmix_next(state) >> 11) * 0x1.0p-53;
    s = u < rate ? 0.0 : keep_scale;
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * scale[i];
  const bool rg = tracking({&a});
  Tensor c(a.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr(), scale = std::move(scale)] {
      if (double* ga = grad_target(an)) {
        for (std::size_t i = 0; i < scale.size(); ++i) ga[i] += cn->grad[i] * scale[i];
      }
    });
  }
  return c;
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double x : a.data()) total += x;
  const bool rg = tracking({&a});
  Tensor c({1}, {total}, rg);
  if (rg) {
    t_active_tape->record(c.node(), [an = a.node_ptr(), cn = c.node_ptr()] {
      if (double* ga = grad_target(an)) {
        const double g = cn->grad[0];
        for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g;
      }
    });
  }
  return c;
}

Tensor segment_sum(const Tensor& v, const std::vector<std::vector<std::size_t>>& groups) {
  require_defined(v, "segment_sum");
  if (groups.empty()) throw DimensionError("segment_sum: no groups");
  std::vector<double> out(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t i : groups[g]) {
      if (i >= v.size()) {
        throw IndexError("segment_sum: position " + std::to_string(i) + " out of range for " +
                         shape_string(v.shape()));
      }
      out[g] += v.at(i);
    }
  }
  const bool rg = tracking({&v});
  Tensor c({groups.size()}, std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [vn = v.node_ptr(), cn = c.node_ptr(), groups] {
      if (double* gv = grad_target(vn)) {
        for (std::size_t g = 0; g < groups.size(); ++g) {
          for (std::size_t i : groups[g]) gv[i] += cn->grad[g];
        }
      }
    });
  }
  return c;
}

Tensor normalize(const Tensor& v) {
  require_defined(v, "normalize");
  double total = 0.0;
  for (double x : v.data()) total += x;
  if (!(total > 0.0)) throw ParameterError("normalize: total mass must be positive");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.at(i) / total;
  const bool rg = tracking({&v});
  Tensor c(v.shape(), std::move(out), rg);
  if (rg) {
    t_active_tape->record(c.node(), [vn = v.node_ptr(), cn = c.node_ptr(), total] {
      double* gv = grad_target(vn);
      if (!gv) return;
      // d(v_i / S)/d v_j = (delta_ij - p_i) / S
      double dot = 0.0;
      for (std::size_t i = 0; i < cn->data.size(); ++i) dot += cn->grad[i] * cn->data[i];
      for (std::size_t j = 0; j < cn->data.size(); ++j) gv[j] += (cn->grad[j] - dot) / total;
    });
  }
  return c;
}

}  // namespace gar
