#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Tensor is a shared handle to a graph node. Ops allocate a new node that
// keeps its inputs alive only when at least one input requires a gradient,
// so constant sub-computations (the frozen teacher branch, for instance)
// never build a graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pcd/errors.hpp"

namespace pcd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Boolean [rows, cols] selection used by the masked softmax ops.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool value = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, value ? 1 : 0) {}

  static Mask full(std::size_t rows, std::size_t cols) {
    return Mask(rows, cols, true);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const {
    return bits_[r * cols_ + c] != 0;
  }
  void set(std::size_t r, std::size_t c, bool v = true) {
    bits_[r * cols_ + c] = v ? 1 : 0;
  }

  std::size_t row_count(std::size_t r) const {
    return static_cast<std::size_t>(
        std::count(bits_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                   bits_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_),
                   std::uint8_t{1}));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of its inputs.
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
    }
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " expects " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  explicit operator bool() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; intended for optimizer updates on leaves.
  std::span<double> mutable_data() { return node_->data; }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const {
    return node_->data.at(r * node_->shape.back() + c);
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  // New leaf holding a copy of the values, cut off from the graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  // Populates grad on every requires_grad leaf reachable from this scalar.
  // Leaf grads accumulate across calls; callers zero them between steps.
  void backward() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node) {
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

// Nodes reachable from a root through requires_grad edges, in topological
// order (inputs before the nodes that consume them).
class ComputeGraph {
 public:
  explicit ComputeGraph(const Tensor& root) {
    if (!root || !root.requires_grad()) return;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* in = node->inputs[next++].get();
        if (!in->requires_grad || !seen.insert(in).second) continue;
        stack.emplace_back(in, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::span<detail::Node* const> nodes() const { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

  std::ptrdiff_t position(const Tensor& t) const {
    auto it = std::find(order_.begin(), order_.end(), t.node());
    return it == order_.end() ? -1 : it - order_.begin();
  }

  void backward() {
    if (order_.empty()) {
      throw ContractError("backward() on a value that depends on no requires_grad tensor");
    }
    detail::Node* root = order_.back();
    if (root->data.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_str(root->shape));
    }
    for (detail::Node* n : order_) {
      if (n->is_leaf()) {
        n->ensure_grad();
      } else {
        n->grad.assign(n->data.size(), 0.0);
      }
    }
    root->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(shape()));
  }
  ComputeGraph(*this).backward();
}

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                          std::vector<std::shared_ptr<Node>> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const auto& in) { return in->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " + shape_str(a.shape()));
  }
}

}  // namespace detail

// out[i,k] = sum_d x[i,d] * w[d,k] + b[k]
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      b.dim(0) != w.dim(1)) {
    throw DimensionError("affine: incompatible shapes x" + shape_str(x.shape()) +
                         " w" + shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  std::vector<double> y(rows * out, 0.0);
  auto xd = x.data();
  auto wd = w.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < rows; ++i) {
    double* yr = y.data() + i * out;
    for (std::size_t d = 0; d < in; ++d) {
      const double xv = xd[i * in + d];
      const double* wr = wd.data() + d * out;
      for (std::size_t k = 0; k < out; ++k) yr[k] += xv * wr[k];
    }
    for (std::size_t k = 0; k < out; ++k) yr[k] += bd[k];
  }
  return detail::make_result(
      {rows, out}, std::move(y), "affine",
      {x.node_ptr(), w.node_ptr(), b.node_ptr()},
      [rows, in, out](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const double* g = self.grad.data();
        if (xn.requires_grad) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t d = 0; d < in; ++d) {
              const double* wr = wn.data.data() + d * out;
              const double* gr = g + i * out;
              double acc = 0.0;
              for (std::size_t k = 0; k < out; ++k) acc += gr[k] * wr[k];
              xn.grad[i * in + d] += acc;
            }
          }
        }
        if (wn.requires_grad) {
          for (std::size_t i = 0; i < rows; ++i) {
            const double* gr = g + i * out;
            for (std::size_t d = 0; d < in; ++d) {
              const double xv = xn.data[i * in + d];
              if (xv == 0.0) continue;
              double* gw = wn.grad.data() + d * out;
              for (std::size_t k = 0; k < out; ++k) gw[k] += xv * gr[k];
            }
          }
        }
        if (bn.requires_grad) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t k = 0; k < out; ++k) bn.grad[k] += g[i * out + k];
          }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> y(x.data().begin(), x.data().end());
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return detail::make_result(x.shape(), std::move(y), "relu", {x.node_ptr()},
                             [](detail::Node& self) {
                               auto& xn = *self.inputs[0];
                               for (std::size_t i = 0; i < xn.data.size(); ++i) {
                                 if (xn.data[i] > 0.0) xn.grad[i] += self.grad[i];
                               }
                             });
}

namespace detail {

inline void check_masked_softmax_args(const Tensor& z, const Mask& mask, double tau,
                                      const char* op) {
  require_rank(z, 2, op);
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError(std::string(op) + ": temperature must be positive, got " +
                         std::to_string(tau));
  }
  if (mask.rows() != z.dim(0) || mask.cols() != z.dim(1)) {
    throw DimensionError(std::string(op) + ": mask [" + std::to_string(mask.rows()) +
                         ", " + std::to_string(mask.cols()) + "] vs logits " +
                         shape_str(z.shape()));
  }
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    if (mask.row_count(r) == 0) {
      throw DegenerateGroupError(std::string(op) + ": row " + std::to_string(r) +
                                 " has no masked-in class");
    }
  }
}

// Per row: shifted = z/tau - max over masked-in entries, and log of the
// masked-in partition sum of exp(shifted).
struct MaskedRowStats {
  std::vector<double> shifted;
  std::vector<double> log_norm;
};

inline MaskedRowStats masked_row_stats(const Tensor& z, const Mask& mask, double tau) {
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  MaskedRowStats s{std::vector<double>(rows * cols, 0.0), std::vector<double>(rows, 0.0)};
  auto zd = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask(r, c)) mx = std::max(mx, zd[r * cols + c] / tau);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const double v = zd[r * cols + c] / tau - mx;
      s.shifted[r * cols + c] = v;
      total += std::exp(v);
    }
    s.log_norm[r] = std::log(total);
  }
  return s;
}

}  // namespace detail

// Row-wise softmax of z/tau restricted to the masked-in entries; masked-out
// entries are exactly zero and receive no gradient.
inline Tensor masked_softmax_temp(const Tensor& z, const Mask& mask, double tau) {
  detail::check_masked_softmax_args(z, mask, tau, "masked_softmax_temp");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  auto stats = detail::masked_row_stats(z, mask, tau);
  std::vector<double> y(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      y[r * cols + c] = std::exp(stats.shifted[r * cols + c]);
      total += y[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= total;
  }
  return detail::make_result(
      z.shape(), std::move(y), "masked_softmax_temp", {z.node_ptr()},
      [mask, tau, rows, cols](detail::Node& self) {
        auto& zn = *self.inputs[0];
        const auto& yv = self.data;
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (mask(r, c)) dot += g[r * cols + c] * yv[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            if (!mask(r, c)) continue;
            const std::size_t i = r * cols + c;
            zn.grad[i] += yv[i] * (g[i] - dot) / tau;
          }
        }
      });
}

// Row-wise log-softmax of z/tau over the masked-in entries. Masked-out
// entries hold 0 (not -inf) so that p * log(p) style products vanish there.
inline Tensor masked_log_softmax_temp(const Tensor& z, const Mask& mask, double tau) {
  detail::check_masked_softmax_args(z, mask, tau, "masked_log_softmax_temp");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  auto stats = detail::masked_row_stats(z, mask, tau);
  std::vector<double> y(rows * cols, 0.0);
  std::vector<double> probs(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const std::size_t i = r * cols + c;
      y[i] = stats.shifted[i] - stats.log_norm[r];
      probs[i] = std::exp(y[i]);
    }
  }
  return detail::make_result(
      z.shape(), std::move(y), "masked_log_softmax_temp", {z.node_ptr()},
      [mask, tau, rows, cols, probs = std::move(probs)](detail::Node& self) {
        auto& zn = *self.inputs[0];
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (mask(r, c)) total += g[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            if (!mask(r, c)) continue;
            const std::size_t i = r * cols + c;
            zn.grad[i] += (g[i] - probs[i] * total) / tau;
          }
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(y), "add", {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               for (auto& in : self.inputs) {
                                 if (!in->requires_grad) continue;
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   in->grad[i] += self.grad[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(y), "sub", {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               auto& bn = *self.inputs[1];
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 if (an.requires_grad) an.grad[i] += self.grad[i];
                                 if (bn.requires_grad) bn.grad[i] -= self.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(y), "mul", {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               auto& bn = *self.inputs[1];
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 if (an.requires_grad) an.grad[i] += self.grad[i] * bn.data[i];
                                 if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.data[i];
                               }
                             });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] / b.data()[i];
  return detail::make_result(
      a.shape(), std::move(y), "div", {a.node_ptr(), b.node_ptr()},
      [](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (an.requires_grad) an.grad[i] += self.grad[i] / bn.data[i];
          if (bn.requires_grad) bn.grad[i] -= self.grad[i] * self.data[i] / bn.data[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> y(a.data().begin(), a.data().end());
  for (double& v : y) v *= factor;
  return detail::make_result(a.shape(), std::move(y), "scale", {a.node_ptr()},
                             [factor](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 an.grad[i] += self.grad[i] * factor;
                             });
}

inline Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> y(a.data().begin(), a.data().end());
  for (double& v : y) v += offset;
  return detail::make_result(a.shape(), std::move(y), "add_scalar", {a.node_ptr()},
                             [](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 an.grad[i] += self.grad[i];
                             });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> y(a.data().begin(), a.data().end());
  for (double& v : y) v = std::sqrt(v);
  return detail::make_result(a.shape(), std::move(y), "sqrt", {a.node_ptr()},
                             [](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 an.grad[i] += self.grad[i] * 0.5 / self.data[i];
                             });
}

// [R, C] -> [R]
inline Tensor row_sum(const Tensor& a) {
  detail::require_rank(a, 2, "row_sum");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r] += a.data()[r * cols + c];
  }
  return detail::make_result({rows}, std::move(y), "row_sum", {a.node_ptr()},
                             [cols](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (std::size_t i = 0; i < an.grad.size(); ++i)
                                 an.grad[i] += self.grad[i / cols];
                             });
}

inline Tensor row_dot(const Tensor& a, const Tensor& b) { return row_sum(mul(a, b)); }

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::make_result({1}, {total}, "sum", {a.node_ptr()},
                             [](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (double& g : an.grad) g += self.grad[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::make_result({1}, {total / n}, "mean", {a.node_ptr()},
                             [n](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (double& g : an.grad) g += self.grad[0] / n;
                             });
}

// out[r] = a[r, index[r]]
inline Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  detail::require_rank(a, 2, "pick");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (index.size() != rows) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(a.shape()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= cols) {
      throw DimensionError("pick: index " + std::to_string(idx[r]) + " out of range for " +
                           shape_str(a.shape()));
    }
    y[r] = a.data()[r * cols + idx[r]];
  }
  return detail::make_result({rows}, std::move(y), "pick", {a.node_ptr()},
                             [cols, idx = std::move(idx)](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 an.grad[r * cols + idx[r]] += self.grad[r];
                             });
}

}  // namespace pcd
