#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Graph is an append-only tape. Leaves are registered with Graph::leaf and
// every op whose inputs live on a recording tape appends a node. Each backward
// rule is written with the same public ops, so gradients computed with
// create_graph=true are themselves tape nodes and can be differentiated again.
//
// Tensors without a tape are constants: ops on constants never record.
// A tape and the tensors attached to it belong to one thread.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cgdm/errors.hpp"

namespace cgdm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
class Tape;
}

class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, std::vector<double>{}) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (shape_numel(shape_) != data_->size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not hold " +
                           std::to_string(data_->size()) + " values");
    }
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, {value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : numel(); }

  std::span<const double> values() const noexcept { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  // True when the tensor is a node on a tape (and so can receive gradients).
  bool attached() const noexcept { return tape_ != nullptr; }
  std::size_t node_id() const noexcept { return id_; }
  Tensor detach() const {
    Tensor t = *this;
    t.tape_.reset();
    t.id_ = 0;
    return t;
  }

  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

 private:
  friend class detail::Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<detail::Tape> tape_;
  std::size_t id_ = 0;
};

// Gradients produced by backward(), in the order of the `wrt` list.
class GradMap {
 public:
  GradMap() = default;
  GradMap(std::vector<Tensor> params, std::vector<Tensor> grads)
      : params_(std::move(params)), grads_(std::move(grads)) {}

  std::size_t size() const noexcept { return grads_.size(); }
  const Tensor& operator[](std::size_t i) const { return grads_.at(i); }
  const Tensor& at(const Tensor& param) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].same_storage(param) && params_[i].node_id() == param.node_id()) return grads_[i];
    }
    throw ContractError("parameter not present in gradient map");
  }
  const std::vector<Tensor>& grads() const noexcept { return grads_; }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> grads_;
};

namespace detail {

// grad, inputs, output, needs-grad mask -> one gradient per input (empty
// Tensor where not needed).
using BackwardFn = std::function<std::vector<Tensor>(const Tensor&, const std::vector<Tensor>&,
                                                     const Tensor&, const std::vector<bool>&)>;

class Tape : public std::enable_shared_from_this<Tape> {
 public:
  struct Input {
    Tensor value;  // detached snapshot
    std::optional<std::size_t> id;
  };
  struct Node {
    const char* op = "leaf";
    Shape shape;
    std::shared_ptr<const std::vector<double>> data;
    std::vector<Input> inputs;
    BackwardFn backward;
  };

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  Tensor view(std::size_t id) {
    const Node& n = nodes_.at(id);
    Tensor t;
    t.shape_ = n.shape;
    t.data_ = n.data;
    t.tape_ = shared_from_this();
    t.id_ = id;
    return t;
  }

  Tensor add_leaf(const Tensor& value) {
    Node n;
    n.shape = value.shape_;
    n.data = value.data_;
    nodes_.push_back(std::move(n));
    return view(nodes_.size() - 1);
  }

  Tensor add_node(const char* op, const Tensor& out, const std::vector<Tensor>& inputs, BackwardFn fn) {
    Node n;
    n.op = op;
    n.shape = out.shape_;
    n.data = out.data_;
    n.inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) {
      Input slot{in.detach(), std::nullopt};
      if (in.tape_.get() == this) slot.id = in.id_;
      n.inputs.push_back(std::move(slot));
    }
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return view(nodes_.size() - 1);
  }

  static Tape* of(const Tensor& t) { return t.tape_.get(); }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

class RecordingGuard {
 public:
  RecordingGuard(Tape& tape, bool on) : tape_(tape), previous_(tape.recording()) { tape.set_recording(on); }
  ~RecordingGuard() { tape_.set_recording(previous_); }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

// Records `out` as the result of `op` if any input sits on a recording tape.
inline Tensor record(const char* op, Tensor out, const std::vector<Tensor>& inputs, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Tensor& in : inputs) {
    Tape* t = Tape::of(in);
    if (t == nullptr) continue;
    if (tape != nullptr && t != tape) {
      throw ContractError(std::string(op) + ": inputs belong to different graphs");
    }
    tape = t;
  }
  if (tape == nullptr || !tape->recording()) return out;
  return tape->add_node(op, out, inputs, std::move(fn));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(a.shape(), std::move(out));
}

template <typename F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.numel());
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

class Graph {
 public:
  Graph() : tape_(std::make_shared<detail::Tape>()) {}

  // Registers `value` as a differentiable leaf of this graph.
  Tensor leaf(const Tensor& value) { return tape_->add_leaf(value.detach()); }
  std::size_t size() const noexcept { return tape_->size(); }
  const char* op_name(std::size_t id) const { return tape_->node(id).op; }
  std::vector<std::size_t> inputs_of(std::size_t id) const {
    std::vector<std::size_t> ids;
    for (const auto& in : tape_->node(id).inputs) {
      if (in.id) ids.push_back(*in.id);
    }
    return ids;
  }

 private:
  std::shared_ptr<detail::Tape> tape_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Each one computes its value eagerly and, when recording,
// attaches a backward rule expressed in these same ops.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

inline Tensor neg(const Tensor& a) {
  Tensor out = detail::map_values(a, [](double x) { return -x; });
  return detail::record("neg", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{neg(g)};
                        });
}

// Multiplication by a fixed real constant.
inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::map_values(a, [c](double x) { return c * x; });
  return detail::record("scale", std::move(out), {a},
                        [c](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{scale(g, c)};
                        });
}

// Broadcasts a one-element tensor to `shape`.
inline Tensor expand(const Tensor& a, Shape shape) {
  if (a.numel() != 1) throw DimensionError("expand: source must have one element, got " + shape_str(a.shape()));
  Tensor out = Tensor::full(shape, a[0]);
  Shape src = a.shape();
  return detail::record("expand", std::move(out), {a},
                        [src](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{reshape(sum(g), src)};
                        });
}

Tensor sum_rows(const Tensor& a);
Tensor sum_cols(const Tensor& a);

// v[n] -> m x n, every row equal to v.
inline Tensor expand_rows(const Tensor& v, std::size_t m) {
  if (v.rank() != 1) throw DimensionError("expand_rows: expected a vector, got " + shape_str(v.shape()));
  const std::size_t n = v.numel();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) std::copy(v.values().begin(), v.values().end(), out.begin() + r * n);
  return detail::record("expand_rows", Tensor(Shape{m, n}, std::move(out)), {v},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{sum_rows(g)};
                        });
}

// v[m] -> m x n, every column equal to v.
inline Tensor expand_cols(const Tensor& v, std::size_t n) {
  if (v.rank() != 1) throw DimensionError("expand_cols: expected a vector, got " + shape_str(v.shape()));
  const std::size_t m = v.numel();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) std::fill(out.begin() + r * n, out.begin() + (r + 1) * n, v[r]);
  return detail::record("expand_cols", Tensor(Shape{m, n}, std::move(out)), {v},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{sum_cols(g)};
                        });
}

// m x n -> n (sum over rows).
inline Tensor sum_rows(const Tensor& a) {
  detail::require_matrix("sum_rows", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += a[r * n + c];
  return detail::record("sum_rows", Tensor(Shape{n}, std::move(out)), {a},
                        [m](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{expand_rows(g, m)};
                        });
}

// m x n -> m (sum over columns).
inline Tensor sum_cols(const Tensor& a) {
  detail::require_matrix("sum_cols", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += a[r * n + c];
  return detail::record("sum_cols", Tensor(Shape{m}, std::move(out)), {a},
                        [n](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{expand_cols(g, n)};
                        });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double x : a.values()) total += x;
  Shape src = a.shape();
  return detail::record("sum", Tensor::scalar(total), {a},
                        [src](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{expand(g, src)};
                        });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  Shape src = a.shape();
  return detail::record("reshape", std::move(out), {a},
                        [src](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{reshape(g, src)};
                        });
}

inline Tensor flatten(const Tensor& a) { return reshape(a, Shape{a.numel()}); }

Tensor concat(const std::vector<Tensor>& parts);

// Contiguous 1-D window [offset, offset + length) of a flattened tensor.
inline Tensor slice(const Tensor& a, std::size_t offset, std::size_t length) {
  if (a.rank() != 1) throw DimensionError("slice: expected a vector, got " + shape_str(a.shape()));
  if (offset + length > a.numel()) throw DimensionError("slice: window exceeds vector length");
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(offset),
                          a.values().begin() + static_cast<std::ptrdiff_t>(offset + length));
  const std::size_t total = a.numel();
  return detail::record(
      "slice", Tensor::vector(std::move(out)), {a},
      [offset, length, total](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
        std::vector<Tensor> parts;
        if (offset > 0) parts.push_back(Tensor::zeros(Shape{offset}));
        parts.push_back(g);
        if (offset + length < total) parts.push_back(Tensor::zeros(Shape{total - offset - length}));
        return std::vector<Tensor>{concat(parts)};
      });
}

// Flattens every part and joins them into one vector.
inline Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  std::vector<Shape> shapes;
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    shapes.push_back(p.shape());
  }
  return detail::record(
      "concat", Tensor::vector(std::move(out)), parts,
      [shapes](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>& need) {
        std::vector<Tensor> grads(shapes.size());
        std::size_t offset = 0;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
          const std::size_t n = shape_numel(shapes[i]);
          if (need[i]) grads[i] = reshape(slice(g, offset, n), shapes[i]);
          offset += n;
        }
        return grads;
      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = a[r * n + c];
  return detail::record("transpose", Tensor(Shape{n, m}, std::move(out)), {a},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{transpose(g)};
                        });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yrow = y.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  return detail::record(
      "matmul", Tensor(Shape{m, n}, std::move(out)), {a, b},
      [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&, const std::vector<bool>& need) {
        std::vector<Tensor> grads(2);
        if (need[0]) grads[0] = matmul(g, transpose(in[1]));
        if (need[1]) grads[1] = matmul(transpose(in[0]), g);
        return grads;
      });
}

namespace detail {

// Same-shape elementwise binary op.
template <typename F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, BackwardFn fn) {
  require_same_shape(op, a, b);
  return record(op, zip_values(a, b, f), {a, b}, std::move(fn));
}

// Scalar-vs-tensor and row-vs-matrix broadcasting; anything else must match.
inline std::pair<Tensor, Tensor> broadcast_pair(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a, b};
  if (b.numel() == 1) return {a, expand(b, a.shape())};
  if (a.numel() == 1) return {expand(a, b.shape()), b};
  auto as_row = [](const Tensor& v) { return v.rank() == 1 ? v : reshape(v, Shape{v.numel()}); };
  if (a.rank() == 2 && (b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1)) && b.numel() == a.shape()[1]) {
    return {a, expand_rows(as_row(b), a.shape()[0])};
  }
  if (b.rank() == 2 && (a.rank() == 1 || (a.rank() == 2 && a.shape()[0] == 1)) && a.numel() == b.shape()[1]) {
    return {expand_rows(as_row(a), b.shape()[0]), b};
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                       shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair("add", a0, b0);
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>&) {
        return std::vector<Tensor>{g, g};
      });
}

inline Tensor sub(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair("sub", a0, b0);
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& g, const std::vector<Tensor>&, const Tensor&, const std::vector<bool>& need) {
        return std::vector<Tensor>{g, need[1] ? neg(g) : Tensor()};
      });
}

inline Tensor mul(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair("mul", a0, b0);
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&, const std::vector<bool>& need) {
        std::vector<Tensor> grads(2);
        if (need[0]) grads[0] = mul(g, in[1]);
        if (need[1]) grads[1] = mul(g, in[0]);
        return grads;
      });
}

inline Tensor div(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair("div", a0, b0);
  for (double y : b.values()) {
    if (y == 0.0) throw DomainError("div: division by zero");
  }
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](const Tensor& g, const std::vector<Tensor>& in, const Tensor& out, const std::vector<bool>& need) {
        std::vector<Tensor> grads(2);
        if (need[0]) grads[0] = div(g, in[1]);
        if (need[1]) grads[1] = neg(div(mul(g, out), in[1]));
        return grads;
      });
}

inline Tensor exp(const Tensor& a) {
  Tensor out = detail::map_values(a, [](double x) { return std::exp(x); });
  return detail::record("exp", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor& out, const std::vector<bool>&) {
                          return std::vector<Tensor>{mul(g, out)};
                        });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw DomainError("log: argument must be strictly positive");
  }
  Tensor out = detail::map_values(a, [](double x) { return std::log(x); });
  return detail::record("log", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&, const std::vector<bool>&) {
                          return std::vector<Tensor>{div(g, in[0])};
                        });
}

inline Tensor sqrt(const Tensor& a) {
  for (double x : a.values()) {
    if (x < 0.0) throw DomainError("sqrt: argument must be non-negative");
  }
  Tensor out = detail::map_values(a, [](double x) { return std::sqrt(x); });
  return detail::record("sqrt", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>&, const Tensor& out, const std::vector<bool>&) {
                          return std::vector<Tensor>{div(g, scale(out, 2.0))};
                        });
}

// Elementwise mask-multiplies: the masks are piecewise constant, so their
// derivative is zero almost everywhere and they enter the graph as constants.
inline Tensor relu(const Tensor& a) {
  Tensor out = detail::map_values(a, [](double x) { return x > 0.0 ? x : 0.0; });
  return detail::record("relu", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&, const std::vector<bool>&) {
                          Tensor mask = detail::map_values(in[0].detach(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
                          return std::vector<Tensor>{mul(g, mask)};
                        });
}

inline Tensor abs(const Tensor& a) {
  Tensor out = detail::map_values(a, [](double x) { return std::fabs(x); });
  return detail::record("abs", std::move(out), {a},
                        [](const Tensor& g, const std::vector<Tensor>& in, const Tensor&, const std::vector<bool>&) {
                          Tensor sign = detail::map_values(
                              in[0].detach(), [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
                          return std::vector<Tensor>{mul(g, sign)};
                        });
}

// ---------------------------------------------------------------------------
// Composites.

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("dot", a, b);
  return sum(mul(a, b));
}

inline Tensor l2_norm(const Tensor& a) { return sqrt(dot(a, a)); }

// Row-wise log-softmax of b x K logits. The row max is subtracted as a
// constant; the result is shift invariant, so the gradient stays exact.
inline Tensor log_softmax(const Tensor& logits) {
  detail::require_matrix("log_softmax", logits);
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (k == 0) throw DimensionError("log_softmax: zero classes");
  std::vector<double> row_max(b);
  for (std::size_t r = 0; r < b; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double v = logits[r * k + c];
      if (!std::isfinite(v)) throw DomainError("log_softmax: non-finite logit");
      m = std::max(m, v);
    }
    row_max[r] = m;
  }
  Tensor shifted = sub(logits, expand_cols(Tensor::vector(std::move(row_max)), k));
  Tensor log_norm = log(sum_cols(exp(shifted)));
  return sub(shifted, expand_cols(log_norm, k));
}

inline Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

// ---------------------------------------------------------------------------

// Reverse-mode gradients of a one-element tensor with respect to `wrt`.
//
// Tensors in `wrt` that do not influence `scalar` get a zero gradient of their
// own shape. With create_graph the gradients are recorded on the same graph,
// so expressions built from them can be differentiated again.
inline GradMap backward(const Tensor& scalar, const std::vector<Tensor>& wrt, bool create_graph = false) {
  if (scalar.numel() != 1) {
    throw ContractError("backward: expected a one-element tensor, got " + shape_str(scalar.shape()));
  }
  detail::Tape* tape = detail::Tape::of(scalar);
  std::vector<Tensor> out(wrt.size());
  if (tape == nullptr) {
    for (std::size_t i = 0; i < wrt.size(); ++i) out[i] = Tensor::zeros(wrt[i].shape());
    return GradMap(wrt, std::move(out));
  }

  const std::size_t root = scalar.node_id();
  std::vector<bool> target(root + 1, false);
  for (const Tensor& w : wrt) {
    if (detail::Tape::of(w) == tape && w.node_id() <= root) target[w.node_id()] = true;
  }
  // needs[i]: some target is reachable from node i through its inputs.
  std::vector<bool> needs(root + 1, false);
  for (std::size_t i = 0; i <= root; ++i) {
    bool n = target[i];
    for (const auto& in : tape->node(i).inputs) {
      if (in.id && needs[*in.id]) n = true;
    }
    needs[i] = n;
  }

  std::vector<std::optional<Tensor>> grads(root + 1);
  detail::RecordingGuard guard(*tape, create_graph);
  if (needs[root]) grads[root] = Tensor::ones(scalar.shape());

  for (std::size_t i = root + 1; i-- > 0;) {
    if (!needs[i] || !grads[i]) continue;
    // Copy what we need: backward rules may append to the tape.
    detail::BackwardFn fn = tape->node(i).backward;
    if (!fn) continue;
    std::vector<std::optional<std::size_t>> ids;
    std::vector<Tensor> inputs;
    std::vector<bool> need_in;
    for (const auto& in : tape->node(i).inputs) {
      ids.push_back(in.id);
      inputs.push_back(in.id ? tape->view(*in.id) : in.value);
      need_in.push_back(in.id && needs[*in.id]);
    }
    Tensor output = tape->view(i);
    std::vector<Tensor> in_grads = fn(*grads[i], inputs, output, need_in);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (!need_in[j]) continue;
      const std::size_t id = *ids[j];
      grads[id] = grads[id] ? add(*grads[id], in_grads[j]) : in_grads[j];
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Tensor& w = wrt[i];
    if (detail::Tape::of(w) == tape && w.node_id() <= root && grads[w.node_id()]) {
      out[i] = *grads[w.node_id()];
    } else {
      out[i] = Tensor::zeros(w.shape());
    }
  }
  return GradMap(wrt, std::move(out));
}

// d/dx of df/dx by two chained backward passes, for a scalar function f.
template <typename F>
Tensor second_derivative(F&& f, const Tensor& x) {
  Graph graph;
  Tensor leaf = graph.leaf(x);
  Tensor first = backward(f(leaf), {leaf}, true)[0];
  return backward(sum(first), {leaf}, false)[0];
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cgdm
