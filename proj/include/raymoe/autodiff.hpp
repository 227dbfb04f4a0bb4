#pragma once

// Reverse-mode differentiation over a dynamically recorded tape.
//
// A Tape records vector-valued primitive operations in execution order, so
// every node only references earlier nodes. Parameters are not tape nodes:
// operations that consume them hold a ParamRef pointing at the caller-owned
// value and gradient arrays, and backward() accumulates into those gradient
// arrays. Shared parameters used at several points of an unrolled computation
// therefore accumulate additively.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "raymoe/errors.hpp"
#include "raymoe/kernels.hpp"

namespace raymoe::ad {

using kernels::Nonzero;

/// Dense row-major parameter block (a vector is rows x 1) with its gradient buffer.
struct ParamRef {
  const double* value = nullptr;
  double* grad = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const noexcept { return rows * cols; }
};

/// Sparse parameter matrix: value[k] / grad[k] belong to pattern[k].
struct SparseParamRef {
  const double* value = nullptr;
  double* grad = nullptr;
  std::span<const Nonzero> pattern;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

class Tape;

/// Handle to a recorded value. Shape is fixed at creation.
struct Var {
  Tape* tape = nullptr;
  std::int32_t node = -1;
  std::uint32_t length = 0;
  bool scalar = false;

  std::size_t size() const noexcept { return length; }
  bool valid() const noexcept { return tape != nullptr && node >= 0; }
};

/// Reference to one element of a recorded vector; node < 0 is the constant 0.
struct Element {
  std::int32_t node = -1;
  std::uint32_t index = 0;

  static constexpr Element zero() noexcept { return {}; }
  bool is_zero() const noexcept { return node < 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Drops all nodes (capacity is kept) and re-arms backward().
  void clear() noexcept {
    nodes_.clear();
    values_.clear();
    adjoints_.clear();
    elements_.clear();
    operands_.clear();
    backward_done_ = false;
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

  std::span<const double> value(Var v) const {
    check_owned(v);
    const Node& n = nodes_[static_cast<std::size_t>(v.node)];
    return {values_.data() + n.value_offset, n.length};
  }
  double scalar_value(Var v) const {
    require_scalar(v, "scalar_value");
    return value(v)[0];
  }
  double element_value(Element e) const {
    if (e.is_zero()) return 0.0;
    return values_[nodes_[static_cast<std::size_t>(e.node)].value_offset + e.index];
  }

  /// Adjoint of a node after backward(); empty before.
  std::span<const double> adjoint(Var v) const {
    check_owned(v);
    if (!backward_done_) return {};
    const Node& n = nodes_[static_cast<std::size_t>(v.node)];
    return {adjoints_.data() + n.value_offset, n.length};
  }

  Var constant(std::span<const double> x) {
    Var out = push(Op::constant, x.size(), false);
    std::copy(x.begin(), x.end(), mutable_values(out).begin());
    return out;
  }
  Var constant(double x) {
    Var out = push(Op::constant, 1, true);
    mutable_values(out)[0] = x;
    return out;
  }

  /// Vector whose k-th entry is the referenced element (or 0).
  Var gather(std::span<const Element> elems) {
    Var out = push(Op::gather, elems.size(), false);
    Node& n = nodes_.back();
    n.aux_offset = elements_.size();
    n.aux_length = elems.size();
    elements_.insert(elements_.end(), elems.begin(), elems.end());
    auto y = mutable_values(out);
    for (std::size_t k = 0; k < elems.size(); ++k) y[k] = element_value(elems[k]);
    return out;
  }

  Var matvec(const ParamRef& w, Var x) {
    check_owned(x);
    if (w.cols != x.size()) {
      throw ConfigError("matvec: matrix has " + std::to_string(w.cols) +
                        " columns but input has length " + std::to_string(x.size()));
    }
    Var out = push(Op::matvec, w.rows, false);
    Node& n = nodes_.back();
    n.a = x.node;
    n.param = w;
    kernels::matvec({w.value, w.size()}, w.rows, w.cols, value(x), mutable_values(out));
    return out;
  }

  /// Sparse matrix times a constant (data) vector; only the weights are differentiated.
  Var sparse_matvec(const SparseParamRef& w, std::span<const double> x) {
    if (w.cols != x.size()) {
      throw ConfigError("sparse_matvec: matrix has " + std::to_string(w.cols) +
                        " columns but input has length " + std::to_string(x.size()));
    }
    Var out = push(Op::sparse_matvec, w.rows, false);
    Node& n = nodes_.back();
    n.sparse = w;
    n.data = x.data();
    kernels::sparse_matvec({w.value, w.pattern.size()}, w.pattern, x, mutable_values(out));
    return out;
  }

  Var add_bias(Var x, const ParamRef& b) {
    check_owned(x);
    if (b.size() != x.size()) {
      throw ConfigError("add_bias: bias has length " + std::to_string(b.size()) +
                        " but input has length " + std::to_string(x.size()));
    }
    Var out = push(Op::add_bias, x.size(), x.scalar);
    Node& n = nodes_.back();
    n.a = x.node;
    n.param = b;
    auto y = mutable_values(out);
    auto xv = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + b.value[i];
    return out;
  }

  /// Elementwise max(x, 0); derivative 0 at x <= 0.
  Var relu(Var x) {
    check_owned(x);
    Var out = push(Op::relu, x.size(), x.scalar);
    nodes_.back().a = x.node;
    auto y = mutable_values(out);
    auto xv = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return out;
  }

  /// x + c for a non-differentiated constant c.
  Var shift(Var x, double c) {
    check_owned(x);
    Var out = push(Op::shift, x.size(), x.scalar);
    nodes_.back().a = x.node;
    nodes_.back().c = c;
    auto y = mutable_values(out);
    auto xv = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + c;
    return out;
  }

  Var softmax(Var x) {
    check_owned(x);
    if (x.size() == 0) throw ConfigError("softmax: empty input");
    Var out = push(Op::softmax, x.size(), false);
    nodes_.back().a = x.node;
    kernels::softmax(value(x), mutable_values(out));
    return out;
  }

  /// a * x with a differentiated scalar a.
  Var scale(Var a, Var x) {
    check_owned(a);
    check_owned(x);
    require_scalar(a, "scale");
    Var out = push(Op::scale, x.size(), x.scalar);
    nodes_.back().a = a.node;
    nodes_.back().b = x.node;
    const double av = scalar_value(a);
    auto y = mutable_values(out);
    auto xv = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av * xv[i];
    return out;
  }

  /// c * x for a non-differentiated constant c.
  Var scale(double c, Var x) {
    check_owned(x);
    Var out = push(Op::scale_const, x.size(), x.scalar);
    nodes_.back().a = x.node;
    nodes_.back().c = c;
    auto y = mutable_values(out);
    auto xv = value(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * xv[i];
    return out;
  }

  /// Sum of a vector's entries.
  Var sum(Var x) {
    check_owned(x);
    Var out = push(Op::sum, 1, true);
    nodes_.back().a = x.node;
    mutable_values(out)[0] = kernels::sum(value(x));
    return out;
  }

  /// Sum of scalar Vars; an empty list yields the constant 0.
  Var sum_slots(std::span<const Var> xs) {
    Var out = push(Op::sum_slots, 1, true);
    Node& n = nodes_.back();
    n.aux_offset = operands_.size();
    n.aux_length = xs.size();
    double acc = 0.0;
    for (const Var& x : xs) {
      check_owned(x);
      require_scalar(x, "sum_slots");
      operands_.push_back(x.node);
      acc += scalar_value(x);
    }
    mutable_values(out)[0] = acc;
    return out;
  }

  Var cross_entropy(Var logits, std::size_t label) {
    check_owned(logits);
    if (label >= logits.size()) {
      throw ConfigError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
    }
    Var out = push(Op::cross_entropy, 1, true);
    nodes_.back().a = logits.node;
    nodes_.back().label = label;
    mutable_values(out)[0] = kernels::cross_entropy(value(logits), label);
    return out;
  }

  /// Reverse sweep seeded with d loss / d loss = 1. Accumulates parameter
  /// gradients into every ParamRef's grad buffer.
  void backward(Var loss) {
    check_owned(loss);
    if (!loss.scalar || loss.size() != 1) throw std::logic_error("backward: loss must be a scalar");
    if (backward_done_) throw std::logic_error("backward: tape already differentiated; clear() first");
    backward_done_ = true;
    adjoints_.assign(values_.size(), 0.0);
    adjoints_[nodes_[static_cast<std::size_t>(loss.node)].value_offset] = 1.0;
    for (std::int32_t i = loss.node; i >= 0; --i) propagate(nodes_[static_cast<std::size_t>(i)]);
  }

 private:
  enum class Op : std::uint8_t {
    constant,
    gather,
    matvec,
    sparse_matvec,
    add_bias,
    relu,
    shift,
    softmax,
    scale,
    scale_const,
    sum,
    sum_slots,
    cross_entropy,
  };

  struct Node {
    Op op = Op::constant;
    std::uint32_t length = 0;
    std::size_t value_offset = 0;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double c = 0.0;
    std::size_t label = 0;
    std::size_t aux_offset = 0;
    std::size_t aux_length = 0;
    ParamRef param{};
    SparseParamRef sparse{};
    const double* data = nullptr;
  };

  Var push(Op op, std::size_t length, bool scalar) {
    if (nodes_.size() >= static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max())) {
      throw std::length_error("tape node limit exceeded");
    }
    if (backward_done_) throw std::logic_error("tape: cannot record after backward(); clear() first");
    Node n;
    n.op = op;
    n.length = static_cast<std::uint32_t>(length);
    n.value_offset = values_.size();
    values_.resize(values_.size() + length);
    nodes_.push_back(n);
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1), n.length, scalar};
  }

  std::span<double> mutable_values(Var v) {
    const Node& n = nodes_[static_cast<std::size_t>(v.node)];
    return {values_.data() + n.value_offset, n.length};
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.node < 0 || static_cast<std::size_t>(v.node) >= nodes_.size()) {
      throw std::logic_error("tape: Var does not belong to this tape");
    }
  }
  static void require_scalar(Var v, const char* op) {
    if (!v.scalar) throw ConfigError(std::string(op) + ": expected a scalar Var");
  }

  double* adj(std::int32_t node) { return adjoints_.data() + nodes_[static_cast<std::size_t>(node)].value_offset; }
  const double* val(std::int32_t node) const {
    return values_.data() + nodes_[static_cast<std::size_t>(node)].value_offset;
  }

  void propagate(const Node& n) {
    const double* dy = adjoints_.data() + n.value_offset;
    const double* y = values_.data() + n.value_offset;
    const std::size_t len = n.length;
    switch (n.op) {
      case Op::constant:
        break;
      case Op::gather: {
        for (std::size_t k = 0; k < len; ++k) {
          const Element& e = elements_[n.aux_offset + k];
          if (!e.is_zero()) adj(e.node)[e.index] += dy[k];
        }
        break;
      }
      case Op::matvec: {
        const double* x = val(n.a);
        double* dx = adj(n.a);
        const std::size_t cols = n.param.cols;
        for (std::size_t i = 0; i < n.param.rows; ++i) {
          const double g = dy[i];
          if (g == 0.0) continue;
          const double* w = n.param.value + i * cols;
          double* gw = n.param.grad + i * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            gw[j] += g * x[j];
            dx[j] += w[j] * g;
          }
        }
        break;
      }
      case Op::sparse_matvec: {
        const auto& pat = n.sparse.pattern;
        for (std::size_t k = 0; k < pat.size(); ++k) {
          n.sparse.grad[k] += dy[pat[k].row] * n.data[pat[k].col];
        }
        break;
      }
      case Op::add_bias: {
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < len; ++i) {
          dx[i] += dy[i];
          n.param.grad[i] += dy[i];
        }
        break;
      }
      case Op::relu: {
        const double* x = val(n.a);
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < len; ++i) {
          if (x[i] > 0.0) dx[i] += dy[i];
        }
        break;
      }
      case Op::shift:
      case Op::scale_const: {
        double* dx = adj(n.a);
        const double k = n.op == Op::shift ? 1.0 : n.c;
        for (std::size_t i = 0; i < len; ++i) dx[i] += k * dy[i];
        break;
      }
      case Op::softmax: {
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += y[i] * dy[i];
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < len; ++i) dx[i] += y[i] * (dy[i] - dot);
        break;
      }
      case Op::scale: {
        const double a = val(n.a)[0];
        const double* x = val(n.b);
        double* dx = adj(n.b);
        double da = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          da += dy[i] * x[i];
          dx[i] += a * dy[i];
        }
        adj(n.a)[0] += da;
        break;
      }
      case Op::sum: {
        const Node& src = nodes_[static_cast<std::size_t>(n.a)];
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < src.length; ++i) dx[i] += dy[0];
        break;
      }
      case Op::sum_slots: {
        for (std::size_t k = 0; k < n.aux_length; ++k) adj(operands_[n.aux_offset + k])[0] += dy[0];
        break;
      }
      case Op::cross_entropy: {
        const Node& src = nodes_[static_cast<std::size_t>(n.a)];
        std::vector<double> p(val(n.a), val(n.a) + src.length);
        kernels::softmax(p, p);
        double* dx = adj(n.a);
        for (std::size_t i = 0; i < src.length; ++i) {
          dx[i] += dy[0] * (p[i] - (i == n.label ? 1.0 : 0.0));
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<Element> elements_;
  std::vector<std::int32_t> operands_;
  bool backward_done_ = false;
};

}  // namespace raymoe::ad
