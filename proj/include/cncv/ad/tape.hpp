#pragma once

// Scalar reverse-mode tape.
//
// Every recorded node stores its forward value, its operand indices and the
// local partial derivative with respect to each operand. backward() sweeps the
// nodes in reverse index order, which is a valid reverse topological order
// because operands always precede their users.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "cncv/ad/param_store.hpp"
#include "cncv/errors.hpp"

namespace cncv::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Tanh,
  Exp,
  Square,
  Sum,
  Dot,
  Scale,
};

class Tape;

/// Handle to a tape node. A Var with no tape is a constant.
struct Var {
  static constexpr std::uint32_t kNoNode = UINT32_MAX;

  Tape* tape = nullptr;
  std::uint32_t index = kNoNode;
  double value = 0.0;

  Var() = default;
  Var(double v) : value(v) {}  // NOLINT(google-explicit-constructor): constants mix freely
  Var(Tape* t, std::uint32_t i, double v) : tape(t), index(i), value(v) {}

  bool is_constant() const noexcept { return tape == nullptr; }
};

class Tape {
 public:
  struct Node {
    OpKind op;
    std::uint32_t first;  // into operands_/partials_
    std::uint32_t count;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  double value(std::size_t i) const { return values_.at(i); }
  std::span<const std::uint32_t> operands(std::size_t i) const {
    const auto& n = nodes_.at(i);
    return std::span<const std::uint32_t>(operands_).subspan(n.first, n.count);
  }

  void clear() {
    nodes_.clear();
    operands_.clear();
    partials_.clear();
    values_.clear();
    adjoints_.clear();
  }

  Var leaf(double v) { return push(OpKind::Leaf, {}, {}, v); }

  /// Registers every parameter of `store` as a leaf, in flat order.
  std::vector<Var> register_params(const ParamStore& store) {
    std::vector<Var> out;
    out.reserve(store.size());
    for (double v : store.values()) out.push_back(leaf(v));
    return out;
  }

  /// Records a node. Constant operands contribute nothing and are dropped.
  Var record(OpKind op, std::span<const Var> operands, std::span<const double> partials,
             double value) {
    if (operands.size() != partials.size()) {
      throw StructuralError("Tape::record: operand/partial count mismatch");
    }
    std::uint32_t first = static_cast<std::uint32_t>(operands_.size());
    std::uint32_t count = 0;
    for (std::size_t k = 0; k < operands.size(); ++k) {
      const Var& v = operands[k];
      if (v.is_constant()) continue;
      if (v.tape != this) throw StructuralError("Tape::record: operand lives on a different tape");
      operands_.push_back(v.index);
      partials_.push_back(partials[k]);
      ++count;
    }
    nodes_.push_back({op, first, count});
    values_.push_back(value);
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1), value);
  }

  /// Reverse sweep from `loss`; returns the adjoint of every node.
  const std::vector<double>& backward(const Var& loss) {
    if (loss.tape != this || loss.index >= nodes_.size()) {
      throw StructuralError("Tape::backward: loss is not a node of this tape");
    }
    adjoints_.assign(nodes_.size(), 0.0);
    adjoints_[loss.index] = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      const double a = adjoints_[i];
      if (a == 0.0) continue;
      const Node& n = nodes_[i];
      for (std::uint32_t k = 0; k < n.count; ++k) {
        adjoints_[operands_[n.first + k]] += a * partials_[n.first + k];
      }
    }
    return adjoints_;
  }

  /// d loss / d leaf for each of the given leaves (e.g. from register_params).
  std::vector<double> gradient(const Var& loss, std::span<const Var> leaves) {
    const auto& adj = backward(loss);
    std::vector<double> g(leaves.size(), 0.0);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (!leaves[i].is_constant()) g[i] = adj.at(leaves[i].index);
    }
    return g;
  }

 private:
  Var push(OpKind op, std::initializer_list<Var> operands, std::initializer_list<double> partials,
           double value) {
    return record(op, std::span<const Var>(operands.begin(), operands.size()),
                  std::span<const double>(partials.begin(), partials.size()), value);
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> operands_;
  std::vector<double> partials_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
};

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
  if (a.tape && b.tape && a.tape != b.tape) {
    throw StructuralError("mixed-tape operands");
  }
  return a.tape ? a.tape : b.tape;
}

inline Tape* common_tape(std::span<const Var> vs) {
  Tape* t = nullptr;
  for (const auto& v : vs) {
    if (!v.tape) continue;
    if (t && v.tape != t) throw StructuralError("mixed-tape operands");
    t = v.tape;
  }
  return t;
}

inline Var binary(OpKind op, const Var& a, const Var& b, double value, double da, double db) {
  Tape* t = common_tape(a, b);
  if (!t) return Var(value);
  const Var ops[2] = {a, b};
  const double ps[2] = {da, db};
  return t->record(op, ops, ps, value);
}

inline Var unary(OpKind op, const Var& a, double value, double da) {
  if (!a.tape) return Var(value);
  const Var ops[1] = {a};
  const double ps[1] = {da};
  return a.tape->record(op, ops, ps, value);
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(OpKind::Add, a, b, a.value + b.value, 1.0, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(OpKind::Sub, a, b, a.value - b.value, 1.0, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(OpKind::Mul, a, b, a.value * b.value, b.value, a.value);
}
inline Var operator/(const Var& a, const Var& b) {
  const double q = a.value / b.value;
  return detail::binary(OpKind::Div, a, b, q, 1.0 / b.value, -q / b.value);
}
inline Var operator-(const Var& a) { return detail::unary(OpKind::Neg, a, -a.value, -1.0); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var tanh(const Var& a) {
  const double t = std::tanh(a.value);
  return detail::unary(OpKind::Tanh, a, t, 1.0 - t * t);
}
inline Var exp(const Var& a) {
  const double e = std::exp(a.value);
  return detail::unary(OpKind::Exp, a, e, e);
}
inline Var square(const Var& a) {
  return detail::unary(OpKind::Square, a, a.value * a.value, 2.0 * a.value);
}
inline Var scale(const Var& a, double c) { return detail::unary(OpKind::Scale, a, c * a.value, c); }

inline Var sum(std::span<const Var> xs) {
  Tape* t = detail::common_tape(xs);
  double s = 0.0;
  for (const auto& x : xs) s += x.value;
  if (!t) return Var(s);
  std::vector<double> ones(xs.size(), 1.0);
  return t->record(OpKind::Sum, xs, ones, s);
}

inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size()) throw StructuralError("dot: length mismatch");
  std::vector<Var> ops;
  std::vector<double> ps;
  ops.reserve(2 * a.size());
  ps.reserve(2 * a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i].value * b[i].value;
    ops.push_back(a[i]);
    ps.push_back(b[i].value);
    ops.push_back(b[i]);
    ps.push_back(a[i].value);
  }
  Tape* t = detail::common_tape(ops);
  if (!t) return Var(s);
  return t->record(OpKind::Dot, ops, ps, s);
}

}  // namespace cncv::ad
