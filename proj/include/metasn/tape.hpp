#pragma once

// Tape-based reverse-mode automatic differentiation over TensorT.
//
// Forward evaluation is eager: every primitive appends a node holding the
// computed value, its parent indices and an op identifier. backward() walks
// the tape once in reverse creation order, which is a topological order by
// construction, accumulating adjoints additively so shared subgraphs sum
// their path contributions.
//
// A tape is single-writer: one forward/backward pass at a time. Distinct
// tapes over shared immutable parameter values may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metasn/tensor.hpp"

namespace metasn {

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

enum class Op {
  leaf,
  add,
  sub,
  mul,            // elementwise
  div,            // elementwise
  scale,          // multiply by constant
  add_scalar,     // add constant
  matmul,         // (m x k)(k x n)
  conv1d,         // valid 1-D convolution over a (len x d) input
  add_bias_rows,  // (maps x t) + per-row bias (maps)
  affine,         // x (in), W (in x out), b (out) -> (out)
  relu,           // max(0, x), also used as the hinge max-with-zero
  max_over_time,  // (maps x t) -> (maps), row-wise max
  concat,         // rank-1 concatenation
  square,
  sqrt_op,
  exp_op,
  log_op,
  sum,            // -> scalar
};

template <typename T>
class TapeT {
 public:
  using TensorType = TensorT<T>;

  std::size_t size() const { return nodes_.size(); }

  const TensorType& value(Var v) const { return node(v).value; }

  T scalar_value(Var v) const {
    const TensorType& t = node(v).value;
    if (!t.is_scalar()) {
      throw ShapeError("scalar_value: node has shape " + shape_str(t.shape));
    }
    return t.data[0];
  }

  Var leaf(TensorType value) { return push(std::move(value), Op::leaf, {}); }

  Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    TensorType out = node(a).value;
    const TensorType& vb = node(b).value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), Op::add, {a.idx, b.idx});
  }

  Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    TensorType out = node(a).value;
    const TensorType& vb = node(b).value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), Op::sub, {a.idx, b.idx});
  }

  Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    TensorType out = node(a).value;
    const TensorType& vb = node(b).value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), Op::mul, {a.idx, b.idx});
  }

  Var div(Var a, Var b) {
    require_same_shape("div", a, b);
    TensorType out = node(a).value;
    const TensorType& vb = node(b).value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] /= vb.data[i];
    return push(std::move(out), Op::div, {a.idx, b.idx});
  }

  Var scale(Var a, T c) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v *= c;
    return push(std::move(out), Op::scale, {a.idx}, c);
  }

  Var add_scalar(Var a, T c) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v += c;
    return push(std::move(out), Op::add_scalar, {a.idx}, c);
  }

  Var matmul(Var a, Var b) {
    const TensorType& va = node(a).value;
    const TensorType& vb = node(b).value;
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0]) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(va.shape) + " and " +
                       shape_str(vb.shape));
    }
    const std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    TensorType out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = va.at2(i, p);
        for (std::size_t j = 0; j < n; ++j) out.at2(i, j) += aip * vb.at2(p, j);
      }
    }
    return push(std::move(out), Op::matmul, {a.idx, b.idx});
  }

  // input (len x d), filters (maps x w x d) -> (maps x (len - w + 1))
  Var conv1d_valid(Var input, Var filters) {
    const TensorType& x = node(input).value;
    const TensorType& f = node(filters).value;
    if (x.rank() != 2 || f.rank() != 3 || x.shape[1] != f.shape[2]) {
      throw ShapeError("conv1d_valid: incompatible shapes, input " + shape_str(x.shape) +
                       ", filters " + shape_str(f.shape));
    }
    const std::size_t len = x.shape[0], d = x.shape[1];
    const std::size_t maps = f.shape[0], w = f.shape[1];
    if (len < w) {
      throw ShapeError("conv1d_valid: filter width exceeds input length, input " +
                       shape_str(x.shape) + ", filters " + shape_str(f.shape));
    }
    const std::size_t olen = len - w + 1;
    TensorType out(Shape{maps, olen});
    for (std::size_t m = 0; m < maps; ++m) {
      for (std::size_t t = 0; t < olen; ++t) {
        T acc = 0;
        for (std::size_t i = 0; i < w; ++i) {
          for (std::size_t j = 0; j < d; ++j) acc += f.at3(m, i, j) * x.at2(t + i, j);
        }
        out.at2(m, t) = acc;
      }
    }
    return push(std::move(out), Op::conv1d, {input.idx, filters.idx});
  }

  Var add_bias_rows(Var mat, Var bias) {
    const TensorType& a = node(mat).value;
    const TensorType& b = node(bias).value;
    if (a.rank() != 2 || b.rank() != 1 || a.shape[0] != b.shape[0]) {
      throw ShapeError("add_bias_rows: incompatible shapes, matrix " + shape_str(a.shape) +
                       ", bias " + shape_str(b.shape));
    }
    TensorType out = a;
    for (std::size_t m = 0; m < a.shape[0]; ++m) {
      for (std::size_t t = 0; t < a.shape[1]; ++t) out.at2(m, t) += b.data[m];
    }
    return push(std::move(out), Op::add_bias_rows, {mat.idx, bias.idx});
  }

  // x (in), weight (in x out), bias (out) -> (out)
  Var affine(Var x, Var weight, Var bias) {
    const TensorType& vx = node(x).value;
    const TensorType& vw = node(weight).value;
    const TensorType& vb = node(bias).value;
    if (vx.rank() != 1 || vw.rank() != 2 || vb.rank() != 1 || vx.shape[0] != vw.shape[0] ||
        vw.shape[1] != vb.shape[0]) {
      throw ShapeError("affine: incompatible shapes, x " + shape_str(vx.shape) + ", weight " +
                       shape_str(vw.shape) + ", bias " + shape_str(vb.shape));
    }
    const std::size_t in = vw.shape[0], out_dim = vw.shape[1];
    TensorType out(Shape{out_dim});
    for (std::size_t o = 0; o < out_dim; ++o) out.data[o] = vb.data[o];
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = vx.data[i];
      for (std::size_t o = 0; o < out_dim; ++o) out.data[o] += xi * vw.at2(i, o);
    }
    return push(std::move(out), Op::affine, {x.idx, weight.idx, bias.idx});
  }

  Var relu(Var a) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return push(std::move(out), Op::relu, {a.idx});
  }

  // (maps x t) -> (maps); gradient routes to the first maximal index on ties
  Var max_over_time(Var a) {
    const TensorType& va = node(a).value;
    if (va.rank() != 2) {
      throw ShapeError("max_over_time: expected a rank-2 feature map, got " +
                       shape_str(va.shape));
    }
    const std::size_t maps = va.shape[0], t = va.shape[1];
    TensorType out(Shape{maps});
    for (std::size_t m = 0; m < maps; ++m) {
      T best = va.at2(m, 0);
      for (std::size_t j = 1; j < t; ++j) best = std::max(best, va.at2(m, j));
      out.data[m] = best;
    }
    return push(std::move(out), Op::max_over_time, {a.idx});
  }

  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: empty operand list");
    std::size_t total = 0;
    std::vector<int> parents;
    parents.reserve(parts.size());
    for (Var p : parts) {
      const TensorType& v = node(p).value;
      if (v.rank() != 1) {
        throw ShapeError("concat: expected rank-1 operands, got " + shape_str(v.shape));
      }
      total += v.numel();
      parents.push_back(p.idx);
    }
    TensorType out(Shape{total});
    std::size_t off = 0;
    for (Var p : parts) {
      const TensorType& v = node(p).value;
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
      off += v.numel();
    }
    return push(std::move(out), Op::concat, std::move(parents));
  }

  Var square(Var a) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v *= v;
    return push(std::move(out), Op::square, {a.idx});
  }

  // Subgradient convention: d sqrt / dx at 0 is taken as 0.
  Var sqrt(Var a) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v = std::sqrt(v);
    return push(std::move(out), Op::sqrt_op, {a.idx});
  }

  Var exp(Var a) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v = std::exp(v);
    return push(std::move(out), Op::exp_op, {a.idx});
  }

  Var log(Var a) {
    TensorType out = node(a).value;
    for (auto& v : out.data) v = std::log(v);
    return push(std::move(out), Op::log_op, {a.idx});
  }

  Var sum(Var a) {
    const TensorType& va = node(a).value;
    T acc = 0;
    for (T v : va.data) acc += v;
    return push(TensorType::scalar(acc), Op::sum, {a.idx});
  }

  // Reverse pass from a scalar loss. Returns one gradient tensor per entry of
  // `params`, shaped like the parameter; parameters the loss does not reach
  // get zero gradients.
  std::vector<TensorType> backward(Var loss, std::span<const Var> params) const {
    const TensorType& lv = node(loss).value;
    if (!lv.is_scalar()) {
      throw std::invalid_argument("backward: loss must be a scalar node, got shape " +
                                  shape_str(lv.shape));
    }
    std::vector<TensorType> adj(nodes_.size());
    adj[static_cast<std::size_t>(loss.idx)] = TensorType::scalar(T(1));

    for (int i = loss.idx; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      TensorType& g = adj[static_cast<std::size_t>(i)];
      if (g.data.empty()) continue;  // loss does not depend on this node
      propagate(n, g, adj);
    }

    std::vector<TensorType> out;
    out.reserve(params.size());
    for (Var p : params) {
      TensorType& g = adj[static_cast<std::size_t>(check(p).idx)];
      if (g.data.empty()) g = TensorType(node(p).value.shape);
      out.push_back(std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    TensorType value;
    Op op = Op::leaf;
    std::vector<int> parents;
    T carg = 0;
  };

  std::vector<Node> nodes_;

  Var push(TensorType value, Op op, std::vector<int> parents, T carg = 0) {
    nodes_.push_back(Node{std::move(value), op, std::move(parents), carg});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var check(Var v) const {
    if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size())) {
      throw std::out_of_range("tape: variable index " + std::to_string(v.idx) +
                              " out of range (tape size " + std::to_string(nodes_.size()) + ")");
    }
    return v;
  }

  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(check(v).idx)]; }

  void require_same_shape(const char* op, Var a, Var b) const {
    const TensorType& va = node(a).value;
    const TensorType& vb = node(b).value;
    if (va.shape != vb.shape) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(va.shape) + " vs " +
                       shape_str(vb.shape));
    }
  }

  TensorType& adj_of(std::vector<TensorType>& adj, int idx) const {
    TensorType& g = adj[static_cast<std::size_t>(idx)];
    if (g.data.empty()) g = TensorType(nodes_[static_cast<std::size_t>(idx)].value.shape);
    return g;
  }

  void propagate(const Node& n, const TensorType& g, std::vector<TensorType>& adj) const {
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add: {
        TensorType& ga = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] += g.data[i];
        }
        break;
      }
      case Op::sub: {
        TensorType& ga = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] -= g.data[i];
        }
        break;
      }
      case Op::mul: {
        const TensorType& va = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const TensorType& vb = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        TensorType& ga = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga.data[i] += g.data[i] * vb.data[i];
          gb.data[i] += g.data[i] * va.data[i];
        }
        break;
      }
      case Op::div: {
        const TensorType& va = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const TensorType& vb = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        TensorType& ga = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          ga.data[i] += g.data[i] / vb.data[i];
          gb.data[i] -= g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
        }
        break;
      }
      case Op::scale: {
        TensorType& ga = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * n.carg;
        break;
      }
      case Op::add_scalar: {
        TensorType& ga = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        break;
      }
      case Op::matmul: {
        const TensorType& va = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const TensorType& vb = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        TensorType& ga = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        const std::size_t m = va.shape[0], k = va.shape[1], nn = vb.shape[1];
        // dA = G B^T ; dB = A^T G
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < nn; ++j) {
            const T gij = g.at2(i, j);
            for (std::size_t p = 0; p < k; ++p) {
              ga.at2(i, p) += gij * vb.at2(p, j);
              gb.at2(p, j) += gij * va.at2(i, p);
            }
          }
        }
        break;
      }
      case Op::conv1d: {
        const TensorType& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const TensorType& f = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        TensorType& gf = adj_of(adj, n.parents[1]);
        const std::size_t d = x.shape[1];
        const std::size_t maps = f.shape[0], w = f.shape[1];
        const std::size_t olen = n.value.shape[1];
        for (std::size_t m = 0; m < maps; ++m) {
          for (std::size_t t = 0; t < olen; ++t) {
            const T gmt = g.at2(m, t);
            if (gmt == T(0)) continue;
            for (std::size_t i = 0; i < w; ++i) {
              for (std::size_t j = 0; j < d; ++j) {
                gx.at2(t + i, j) += gmt * f.at3(m, i, j);
                gf.at3(m, i, j) += gmt * x.at2(t + i, j);
              }
            }
          }
        }
        break;
      }
      case Op::add_bias_rows: {
        TensorType& gm = adj_of(adj, n.parents[0]);
        TensorType& gb = adj_of(adj, n.parents[1]);
        const std::size_t maps = n.value.shape[0], t = n.value.shape[1];
        for (std::size_t m = 0; m < maps; ++m) {
          for (std::size_t j = 0; j < t; ++j) {
            gm.at2(m, j) += g.at2(m, j);
            gb.data[m] += g.at2(m, j);
          }
        }
        break;
      }
      case Op::affine: {
        const TensorType& vx = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        const TensorType& vw = nodes_[static_cast<std::size_t>(n.parents[1])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        TensorType& gw = adj_of(adj, n.parents[1]);
        TensorType& gb = adj_of(adj, n.parents[2]);
        const std::size_t in = vw.shape[0], out_dim = vw.shape[1];
        for (std::size_t o = 0; o < out_dim; ++o) gb.data[o] += g.data[o];
        for (std::size_t i = 0; i < in; ++i) {
          const T xi = vx.data[i];
          T acc = 0;
          for (std::size_t o = 0; o < out_dim; ++o) {
            acc += g.data[o] * vw.at2(i, o);
            gw.at2(i, o) += xi * g.data[o];
          }
          gx.data[i] += acc;
        }
        break;
      }
      case Op::relu: {
        const TensorType& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (x.data[i] > T(0)) gx.data[i] += g.data[i];
        }
        break;
      }
      case Op::max_over_time: {
        const TensorType& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        const std::size_t maps = x.shape[0], t = x.shape[1];
        for (std::size_t m = 0; m < maps; ++m) {
          std::size_t best = 0;
          for (std::size_t j = 1; j < t; ++j) {
            if (x.at2(m, j) > x.at2(m, best)) best = j;
          }
          gx.at2(m, best) += g.data[m];
        }
        break;
      }
      case Op::concat: {
        std::size_t off = 0;
        for (int pidx : n.parents) {
          TensorType& gp = adj_of(adj, pidx);
          for (std::size_t i = 0; i < gp.numel(); ++i) gp.data[i] += g.data[off + i];
          off += gp.numel();
        }
        break;
      }
      case Op::square: {
        const TensorType& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * T(2) * x.data[i];
        break;
      }
      case Op::sqrt_op: {
        TensorType& gx = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const T y = n.value.data[i];
          if (y > T(0)) gx.data[i] += g.data[i] / (T(2) * y);
        }
        break;
      }
      case Op::exp_op: {
        TensorType& gx = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * n.value.data[i];
        break;
      }
      case Op::log_op: {
        const TensorType& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
        TensorType& gx = adj_of(adj, n.parents[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] / x.data[i];
        break;
      }
      case Op::sum: {
        TensorType& gx = adj_of(adj, n.parents[0]);
        const T gs = g.data[0];
        for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += gs;
        break;
      }
    }
  }
};

using Tape = TapeT<double>;

}  // namespace metasn
