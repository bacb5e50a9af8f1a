#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <vector>

#include "strata/common.hpp"

namespace strata::ad {

using Arr = Eigen::ArrayXXd;

// Define-by-run reverse-mode tape over 2-D double arrays.
//
// Nodes are created in topological order; backward() walks them in reverse and
// accumulates gradients into every node (leaves included).  replay() recomputes
// the whole forward pass from the stored leaves, reproducing values bit for bit,
// which is the contract checkpointed training relies on.
//
// Reductions that feed compositing (seq_sum, seq_weighted_sum) accumulate in
// strict row order so independently written reference loops can match them
// exactly.

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,      // x * attr
  kAddScalar,  // x + attr
  kMatMul,
  kTranspose,
  kReshape,     // i0 = rows, i1 = cols (column-major element order preserved)
  kSlice,       // i0 = row0, i1 = nrows, i2 = col0, i3 = ncols
  kConcatRows,  // n-ary
  kConcatCols,  // n-ary
  kGatherRows,  // idx = source row per output row
  kRepeatRows,  // i0 = copies of a 1xC row
  kSumAll,
  kMeanAll,
  kRowSum,  // RxC -> Rx1
  kColSum,  // RxC -> 1xC
  kSeqSum,  // Rx1 -> 1x1, strict row-order accumulation
  kSeqWeightedSum,  // (values RxC, weights Rx1) -> 1xC, strict row-order accumulation
  kCumprodExcl,     // Nx1 -> (N+1)x1 exclusive prefix products
  kExp,
  kLog,
  kSqrt,
  kAbs,
  kSin,
  kCos,
  kSquare,
  kSigmoid,
  kSoftplus,   // attr = beta
  kMaxScalar,  // max(x, attr)
  kMinScalar,  // min(x, attr)
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> in;
    Arr value;
    Arr grad;
    double attr = 0.0;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    std::vector<int> idx;
  };

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  const Arr& value(Var v) const { return nodes_[v.id].value; }
  const Arr& grad(Var v) const { return nodes_[v.id].grad; }

  Var leaf(const Arr& value) { return push(Op::kLeaf, {}, value); }
  Var leaf(const MatX& value) { return leaf(Arr(value.array())); }
  Var constant(const Arr& value) { return push(Op::kConst, {}, value); }
  Var constant(const MatX& value) { return constant(Arr(value.array())); }
  Var constant_scalar(double v) { return constant(Arr(Arr::Constant(1, 1, v))); }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }
  Var div(Var a, Var b) { return binary(Op::kDiv, a, b); }

  Var neg(Var a) { return push(Op::kNeg, {a.id}, -val(a)); }
  Var scale(Var a, double c) {
    Var v = push(Op::kScale, {a.id}, val(a) * c);
    nodes_[v.id].attr = c;
    return v;
  }
  Var add_scalar(Var a, double c) {
    Var v = push(Op::kAddScalar, {a.id}, val(a) + c);
    nodes_[v.id].attr = c;
    return v;
  }

  Var matmul(Var a, Var b) {
    assert(val(a).cols() == val(b).rows());
    Arr out = (val(a).matrix() * val(b).matrix()).array();
    return push(Op::kMatMul, {a.id, b.id}, std::move(out));
  }

  Var transpose(Var a) { return push(Op::kTranspose, {a.id}, val(a).transpose()); }

  Var reshape(Var a, int rows, int cols) {
    assert(val(a).size() == static_cast<Eigen::Index>(rows) * cols);
    Arr out = Eigen::Map<const Arr>(val(a).data(), rows, cols);
    Var v = push(Op::kReshape, {a.id}, std::move(out));
    nodes_[v.id].i0 = rows;
    nodes_[v.id].i1 = cols;
    return v;
  }

  Var slice(Var a, int r0, int nr, int c0, int nc) {
    Arr out = val(a).block(r0, c0, nr, nc);
    Var v = push(Op::kSlice, {a.id}, std::move(out));
    nodes_[v.id].i0 = r0;
    nodes_[v.id].i1 = nr;
    nodes_[v.id].i2 = c0;
    nodes_[v.id].i3 = nc;
    return v;
  }
  Var rows(Var a, int r0, int nr) { return slice(a, r0, nr, 0, static_cast<int>(val(a).cols())); }
  Var cols(Var a, int c0, int nc) { return slice(a, 0, static_cast<int>(val(a).rows()), c0, nc); }

  Var concat_rows(const std::vector<Var>& parts) {
    assert(!parts.empty());
    Eigen::Index rows = 0, cols = val(parts[0]).cols();
    for (const auto& p : parts) {
      assert(val(p).cols() == cols);
      rows += val(p).rows();
    }
    Arr out(rows, cols);
    Eigen::Index r = 0;
    std::vector<int> in;
    for (const auto& p : parts) {
      out.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
      in.push_back(p.id);
    }
    return push(Op::kConcatRows, std::move(in), std::move(out));
  }

  Var concat_cols(const std::vector<Var>& parts) {
    assert(!parts.empty());
    Eigen::Index cols = 0, rows = val(parts[0]).rows();
    for (const auto& p : parts) {
      assert(val(p).rows() == rows);
      cols += val(p).cols();
    }
    Arr out(rows, cols);
    Eigen::Index c = 0;
    std::vector<int> in;
    for (const auto& p : parts) {
      out.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
      in.push_back(p.id);
    }
    return push(Op::kConcatCols, std::move(in), std::move(out));
  }

  Var gather_rows(Var a, std::vector<int> idx) {
    Arr out(static_cast<Eigen::Index>(idx.size()), val(a).cols());
    for (size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = val(a).row(idx[k]);
    Var v = push(Op::kGatherRows, {a.id}, std::move(out));
    nodes_[v.id].idx = std::move(idx);
    return v;
  }

  Var repeat_rows(Var a, int n) {
    assert(val(a).rows() == 1);
    Arr out = val(a).replicate(n, 1);
    Var v = push(Op::kRepeatRows, {a.id}, std::move(out));
    nodes_[v.id].i0 = n;
    return v;
  }

  Var sum_all(Var a) { return push(Op::kSumAll, {a.id}, Arr::Constant(1, 1, val(a).sum())); }
  Var mean_all(Var a) { return push(Op::kMeanAll, {a.id}, Arr::Constant(1, 1, val(a).mean())); }
  Var row_sum(Var a) { return push(Op::kRowSum, {a.id}, Arr(val(a).rowwise().sum())); }
  Var col_sum(Var a) { return push(Op::kColSum, {a.id}, Arr(val(a).colwise().sum())); }

  Var seq_sum(Var a) {
    assert(val(a).cols() == 1);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < val(a).rows(); ++i) acc += val(a)(i, 0);
    return push(Op::kSeqSum, {a.id}, Arr::Constant(1, 1, acc));
  }

  Var seq_weighted_sum(Var values, Var weights) {
    const Arr& v = val(values);
    const Arr& w = val(weights);
    assert(w.cols() == 1 && w.rows() == v.rows());
    Arr out = Arr::Zero(1, v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(0, c) += w(i, 0) * v(i, c);
    return push(Op::kSeqWeightedSum, {values.id, weights.id}, std::move(out));
  }

  Var cumprod_excl(Var a) {
    const Arr& x = val(a);
    assert(x.cols() == 1);
    Eigen::Index n = x.rows();
    Arr out(n + 1, 1);
    out(0, 0) = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) out(i + 1, 0) = out(i, 0) * x(i, 0);
    return push(Op::kCumprodExcl, {a.id}, std::move(out));
  }

  Var exp(Var a) { return push(Op::kExp, {a.id}, val(a).exp()); }
  Var log(Var a) { return push(Op::kLog, {a.id}, val(a).log()); }
  Var sqrt(Var a) { return push(Op::kSqrt, {a.id}, val(a).sqrt()); }
  Var abs(Var a) { return push(Op::kAbs, {a.id}, val(a).abs()); }
  Var sin(Var a) { return push(Op::kSin, {a.id}, val(a).sin()); }
  Var cos(Var a) { return push(Op::kCos, {a.id}, val(a).cos()); }
  Var square(Var a) { return push(Op::kSquare, {a.id}, val(a).square()); }

  Var sigmoid(Var a) { return push(Op::kSigmoid, {a.id}, stable_sigmoid(val(a))); }

  Var softplus(Var a, double beta) {
    Var v = push(Op::kSoftplus, {a.id}, stable_softplus(val(a), beta));
    nodes_[v.id].attr = beta;
    return v;
  }

  Var max_scalar(Var a, double c) {
    Var v = push(Op::kMaxScalar, {a.id}, val(a).max(c));
    nodes_[v.id].attr = c;
    return v;
  }
  Var min_scalar(Var a, double c) {
    Var v = push(Op::kMinScalar, {a.id}, val(a).min(c));
    nodes_[v.id].attr = c;
    return v;
  }

  //! Reverse pass from a 1x1 output; gradients land in every node's grad field.
  void backward(Var out) {
    assert(val(out).rows() == 1 && val(out).cols() == 1);
    for (auto& n : nodes_) n.grad = Arr::Zero(n.value.rows(), n.value.cols());
    nodes_[out.id].grad(0, 0) = 1.0;
    for (int id = out.id; id >= 0; --id) backward_node(id);
  }

  //! Recompute every non-leaf value from the stored leaves, in creation order.
  void replay() {
    for (auto& n : nodes_) recompute(n);
  }

 private:
  std::vector<Node> nodes_;

  const Arr& val(Var v) const { return nodes_[v.id].value; }

  Var push(Op op, std::vector<int> in, Arr value) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  static Arr stable_sigmoid(const Arr& x) {
    Arr out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double v = x(i);
      out(i) = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return out;
  }

  static Arr stable_softplus(const Arr& x, double beta) {
    Arr out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double z = beta * x(i);
      out(i) = z > 0.0 ? x(i) + std::log1p(std::exp(-z)) / beta : std::log1p(std::exp(z)) / beta;
    }
    return out;
  }

  //! Shapes (r,c) broadcast against each other when each mismatched dim is 1.
  static void broadcast_shape(const Arr& a, const Arr& b, Eigen::Index& r, Eigen::Index& c) {
    r = std::max(a.rows(), b.rows());
    c = std::max(a.cols(), b.cols());
    assert((a.rows() == r || a.rows() == 1) && (b.rows() == r || b.rows() == 1));
    assert((a.cols() == c || a.cols() == 1) && (b.cols() == c || b.cols() == 1));
  }

  static double bval(const Arr& a, Eigen::Index i, Eigen::Index j) {
    return a(a.rows() == 1 ? 0 : i, a.cols() == 1 ? 0 : j);
  }

  Var binary(Op op, Var a, Var b) {
    const Arr& A = val(a);
    const Arr& B = val(b);
    Eigen::Index r, c;
    broadcast_shape(A, B, r, c);
    Arr out(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        double x = bval(A, i, j), y = bval(B, i, j);
        switch (op) {
          case Op::kAdd: out(i, j) = x + y; break;
          case Op::kSub: out(i, j) = x - y; break;
          case Op::kMul: out(i, j) = x * y; break;
          case Op::kDiv: out(i, j) = x / y; break;
          default: assert(false);
        }
      }
    return push(op, {a.id, b.id}, std::move(out));
  }

  //! Accumulate dOut (full shape) into the gradient of input `in`, reducing broadcast dims.
  void accum_bcast(int in, const Arr& dOut) {
    Arr& g = nodes_[in].grad;
    if (g.rows() == dOut.rows() && g.cols() == dOut.cols()) {
      g += dOut;
    } else if (g.rows() == 1 && g.cols() == 1) {
      g(0, 0) += dOut.sum();
    } else if (g.rows() == 1) {
      g += dOut.colwise().sum();
    } else {
      g += dOut.rowwise().sum();
    }
  }

  void backward_node(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 || (n.grad == 0.0).all()) {
      if (n.op != Op::kLeaf && n.op != Op::kConst) return;
    }
    const Arr& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kAdd:
        accum_bcast(n.in[0], g);
        accum_bcast(n.in[1], g);
        break;
      case Op::kSub:
        accum_bcast(n.in[0], g);
        accum_bcast(n.in[1], -g);
        break;
      case Op::kMul: {
        const Arr& A = nodes_[n.in[0]].value;
        const Arr& B = nodes_[n.in[1]].value;
        accum_bcast(n.in[0], bcast_mul(g, B));
        accum_bcast(n.in[1], bcast_mul(g, A));
        break;
      }
      case Op::kDiv: {
        const Arr& A = nodes_[n.in[0]].value;
        const Arr& B = nodes_[n.in[1]].value;
        Arr da(g.rows(), g.cols()), db(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i)
          for (Eigen::Index j = 0; j < g.cols(); ++j) {
            double y = bval(B, i, j);
            da(i, j) = g(i, j) / y;
            db(i, j) = -g(i, j) * bval(A, i, j) / (y * y);
          }
        accum_bcast(n.in[0], da);
        accum_bcast(n.in[1], db);
        break;
      }
      case Op::kNeg:
        nodes_[n.in[0]].grad -= g;
        break;
      case Op::kScale:
        nodes_[n.in[0]].grad += g * n.attr;
        break;
      case Op::kAddScalar:
        nodes_[n.in[0]].grad += g;
        break;
      case Op::kMatMul: {
        const Arr& A = nodes_[n.in[0]].value;
        const Arr& B = nodes_[n.in[1]].value;
        nodes_[n.in[0]].grad += (g.matrix() * B.matrix().transpose()).array();
        nodes_[n.in[1]].grad += (A.matrix().transpose() * g.matrix()).array();
        break;
      }
      case Op::kTranspose:
        nodes_[n.in[0]].grad += g.transpose();
        break;
      case Op::kReshape: {
        Arr& gin = nodes_[n.in[0]].grad;
        Eigen::Map<const Arr> back(g.data(), gin.rows(), gin.cols());
        gin += back;
        break;
      }
      case Op::kSlice:
        nodes_[n.in[0]].grad.block(n.i0, n.i2, n.i1, n.i3) += g;
        break;
      case Op::kConcatRows: {
        Eigen::Index r = 0;
        for (int in : n.in) {
          Arr& gin = nodes_[in].grad;
          gin += g.middleRows(r, gin.rows());
          r += gin.rows();
        }
        break;
      }
      case Op::kConcatCols: {
        Eigen::Index c = 0;
        for (int in : n.in) {
          Arr& gin = nodes_[in].grad;
          gin += g.middleCols(c, gin.cols());
          c += gin.cols();
        }
        break;
      }
      case Op::kGatherRows: {
        Arr& gin = nodes_[n.in[0]].grad;
        for (size_t k = 0; k < n.idx.size(); ++k)
          gin.row(n.idx[k]) += g.row(static_cast<Eigen::Index>(k));
        break;
      }
      case Op::kRepeatRows:
        nodes_[n.in[0]].grad += g.colwise().sum();
        break;
      case Op::kSumAll:
        nodes_[n.in[0]].grad += g(0, 0);
        break;
      case Op::kMeanAll:
        nodes_[n.in[0]].grad += g(0, 0) / static_cast<double>(nodes_[n.in[0]].value.size());
        break;
      case Op::kRowSum: {
        Arr& gin = nodes_[n.in[0]].grad;
        gin += g.replicate(1, gin.cols());
        break;
      }
      case Op::kColSum: {
        Arr& gin = nodes_[n.in[0]].grad;
        gin += g.replicate(gin.rows(), 1);
        break;
      }
      case Op::kSeqSum:
        nodes_[n.in[0]].grad += g(0, 0);
        break;
      case Op::kSeqWeightedSum: {
        const Arr& v = nodes_[n.in[0]].value;
        const Arr& w = nodes_[n.in[1]].value;
        Arr& gv = nodes_[n.in[0]].grad;
        Arr& gw = nodes_[n.in[1]].grad;
        for (Eigen::Index i = 0; i < v.rows(); ++i) {
          double acc = 0.0;
          for (Eigen::Index c = 0; c < v.cols(); ++c) {
            gv(i, c) += w(i, 0) * g(0, c);
            acc += g(0, c) * v(i, c);
          }
          gw(i, 0) += acc;
        }
        break;
      }
      case Op::kCumprodExcl: {
        const Arr& x = nodes_[n.in[0]].value;
        const Arr& P = n.value;
        Arr& gin = nodes_[n.in[0]].grad;
        Eigen::Index N = x.rows();
        // dL/dx_m = P_m * B_m with B_m = g_{m+1} + x_{m+1} * B_{m+1}; division-free,
        // so zero entries in x are handled exactly.
        double B = 0.0;
        for (Eigen::Index m = N - 1; m >= 0; --m) {
          B = g(m + 1, 0) + (m + 1 < N ? x(m + 1, 0) * B : 0.0);
          gin(m, 0) += P(m, 0) * B;
        }
        break;
      }
      case Op::kExp:
        nodes_[n.in[0]].grad += g * n.value;
        break;
      case Op::kLog:
        nodes_[n.in[0]].grad += g / nodes_[n.in[0]].value;
        break;
      case Op::kSqrt:
        nodes_[n.in[0]].grad += g / (2.0 * n.value);
        break;
      case Op::kAbs:
        nodes_[n.in[0]].grad += g * nodes_[n.in[0]].value.sign();
        break;
      case Op::kSin:
        nodes_[n.in[0]].grad += g * nodes_[n.in[0]].value.cos();
        break;
      case Op::kCos:
        nodes_[n.in[0]].grad -= g * nodes_[n.in[0]].value.sin();
        break;
      case Op::kSquare:
        nodes_[n.in[0]].grad += g * 2.0 * nodes_[n.in[0]].value;
        break;
      case Op::kSigmoid:
        nodes_[n.in[0]].grad += g * n.value * (1.0 - n.value);
        break;
      case Op::kSoftplus:
        nodes_[n.in[0]].grad += g * stable_sigmoid(nodes_[n.in[0]].value * n.attr);
        break;
      case Op::kMaxScalar:
        nodes_[n.in[0]].grad += g * (nodes_[n.in[0]].value > n.attr).cast<double>();
        break;
      case Op::kMinScalar:
        nodes_[n.in[0]].grad += g * (nodes_[n.in[0]].value < n.attr).cast<double>();
        break;
    }
  }

  static Arr bcast_mul(const Arr& g, const Arr& other) {
    Arr out(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) out(i, j) = g(i, j) * bval(other, i, j);
    return out;
  }

  void recompute(Node& n) {
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        return;
      default:
        break;
    }
    auto v = [&](int id) -> const Arr& { return nodes_[id].value; };
    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv: {
        const Arr& A = v(n.in[0]);
        const Arr& B = v(n.in[1]);
        for (Eigen::Index i = 0; i < n.value.rows(); ++i)
          for (Eigen::Index j = 0; j < n.value.cols(); ++j) {
            double x = bval(A, i, j), y = bval(B, i, j);
            double r = 0.0;
            if (n.op == Op::kAdd) r = x + y;
            else if (n.op == Op::kSub) r = x - y;
            else if (n.op == Op::kMul) r = x * y;
            else r = x / y;
            n.value(i, j) = r;
          }
        break;
      }
      case Op::kNeg: n.value = -v(n.in[0]); break;
      case Op::kScale: n.value = v(n.in[0]) * n.attr; break;
      case Op::kAddScalar: n.value = v(n.in[0]) + n.attr; break;
      case Op::kMatMul: n.value = (v(n.in[0]).matrix() * v(n.in[1]).matrix()).array(); break;
      case Op::kTranspose: n.value = v(n.in[0]).transpose(); break;
      case Op::kReshape: n.value = Eigen::Map<const Arr>(v(n.in[0]).data(), n.i0, n.i1); break;
      case Op::kSlice: n.value = v(n.in[0]).block(n.i0, n.i2, n.i1, n.i3); break;
      case Op::kConcatRows: {
        Eigen::Index r = 0;
        for (int in : n.in) {
          n.value.middleRows(r, v(in).rows()) = v(in);
          r += v(in).rows();
        }
        break;
      }
      case Op::kConcatCols: {
        Eigen::Index c = 0;
        for (int in : n.in) {
          n.value.middleCols(c, v(in).cols()) = v(in);
          c += v(in).cols();
        }
        break;
      }
      case Op::kGatherRows:
        for (size_t k = 0; k < n.idx.size(); ++k)
          n.value.row(static_cast<Eigen::Index>(k)) = v(n.in[0]).row(n.idx[k]);
        break;
      case Op::kRepeatRows: n.value = v(n.in[0]).replicate(n.i0, 1); break;
      case Op::kSumAll: n.value(0, 0) = v(n.in[0]).sum(); break;
      case Op::kMeanAll: n.value(0, 0) = v(n.in[0]).mean(); break;
      case Op::kRowSum: n.value = v(n.in[0]).rowwise().sum(); break;
      case Op::kColSum: n.value = v(n.in[0]).colwise().sum(); break;
      case Op::kSeqSum: {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < v(n.in[0]).rows(); ++i) acc += v(n.in[0])(i, 0);
        n.value(0, 0) = acc;
        break;
      }
      case Op::kSeqWeightedSum: {
        const Arr& vals = v(n.in[0]);
        const Arr& w = v(n.in[1]);
        n.value.setZero();
        for (Eigen::Index i = 0; i < vals.rows(); ++i)
          for (Eigen::Index c = 0; c < vals.cols(); ++c) n.value(0, c) += w(i, 0) * vals(i, c);
        break;
      }
      case Op::kCumprodExcl: {
        const Arr& x = v(n.in[0]);
        n.value(0, 0) = 1.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) n.value(i + 1, 0) = n.value(i, 0) * x(i, 0);
        break;
      }
      case Op::kExp: n.value = v(n.in[0]).exp(); break;
      case Op::kLog: n.value = v(n.in[0]).log(); break;
      case Op::kSqrt: n.value = v(n.in[0]).sqrt(); break;
      case Op::kAbs: n.value = v(n.in[0]).abs(); break;
      case Op::kSin: n.value = v(n.in[0]).sin(); break;
      case Op::kCos: n.value = v(n.in[0]).cos(); break;
      case Op::kSquare: n.value = v(n.in[0]).square(); break;
      case Op::kSigmoid: n.value = stable_sigmoid(v(n.in[0])); break;
      case Op::kSoftplus: n.value = stable_softplus(v(n.in[0]), n.attr); break;
      case Op::kMaxScalar: n.value = v(n.in[0]).max(n.attr); break;
      case Op::kMinScalar: n.value = v(n.in[0]).min(n.attr); break;
      case Op::kLeaf:
      case Op::kConst: break;
    }
  }
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator+(Var a, double c) { return a.tape->add_scalar(a, c); }
inline Var operator+(double c, Var a) { return a.tape->add_scalar(a, c); }
inline Var operator-(Var a, double c) { return a.tape->add_scalar(a, -c); }
inline Var operator-(double c, Var a) { return a.tape->add_scalar(a.tape->neg(a), c); }
inline Var operator*(Var a, double c) { return a.tape->scale(a, c); }
inline Var operator*(double c, Var a) { return a.tape->scale(a, c); }
inline Var operator/(Var a, double c) { return a.tape->scale(a, 1.0 / c); }

//! sqrt(max(x, floor)) — keeps gradients finite near zero.
inline Var sqrt_safe(Var a, double floor = 1e-30) { return a.tape->sqrt(a.tape->max_scalar(a, floor)); }

}  // namespace strata::ad
