#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "acmil/core.hpp"

namespace acmil {

/// Handle to a node on a Tape.
struct Var {
  int32_t i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode tape over dense matrices. A fresh tape is built per
/// forward pass; backward() propagates gradients to every node that
/// (transitively) depends on a differentiable leaf.
///
/// stop_gradient() and grl() are first-class nodes: the former blocks the
/// backward flow entirely, the latter rescales it by -lambda.
template <class S>
class Tape {
public:
  using M = Mat<S>;

  struct Node {
    M value;
    M grad;  // empty until touched
    std::function<void(Tape&, const M&)> back;  // pulls output grad to parents
    bool needs_grad = false;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const M& value(Var v) const { return nodes_[v.i].value; }
  const M& grad(Var v) const { return nodes_[v.i].grad; }
  bool has_grad(Var v) const { return nodes_[v.i].grad.size() > 0; }

  /// Gradient of a node, zero-filled if backward never reached it.
  M grad_or_zero(Var v) const {
    const Node& n = nodes_[v.i];
    if (n.grad.size() > 0) return n.grad;
    return M::Zero(n.value.rows(), n.value.cols());
  }

  Var leaf(M v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, true});
    return Var{size() - 1};
  }

  Var constant(M v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, false});
    return Var{size() - 1};
  }

  Var scalar(S v) {
    M m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  void accumulate(Var v, const M& g) {
    Node& n = nodes_[v.i];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(root)=1 (root must be 1x1) and sweeps the tape in reverse.
  void backward(Var root) {
    Node& r = nodes_[root.i];
    check(r.value.rows() == 1 && r.value.cols() == 1,
          "backward: root must be a scalar node");
    r.grad = M::Ones(1, 1);
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
      n.back(*this, n.grad);
    }
  }

  // ---- op builders ------------------------------------------------------

  Var matmul(Var a, Var b) {
    const M& va = value(a);
    const M& vb = value(b);
    check(va.cols() == vb.rows(), "matmul: inner dimensions disagree");
    return make(va * vb, {a, b}, [a, b](Tape& t, const M& g) {
      t.accumulate(a, g * t.value(b).transpose());
      t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  /// W*X + b with the bias broadcast across columns.
  Var linear(Var w, Var b, Var x) {
    const M& vw = value(w);
    const M& vb = value(b);
    const M& vx = value(x);
    check(vw.cols() == vx.rows() && vb.rows() == vw.rows() && vb.cols() == 1,
          "linear: shape mismatch");
    M y = vw * vx;
    y.colwise() += vb.col(0);
    return make(std::move(y), {w, b, x}, [w, b, x](Tape& t, const M& g) {
      t.accumulate(w, g * t.value(x).transpose());
      t.accumulate(b, g.rowwise().sum());
      t.accumulate(x, t.value(w).transpose() * g);
    });
  }

  Var add(Var a, Var b) {
    check(value(a).rows() == value(b).rows() &&
              value(a).cols() == value(b).cols(),
          "add: shape mismatch");
    return make(value(a) + value(b), {a, b}, [a, b](Tape& t, const M& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var scale(Var a, S s) {
    return make(value(a) * s, {a},
                [a, s](Tape& t, const M& g) { t.accumulate(a, g * s); });
  }

  Var hadamard(Var a, Var b) {
    return make(value(a).cwiseProduct(value(b)), {a, b},
                [a, b](Tape& t, const M& g) {
                  t.accumulate(a, g.cwiseProduct(t.value(b)));
                  t.accumulate(b, g.cwiseProduct(t.value(a)));
                });
  }

  Var tanh_(Var a) {
    M y = value(a).array().tanh().matrix();
    Var out = make(std::move(y), {a}, nullptr);
    set_back(out, [a, out](Tape& t, const M& g) {
      const M& y2 = t.value(out);
      t.accumulate(a, (g.array() * (S(1) - y2.array().square())).matrix());
    });
    return out;
  }

  Var sigmoid_(Var a) {
    M y = (S(1) / (S(1) + (-value(a).array()).exp())).matrix();
    Var out = make(std::move(y), {a}, nullptr);
    set_back(out, [a, out](Tape& t, const M& g) {
      const M& y2 = t.value(out);
      t.accumulate(a, (g.array() * y2.array() * (S(1) - y2.array())).matrix());
    });
    return out;
  }

  Var relu(Var a) {
    M y = value(a).cwiseMax(S(0));
    Var out = make(std::move(y), {a}, nullptr);
    set_back(out, [a, out](Tape& t, const M& g) {
      const M& y2 = t.value(out);
      t.accumulate(
          a, (g.array() * (y2.array() > S(0)).template cast<S>()).matrix());
    });
    return out;
  }

  /// Softmax over a single column vector (K x 1).
  Var softmax_col(Var a) {
    const M& x = value(a);
    check(x.cols() == 1 && x.rows() >= 1, "softmax_col: need a column vector");
    // normalize in double for a tight sum-to-one contract
    Eigen::ArrayXd xd = x.col(0).template cast<double>().array();
    xd -= xd.maxCoeff();
    Eigen::ArrayXd e = xd.exp();
    Eigen::ArrayXd y = e / e.sum();
    M ym = y.template cast<S>().matrix();
    Var out = make(std::move(ym), {a}, nullptr);
    set_back(out, [a, out](Tape& t, const M& g) {
      const M& y2 = t.value(out);
      S dot = (y2.array() * g.array()).sum();
      t.accumulate(a, (y2.array() * (g.array() - dot)).matrix());
    });
    return out;
  }

  /// Column block X[:, start : start+n].
  Var cols(Var a, int start, int n) {
    const M& x = value(a);
    check(start >= 0 && n >= 1 && start + n <= x.cols(),
          "cols: block out of range");
    return make(x.middleCols(start, n), {a},
                [a, start, n](Tape& t, const M& g) {
                  M full = M::Zero(t.value(a).rows(), t.value(a).cols());
                  full.middleCols(start, n) = g;
                  t.accumulate(a, full);
                });
  }

  Var hcat(const std::vector<Var>& parts) {
    check(!parts.empty(), "hcat: empty list");
    Eigen::Index rows = value(parts[0]).rows(), cols = 0;
    for (Var p : parts) {
      check(value(p).rows() == rows, "hcat: row mismatch");
      cols += value(p).cols();
    }
    M y(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      y.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    auto ps = parts;
    return make(std::move(y), parts, [ps](Tape& t, const M& g) {
      Eigen::Index at = 0;
      for (Var p : ps) {
        Eigen::Index w = t.value(p).cols();
        t.accumulate(p, g.middleCols(at, w));
        at += w;
      }
    });
  }

  Var vcat(const std::vector<Var>& parts) {
    check(!parts.empty(), "vcat: empty list");
    Eigen::Index cols = value(parts[0]).cols(), rows = 0;
    for (Var p : parts) {
      check(value(p).cols() == cols, "vcat: column mismatch");
      rows += value(p).rows();
    }
    M y(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      y.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    auto ps = parts;
    return make(std::move(y), parts, [ps](Tape& t, const M& g) {
      Eigen::Index at = 0;
      for (Var p : ps) {
        Eigen::Index h = t.value(p).rows();
        t.accumulate(p, g.middleRows(at, h));
        at += h;
      }
    });
  }

  /// Mean across columns: (R x C) -> (R x 1).
  Var meancols(Var a) {
    const M& x = value(a);
    S inv = S(1) / S(x.cols());
    return make(x.rowwise().mean(), {a}, [a, inv](Tape& t, const M& g) {
      t.accumulate(a, (g * inv).replicate(1, t.value(a).cols()));
    });
  }

  /// w'G for w (A x 1), G (A x K) -> (K x 1) score vector.
  Var tdot(Var w, Var g_in) {
    const M& vw = value(w);
    const M& vg = value(g_in);
    check(vw.cols() == 1 && vw.rows() == vg.rows(), "tdot: shape mismatch");
    return make(vg.transpose() * vw, {w, g_in},
                [w, g_in](Tape& t, const M& g) {
                  t.accumulate(w, t.value(g_in) * g);
                  t.accumulate(g_in, t.value(w) * g.transpose());
                });
  }

  /// Identity forward, no backward flow.
  Var stop_gradient(Var a) {
    return constant(value(a));
  }

  /// Gradient reversal: identity forward, backward multiplies by -lambda.
  Var grl(Var a, S lambda) {
    return make(value(a), {a}, [a, lambda](Tape& t, const M& g) {
      t.accumulate(a, g * (-lambda));
    });
  }

  /// Cosine similarity of two equally-shaped column vectors -> scalar node.
  /// Denominator floored at eps (softmax inputs keep it far from zero).
  Var cosine(Var a, Var b, S eps = S(1e-12)) {
    const M& u = value(a);
    const M& v = value(b);
    check(u.cols() == 1 && v.cols() == 1 && u.rows() == v.rows(),
          "cosine: need equal-length column vectors");
    S nu = u.norm(), nv = v.norm();
    S den = std::max(nu * nv, eps);
    S s = (u.transpose() * v)(0, 0);
    M y(1, 1);
    y(0, 0) = s / den;
    return make(std::move(y), {a, b},
                [a, b, nu, nv, den, s](Tape& t, const M& g) {
                  S go = g(0, 0);
                  const M& u2 = t.value(a);
                  const M& v2 = t.value(b);
                  S c = s / den;
                  // exact when den = |u||v|; treated as constant at the floor
                  if (nu > 0 && nv > 0) {
                    t.accumulate(a, go * (v2 - c * (nv / nu) * u2) / den);
                    t.accumulate(b, go * (u2 - c * (nu / nv) * v2) / den);
                  }
                });
  }

  /// Mean over all entries -> scalar.
  Var mean_all(Var a) {
    const M& x = value(a);
    S inv = S(1) / S(x.size());
    M y(1, 1);
    y(0, 0) = x.sum() * inv;
    return make(std::move(y), {a}, [a, inv](Tape& t, const M& g) {
      t.accumulate(a, M::Constant(t.value(a).rows(), t.value(a).cols(),
                                  g(0, 0) * inv));
    });
  }

  Var sum_list(const std::vector<Var>& vs) {
    check(!vs.empty(), "sum_list: empty");
    Var acc = vs[0];
    for (size_t i = 1; i < vs.size(); ++i) acc = add(acc, vs[i]);
    return acc;
  }

  // ---- generic node construction ----------------------------------------

  Var make(M value, const std::vector<Var>& parents,
           std::function<void(Tape&, const M&)> back) {
    bool ng = false;
    for (Var p : parents) ng = ng || nodes_[p.i].needs_grad;
    nodes_.push_back(Node{std::move(value), {}, ng ? std::move(back) : nullptr, ng});
    return Var{size() - 1};
  }

  void set_back(Var v, std::function<void(Tape&, const M&)> back) {
    if (nodes_[v.i].needs_grad) nodes_[v.i].back = std::move(back);
  }

private:
  std::vector<Node> nodes_;
};

}  // namespace acmil
