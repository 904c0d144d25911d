#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "oawam/errors.hpp"

namespace oawam::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using MaskMat = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// A trainable tensor. Gradients are accumulated here by the caller after each
// tape backward (see Tape::accumulate_param_grads), never by the tape itself,
// so independent tapes can run in parallel and reduce in a fixed order.
template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
class Tape;

// A handle to one tape node; free functions below build the graph.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int i = -1;
  bool valid() const { return tape != nullptr && i >= 0; }
};

// Append-only reverse-mode tape. Node order is a topological order by
// construction; backward walks it once in reverse.
template <typename S>
class Tape {
 public:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    std::function<void(Tape&)> backward;  // may be empty (leaves/constants)
    Parameter<S>* param = nullptr;
    bool needs_grad = false;
  };

  using Var = oawam::ad::Var<S>;

  Var leaf(Parameter<S>& p) {
    const auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    const int idx = push(p.value, true);
    nodes_[static_cast<std::size_t>(idx)].param = &p;
    param_nodes_[&p] = idx;
    return Var{this, idx};
  }

  Var constant(Mat<S> v) { return Var{this, push(std::move(v), false)}; }

  // A differentiable non-parameter input (for probing input gradients).
  Var input(Mat<S> v) { return Var{this, push(std::move(v), true)}; }

  const Mat<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.i)].value; }

  const Mat<S>& grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.i)];
    if (n.grad.size() == 0) {
      const_cast<Node&>(n).grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  Mat<S>& grad_ref(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool needs_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

  // Seeds d(loss)/d(loss) = seed and propagates. `loss` must be 1x1.
  void backward(Var loss, S seed = S(1)) {
    Node& ln = nodes_[static_cast<std::size_t>(loss.i)];
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
      throw ContractError("tape: backward target must be a scalar node");
    }
    grad_ref(loss.i)(0, 0) += seed;
    for (int i = loss.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this);
    }
  }

  // Adds scale * (leaf grad) into each touched Parameter's grad buffer.
  void accumulate_param_grads(S scale = S(1)) {
    for (const auto& [param, idx] : param_nodes_) {
      Node& n = nodes_[static_cast<std::size_t>(idx)];
      if (n.grad.size() == 0) continue;
      if (param->grad.size() == 0) param->zero_grad();
      param->grad += scale * n.grad;
    }
  }

  int push(Mat<S> v, bool needs) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::map<Parameter<S>*, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise / linear ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(b.i);
  const int out = t.push(t.value(a) * t.value(b), needs);
  if (needs) {
    t.node(out).backward = [a, b, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i).noalias() += g * tp.value(b).transpose();
      if (tp.needs_grad(b.i)) tp.grad_ref(b.i).noalias() += tp.value(a).transpose() * g;
    };
  }
  return Var<S>{&t, out};
}

// y = a * b^T (keeps output-projection tables in row-major vocab layout).
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(b.i);
  const int out = t.push(t.value(a) * t.value(b).transpose(), needs);
  if (needs) {
    t.node(out).backward = [a, b, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i).noalias() += g * tp.value(b);
      if (tp.needs_grad(b.i)) tp.grad_ref(b.i).noalias() += g.transpose() * tp.value(a);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(b.i);
  const int out = t.push(t.value(a) + t.value(b), needs);
  if (needs) {
    t.node(out).backward = [a, b, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i) += g;
      if (tp.needs_grad(b.i)) tp.grad_ref(b.i) += g;
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(b.i);
  const int out = t.push(t.value(a) - t.value(b), needs);
  if (needs) {
    t.node(out).backward = [a, b, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i) += g;
      if (tp.needs_grad(b.i)) tp.grad_ref(b.i) -= g;
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> cmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(b.i);
  const int out = t.push(t.value(a).cwiseProduct(t.value(b)), needs);
  if (needs) {
    t.node(out).backward = [a, b, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i) += g.cwiseProduct(tp.value(b));
      if (tp.needs_grad(b.i)) tp.grad_ref(b.i) += g.cwiseProduct(tp.value(a));
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> scale(Var<S> a, S alpha) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(t.value(a) * alpha, needs);
  if (needs) {
    t.node(out).backward = [a, alpha, out](Tape<S>& tp) {
      tp.grad_ref(a.i) += alpha * tp.grad_ref(out);
    };
  }
  return Var<S>{&t, out};
}

// y = a + bias, bias broadcast over rows (bias is 1 x cols).
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> bias) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i) || t.needs_grad(bias.i);
  Mat<S> v = t.value(a);
  v.rowwise() += t.value(bias).row(0);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, bias, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(a.i)) tp.grad_ref(a.i) += g;
      if (tp.needs_grad(bias.i)) tp.grad_ref(bias.i).row(0) += g.colwise().sum();
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.tape->value(a));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> rows_gather(Var<S> a, std::shared_ptr<const std::vector<int>> idx) {
  Tape<S>& t = *a.tape;
  const Mat<S>& av = t.value(a);
  Mat<S> v(static_cast<Eigen::Index>(idx->size()), av.cols());
  for (std::size_t r = 0; r < idx->size(); ++r) {
    v.row(static_cast<Eigen::Index>(r)) = av.row((*idx)[r]);
  }
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, idx, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Mat<S>& ga = tp.grad_ref(a.i);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        ga.row((*idx)[r]) += g.row(static_cast<Eigen::Index>(r));
      }
    };
  }
  return Var<S>{&t, out};
}

// base with base[idx[r], :] := rows[r, :]; other rows bitwise untouched.
template <typename S>
Var<S> rows_scatter(Var<S> base, Var<S> rows, std::shared_ptr<const std::vector<int>> idx) {
  Tape<S>& t = *base.tape;
  if (static_cast<Eigen::Index>(idx->size()) != t.value(rows).rows()) {
    throw ContractError("rows_scatter: index count does not match row count");
  }
  Mat<S> v = t.value(base);
  const Mat<S>& rv = t.value(rows);
  for (std::size_t r = 0; r < idx->size(); ++r) {
    v.row((*idx)[r]) = rv.row(static_cast<Eigen::Index>(r));
  }
  const bool needs = t.needs_grad(base.i) || t.needs_grad(rows.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [base, rows, idx, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      if (tp.needs_grad(rows.i)) {
        Mat<S>& gr = tp.grad_ref(rows.i);
        for (std::size_t r = 0; r < idx->size(); ++r) {
          gr.row(static_cast<Eigen::Index>(r)) += g.row((*idx)[r]);
        }
      }
      if (tp.needs_grad(base.i)) {
        Mat<S> gb = g;
        for (std::size_t r = 0; r < idx->size(); ++r) {
          gb.row((*idx)[r]).setZero();
        }
        tp.grad_ref(base.i) += gb;
      }
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> slice_cols(Var<S> a, int c0, int n) {
  Tape<S>& t = *a.tape;
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(t.value(a).middleCols(c0, n), needs);
  if (needs) {
    t.node(out).backward = [a, c0, n, out](Tape<S>& tp) {
      tp.grad_ref(a.i).middleCols(c0, n) += tp.grad_ref(out);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.front().tape;
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    cols += t.value(p).cols();
    needs = needs || t.needs_grad(p.i);
  }
  Mat<S> v(t.value(parts.front()).rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    const Mat<S>& pv = t.value(p);
    v.middleCols(c, pv.cols()) = pv;
    c += pv.cols();
  }
  const int out = t.push(std::move(v), needs);
  if (needs) {
    auto parts_copy = std::make_shared<std::vector<Var<S>>>(parts);
    t.node(out).backward = [parts_copy, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Eigen::Index c = 0;
      for (const auto& p : *parts_copy) {
        const Eigen::Index w = tp.value(p).cols();
        if (tp.needs_grad(p.i)) tp.grad_ref(p.i) += g.middleCols(c, w);
        c += w;
      }
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.front().tape;
  Eigen::Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    rows += t.value(p).rows();
    needs = needs || t.needs_grad(p.i);
  }
  Mat<S> v(rows, t.value(parts.front()).cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    const Mat<S>& pv = t.value(p);
    v.middleRows(r, pv.rows()) = pv;
    r += pv.rows();
  }
  const int out = t.push(std::move(v), needs);
  if (needs) {
    auto parts_copy = std::make_shared<std::vector<Var<S>>>(parts);
    t.node(out).backward = [parts_copy, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Eigen::Index r = 0;
      for (const auto& p : *parts_copy) {
        const Eigen::Index h = tp.value(p).rows();
        if (tp.needs_grad(p.i)) tp.grad_ref(p.i) += g.middleRows(r, h);
        r += h;
      }
    };
  }
  return Var<S>{&t, out};
}

// ---------------------------------------------------------------------------
// Nonlinearities and norms
// ---------------------------------------------------------------------------

template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  const S inv_sqrt2 = S(0.7071067811865475244);
  Mat<S> v = x.unaryExpr([&](S e) {
    return S(0.5) * e * (S(1) + std::erf(e * inv_sqrt2));
  });
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, out](Tape<S>& tp) {
      const Mat<S>& x = tp.value(a);
      const Mat<S>& g = tp.grad_ref(out);
      const S inv_sqrt2 = S(0.7071067811865475244);
      const S inv_sqrt2pi = S(0.3989422804014326779);
      Mat<S> d = x.unaryExpr([&](S e) {
        const S cdf = S(0.5) * (S(1) + std::erf(e * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * e * e);
        return cdf + e * pdf;
      });
      tp.grad_ref(a.i) += g.cwiseProduct(d);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  Mat<S> v = x.unaryExpr([](S e) { return e / (S(1) + std::exp(-e)); });
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, out](Tape<S>& tp) {
      const Mat<S>& x = tp.value(a);
      const Mat<S>& g = tp.grad_ref(out);
      Mat<S> d = x.unaryExpr([](S e) {
        const S sig = S(1) / (S(1) + std::exp(-e));
        return sig * (S(1) + e * (S(1) - sig));
      });
      tp.grad_ref(a.i) += g.cwiseProduct(d);
    };
  }
  return Var<S>{&t, out};
}

// Scale-only RMS normalization per row: y = x / sqrt(mean(x^2) + eps) .* gain.
template <typename S>
Var<S> rmsnorm_rows(Var<S> a, Var<S> gain, S eps) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  const Eigen::Index R = x.rows(), C = x.cols();
  auto inv_rms = std::make_shared<Mat<S>>(R, 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    (*inv_rms)(r, 0) = S(1) / std::sqrt(x.row(r).squaredNorm() / S(C) + eps);
  }
  Mat<S> v(R, C);
  const Mat<S>& gv = t.value(gain);
  for (Eigen::Index r = 0; r < R; ++r) {
    v.row(r) = (x.row(r) * (*inv_rms)(r, 0)).cwiseProduct(gv.row(0));
  }
  const bool needs = t.needs_grad(a.i) || t.needs_grad(gain.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, gain, inv_rms, out](Tape<S>& tp) {
      const Mat<S>& x = tp.value(a);
      const Mat<S>& gv = tp.value(gain);
      const Mat<S>& g = tp.grad_ref(out);
      const Eigen::Index R = x.rows(), C = x.cols();
      if (tp.needs_grad(gain.i)) {
        Mat<S>& gg = tp.grad_ref(gain.i);
        for (Eigen::Index r = 0; r < R; ++r) {
          gg.row(0) += g.row(r).cwiseProduct(x.row(r)) * (*inv_rms)(r, 0);
        }
      }
      if (tp.needs_grad(a.i)) {
        Mat<S>& ga = tp.grad_ref(a.i);
        for (Eigen::Index r = 0; r < R; ++r) {
          const S ir = (*inv_rms)(r, 0);
          const auto gy = g.row(r).cwiseProduct(gv.row(0));
          const S dot = gy.cwiseProduct(x.row(r)).sum();
          ga.row(r) += gy * ir - x.row(r) * (dot * ir * ir * ir / S(C));
        }
      }
    };
  }
  return Var<S>{&t, out};
}

// Full LayerNorm per row with affine gain/bias (1 x cols each).
template <typename S>
Var<S> layernorm_rows(Var<S> a, Var<S> gain, Var<S> bias, S eps) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  const Eigen::Index R = x.rows(), C = x.cols();
  auto xhat = std::make_shared<Mat<S>>(R, C);
  auto inv_std = std::make_shared<Mat<S>>(R, 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)(r, 0) = is;
    xhat->row(r) = (x.row(r).array() - mu) * is;
  }
  const Mat<S>& gv = t.value(gain);
  const Mat<S>& bv = t.value(bias);
  Mat<S> v(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    v.row(r) = xhat->row(r).cwiseProduct(gv.row(0)) + bv.row(0);
  }
  const bool needs = t.needs_grad(a.i) || t.needs_grad(gain.i) || t.needs_grad(bias.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, gain, bias, xhat, inv_std, out](Tape<S>& tp) {
      const Mat<S>& gv = tp.value(gain);
      const Mat<S>& g = tp.grad_ref(out);
      const Eigen::Index R = g.rows(), C = g.cols();
      if (tp.needs_grad(bias.i)) tp.grad_ref(bias.i).row(0) += g.colwise().sum();
      if (tp.needs_grad(gain.i)) {
        Mat<S>& gg = tp.grad_ref(gain.i);
        for (Eigen::Index r = 0; r < R; ++r) {
          gg.row(0) += g.row(r).cwiseProduct(xhat->row(r));
        }
      }
      if (tp.needs_grad(a.i)) {
        Mat<S>& ga = tp.grad_ref(a.i);
        for (Eigen::Index r = 0; r < R; ++r) {
          const auto gy = g.row(r).cwiseProduct(gv.row(0));
          const S m1 = gy.mean();
          const S m2 = gy.cwiseProduct(xhat->row(r)).mean();
          ga.row(r) +=
              ((gy.array() - m1) - xhat->row(r).array() * m2).matrix() * (*inv_std)(r, 0);
        }
      }
    };
  }
  return Var<S>{&t, out};
}

// ---------------------------------------------------------------------------
// Rotary position embedding (rotate-half form, applied per head block)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> rope(Var<S> a, std::shared_ptr<const std::vector<int>> positions, int head_dim,
            S theta) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  const Eigen::Index R = x.rows(), C = x.cols();
  const int half = head_dim / 2;
  if (head_dim % 2 != 0 || C % head_dim != 0) {
    throw ContractError("rope: head_dim must be even and divide the width");
  }
  auto cs = std::make_shared<Mat<S>>(R, half);
  auto sn = std::make_shared<Mat<S>>(R, half);
  for (Eigen::Index r = 0; r < R; ++r) {
    const S p = static_cast<S>((*positions)[static_cast<std::size_t>(r)]);
    for (int j = 0; j < half; ++j) {
      const S freq = std::pow(theta, S(-2) * S(j) / S(head_dim));
      (*cs)(r, j) = std::cos(p * freq);
      (*sn)(r, j) = std::sin(p * freq);
    }
  }
  const int heads = static_cast<int>(C) / head_dim;
  Mat<S> v(R, C);
  for (int h = 0; h < heads; ++h) {
    const int base = h * head_dim;
    for (Eigen::Index r = 0; r < R; ++r) {
      for (int j = 0; j < half; ++j) {
        const S x1 = x(r, base + j);
        const S x2 = x(r, base + half + j);
        v(r, base + j) = x1 * (*cs)(r, j) - x2 * (*sn)(r, j);
        v(r, base + half + j) = x2 * (*cs)(r, j) + x1 * (*sn)(r, j);
      }
    }
  }
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, cs, sn, head_dim, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Mat<S>& ga = tp.grad_ref(a.i);
      const int half = head_dim / 2;
      const int heads = static_cast<int>(g.cols()) / head_dim;
      for (int h = 0; h < heads; ++h) {
        const int base = h * head_dim;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          for (int j = 0; j < half; ++j) {
            const S g1 = g(r, base + j);
            const S g2 = g(r, base + half + j);
            ga(r, base + j) += g1 * (*cs)(r, j) + g2 * (*sn)(r, j);
            ga(r, base + half + j) += -g1 * (*sn)(r, j) + g2 * (*cs)(r, j);
          }
        }
      }
    };
  }
  return Var<S>{&t, out};
}

// ---------------------------------------------------------------------------
// Masked multi-head attention core
// ---------------------------------------------------------------------------

// q, k, v: L x D with `heads` contiguous head blocks. allow(i, j) != 0 lets
// query i read key j; a row with no allowed key yields a zero output row.
// bias, if valid, is (heads*L) x L: vertically stacked per-head logit biases.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v,
                 std::shared_ptr<const MaskMat> allow, int heads, Var<S> bias,
                 const std::string& ctx,
                 std::shared_ptr<Mat<S>>* probs_export = nullptr) {
  Tape<S>& t = *q.tape;
  const Mat<S>& qv = t.value(q);
  const Mat<S>& kv = t.value(k);
  const Mat<S>& vv = t.value(v);
  const Eigen::Index L = qv.rows(), D = qv.cols();
  const int dh = static_cast<int>(D) / heads;
  const S inv_scale = S(1) / std::sqrt(static_cast<S>(dh));
  const bool has_bias = bias.valid();

  auto probs = std::make_shared<Mat<S>>(heads * L, L);
  Mat<S> out_v(L, D);
  for (int h = 0; h < heads; ++h) {
    const auto qh = qv.middleCols(h * dh, dh);
    const auto kh = kv.middleCols(h * dh, dh);
    Mat<S> logits = qh * kh.transpose() * inv_scale;
    if (has_bias) logits += t.value(bias).middleRows(h * L, L);
    for (Eigen::Index i = 0; i < L; ++i) {
      S row_max = -std::numeric_limits<S>::infinity();
      for (Eigen::Index j = 0; j < L; ++j) {
        if ((*allow)(i, j)) row_max = std::max(row_max, logits(i, j));
      }
      if (row_max == -std::numeric_limits<S>::infinity()) {
        probs->row(h * L + i).setZero();  // fully masked query row
        continue;
      }
      if (!std::isfinite(row_max)) {
        throw RuntimeFailure("attention: non-finite logits at " + ctx);
      }
      S denom = S(0);
      for (Eigen::Index j = 0; j < L; ++j) {
        const S e = (*allow)(i, j) ? std::exp(logits(i, j) - row_max) : S(0);
        (*probs)(h * L + i, j) = e;
        denom += e;
      }
      probs->row(h * L + i) /= denom;
    }
    out_v.middleCols(h * dh, dh).noalias() =
        probs->middleRows(h * L, L) * vv.middleCols(h * dh, dh);
  }
  if (out_v.hasNaN()) throw RuntimeFailure("attention: NaN output at " + ctx);
  if (probs_export != nullptr) *probs_export = probs;

  const bool needs = t.needs_grad(q.i) || t.needs_grad(k.i) || t.needs_grad(v.i) ||
                     (has_bias && t.needs_grad(bias.i));
  const int out = t.push(std::move(out_v), needs);
  if (needs) {
    t.node(out).backward = [q, k, v, bias, probs, heads, has_bias, inv_scale,
                            out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      const Mat<S>& qv = tp.value(q);
      const Mat<S>& kv = tp.value(k);
      const Mat<S>& vv = tp.value(v);
      const Eigen::Index L = qv.rows(), D = qv.cols();
      const int dh = static_cast<int>(D) / heads;
      for (int h = 0; h < heads; ++h) {
        const auto P = probs->middleRows(h * L, L);
        const auto gh = g.middleCols(h * dh, dh);
        const auto vh = vv.middleCols(h * dh, dh);
        if (tp.needs_grad(v.i)) {
          tp.grad_ref(v.i).middleCols(h * dh, dh).noalias() += P.transpose() * gh;
        }
        Mat<S> gP = gh * vh.transpose();                       // L x L
        Mat<S> gS(L, L);
        for (Eigen::Index i = 0; i < L; ++i) {
          const S dot = gP.row(i).cwiseProduct(P.row(i)).sum();
          gS.row(i) = P.row(i).cwiseProduct((gP.row(i).array() - dot).matrix());
        }
        if (has_bias && tp.needs_grad(bias.i)) {
          tp.grad_ref(bias.i).middleRows(h * L, L) += gS;
        }
        const auto qh = qv.middleCols(h * dh, dh);
        const auto kh = kv.middleCols(h * dh, dh);
        if (tp.needs_grad(q.i)) {
          tp.grad_ref(q.i).middleCols(h * dh, dh).noalias() += gS * kh * inv_scale;
        }
        if (tp.needs_grad(k.i)) {
          tp.grad_ref(k.i).middleCols(h * dh, dh).noalias() +=
              gS.transpose() * qh * inv_scale;
        }
      }
    };
  }
  return Var<S>{&t, out};
}

// ---------------------------------------------------------------------------
// OA-specific structural ops
// ---------------------------------------------------------------------------

// Zeroes coordinates [a_eff:D) on the given rows before the key projection.
// The zeroed coordinates are a structural gradient blackout, not a soft one.
template <typename S>
Var<S> oa_mask_rows(Var<S> a, std::shared_ptr<const std::vector<int>> rows, int a_eff) {
  Tape<S>& t = *a.tape;
  Mat<S> v = t.value(a);
  const Eigen::Index D = v.cols();
  if (a_eff < D) {
    for (const int r : *rows) v.row(r).tail(D - a_eff).setZero();
  }
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, rows, a_eff, out](Tape<S>& tp) {
      Mat<S> g = tp.grad_ref(out);
      const Eigen::Index D = g.cols();
      if (a_eff < D) {
        for (const int r : *rows) g.row(r).tail(D - a_eff).setZero();
      }
      tp.grad_ref(a.i) += g;
    };
  }
  return Var<S>{&t, out};
}

// Overwrites coordinates [0:A) on the given rows with cached addresses
// (rows x A, a constant: the cache lives outside the differentiable graph).
template <typename S>
Var<S> addr_reset(Var<S> a, std::shared_ptr<const std::vector<int>> rows,
                  std::shared_ptr<const Mat<S>> addr) {
  Tape<S>& t = *a.tape;
  Mat<S> v = t.value(a);
  const int A = static_cast<int>(addr->cols());
  for (std::size_t r = 0; r < rows->size(); ++r) {
    v.row((*rows)[r]).head(A) = addr->row(static_cast<Eigen::Index>(r));
  }
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, rows, A, out](Tape<S>& tp) {
      Mat<S> g = tp.grad_ref(out);
      for (const int r : *rows) g.row(r).head(A).setZero();
      tp.grad_ref(a.i) += g;
    };
  }
  return Var<S>{&t, out};
}

// Scatters per-pair per-head values (P x heads) into a stacked logit-bias
// tensor (heads*L x L); entries not named by `pairs` stay zero.
template <typename S>
Var<S> bias_scatter(Var<S> vals,
                    std::shared_ptr<const std::vector<std::pair<int, int>>> pairs,
                    int L, int heads) {
  Tape<S>& t = *vals.tape;
  const Mat<S>& pv = t.value(vals);
  if (pv.rows() != static_cast<Eigen::Index>(pairs->size()) || pv.cols() != heads) {
    throw ContractError("bias_scatter: value shape does not match pair list");
  }
  Mat<S> v = Mat<S>::Zero(heads * L, L);
  for (std::size_t p = 0; p < pairs->size(); ++p) {
    const auto [qi, kj] = (*pairs)[p];
    for (int h = 0; h < heads; ++h) {
      v(h * L + qi, kj) = pv(static_cast<Eigen::Index>(p), h);
    }
  }
  const bool needs = t.needs_grad(vals.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [vals, pairs, L, heads, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Mat<S>& gv = tp.grad_ref(vals.i);
      for (std::size_t p = 0; p < pairs->size(); ++p) {
        const auto [qi, kj] = (*pairs)[p];
        for (int h = 0; h < heads; ++h) {
          gv(static_cast<Eigen::Index>(p), h) += g(h * L + qi, kj);
        }
      }
    };
  }
  return Var<S>{&t, out};
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> v(1, 1);
  v(0, 0) = t.value(a).sum();
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, out](Tape<S>& tp) {
      tp.grad_ref(a.i).array() += tp.grad_ref(out)(0, 0);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  const S n = static_cast<S>(a.tape->value(a).size());
  return scale(sum_all(a), S(1) / n);
}

// Scalar sum of a .* W for a constant weight matrix W.
template <typename S>
Var<S> inner_const(Var<S> a, std::shared_ptr<const Mat<S>> w) {
  Tape<S>& t = *a.tape;
  Mat<S> v(1, 1);
  v(0, 0) = t.value(a).cwiseProduct(*w).sum();
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, w, out](Tape<S>& tp) {
      tp.grad_ref(a.i) += tp.grad_ref(out)(0, 0) * (*w);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> entry(Var<S> a, int r, int c) {
  Tape<S>& t = *a.tape;
  Mat<S> v(1, 1);
  v(0, 0) = t.value(a)(r, c);
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, r, c, out](Tape<S>& tp) {
      tp.grad_ref(a.i)(r, c) += tp.grad_ref(out)(0, 0);
    };
  }
  return Var<S>{&t, out};
}

template <typename S>
Var<S> log_guard(Var<S> a, S floor) {
  Tape<S>& t = *a.tape;
  Mat<S> v = t.value(a).unaryExpr([&](S e) { return std::log(std::max(e, floor)); });
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [a, floor, out](Tape<S>& tp) {
      const Mat<S>& x = tp.value(a);
      const Mat<S>& g = tp.grad_ref(out);
      tp.grad_ref(a.i) +=
          g.cwiseProduct(x.unaryExpr([&](S e) { return S(1) / std::max(e, floor); }));
    };
  }
  return Var<S>{&t, out};
}

// Row-wise softmax with a per-column validity mask shared by all rows.
// Throws if no column is valid.
template <typename S>
Var<S> softmax_rows_masked(Var<S> a, std::shared_ptr<const std::vector<std::uint8_t>> valid) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = t.value(a);
  const Eigen::Index R = x.rows(), C = x.cols();
  bool any = false;
  for (const auto v : *valid) any = any || (v != 0);
  if (!any) throw ContractError("softmax_rows_masked: every column is masked");
  auto probs = std::make_shared<Mat<S>>(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < C; ++c) {
      if ((*valid)[static_cast<std::size_t>(c)]) mx = std::max(mx, x(r, c));
    }
    S denom = S(0);
    for (Eigen::Index c = 0; c < C; ++c) {
      const S e = (*valid)[static_cast<std::size_t>(c)] ? std::exp(x(r, c) - mx) : S(0);
      (*probs)(r, c) = e;
      denom += e;
    }
    probs->row(r) /= denom;
  }
  const bool needs = t.needs_grad(a.i);
  const int out = t.push(*probs, needs);
  if (needs) {
    t.node(out).backward = [a, probs, out](Tape<S>& tp) {
      const Mat<S>& g = tp.grad_ref(out);
      Mat<S>& ga = tp.grad_ref(a.i);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const S dot = g.row(r).cwiseProduct(probs->row(r)).sum();
        ga.row(r) += probs->row(r).cwiseProduct((g.row(r).array() - dot).matrix());
      }
    };
  }
  return Var<S>{&t, out};
}

// Mean over rows of w_i * (logsumexp(row_i) - row_i[target_i]).
template <typename S>
Var<S> cross_entropy_rows(Var<S> logits, std::shared_ptr<const std::vector<int>> targets,
                          std::shared_ptr<const std::vector<S>> weights) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& x = t.value(logits);
  const Eigen::Index R = x.rows(), C = x.cols();
  if (static_cast<Eigen::Index>(targets->size()) != R) {
    throw ContractError("cross_entropy_rows: target count mismatch");
  }
  for (const int id : *targets) {
    if (id < 0 || id >= C) {
      throw ContractError("cross_entropy_rows: target id outside vocabulary");
    }
  }
  auto probs = std::make_shared<Mat<S>>(R, C);
  S acc = S(0);
  for (Eigen::Index r = 0; r < R; ++r) {
    const S mx = x.row(r).maxCoeff();
    const auto ex = (x.row(r).array() - mx).exp();
    const S denom = ex.sum();
    probs->row(r) = (ex / denom).matrix();
    const S lse = mx + std::log(denom);
    acc += (*weights)[static_cast<std::size_t>(r)] *
           (lse - x(r, (*targets)[static_cast<std::size_t>(r)]));
  }
  Mat<S> v(1, 1);
  v(0, 0) = acc / static_cast<S>(R);
  const bool needs = t.needs_grad(logits.i);
  const int out = t.push(std::move(v), needs);
  if (needs) {
    t.node(out).backward = [logits, targets, weights, probs, out](Tape<S>& tp) {
      const S g = tp.grad_ref(out)(0, 0);
      Mat<S>& gl = tp.grad_ref(logits.i);
      const Eigen::Index R = gl.rows();
      for (Eigen::Index r = 0; r < R; ++r) {
        const S w = (*weights)[static_cast<std::size_t>(r)] * g / static_cast<S>(R);
        gl.row(r) += w * probs->row(r);
        gl(r, (*targets)[static_cast<std::size_t>(r)]) -= w;
      }
    };
  }
  return Var<S>{&t, out};
}

}  // namespace oawam::ad
