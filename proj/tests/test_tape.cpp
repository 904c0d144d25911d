#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "oawam/rng.hpp"
#include "oawam/tape.hpp"

using namespace oawam;
using ad::Mat;
using ad::Tape;
using Var = ad::Var<double>;
using M = Mat<double>;

namespace {

M randn(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Central-difference check of d(scalar fn)/d(input) against the tape.
void fd_check(const M& x0, const std::function<Var(Tape<double>&, Var)>& fn,
              double tol = 1e-7, double eps = 1e-6) {
  M analytic;
  {
    Tape<double> tape;
    Var x = tape.input(x0);
    Var y = fn(tape, x);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  M x = x0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    Tape<double> t1;
    const double up = t1.value(fn(t1, t1.input(x)))(0, 0);
    x.data()[i] = keep - eps;
    Tape<double> t2;
    const double dn = t2.value(fn(t2, t2.input(x)))(0, 0);
    x.data()[i] = keep;
    const double numeric = (up - dn) / (2 * eps);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
    CHECK(std::abs(a - numeric) / denom < tol);
  }
}

}  // namespace

TEST_CASE("matmul gradient") {
  const M w = randn(4, 3, 2);
  fd_check(randn(5, 4, 1), [&](Tape<double>& t, Var x) {
    return ad::sum_all(ad::matmul(x, t.constant(w)));
  });
  const M a = randn(3, 5, 3);
  fd_check(randn(5, 4, 4), [&](Tape<double>& t, Var x) {
    return ad::sum_all(ad::matmul(t.constant(a), x));
  });
}

TEST_CASE("matmul_nt gradient") {
  const M b = randn(6, 4, 5);
  fd_check(randn(3, 4, 6), [&](Tape<double>& t, Var x) {
    Var y = ad::matmul_nt(x, t.constant(b));
    return ad::sum_all(ad::cmul(y, y));
  });
}

TEST_CASE("elementwise ops") {
  const M other = randn(3, 4, 7);
  fd_check(randn(3, 4, 8), [&](Tape<double>& t, Var x) {
    Var y = ad::add(ad::cmul(x, t.constant(other)), ad::scale(x, 0.5));
    Var z = ad::sub(y, t.constant(other));
    return ad::mean_all(ad::cmul(z, z));
  });
}

TEST_CASE("add_rowvec broadcasts and accumulates bias grads") {
  fd_check(randn(1, 4, 9), [&](Tape<double>& t, Var bias) {
    Var y = ad::add_rowvec(t.constant(randn(5, 4, 10)), bias);
    return ad::sum_all(ad::cmul(y, y));
  });
}

TEST_CASE("gelu and silu") {
  fd_check(randn(3, 3, 11), [&](Tape<double>& t, Var x) {
    (void)t;
    return ad::sum_all(ad::gelu(x));
  });
  fd_check(randn(3, 3, 12), [&](Tape<double>& t, Var x) {
    (void)t;
    return ad::sum_all(ad::silu(x));
  });
}

TEST_CASE("rmsnorm rows") {
  const M gain = randn(1, 6, 13).array() + 2.0;
  fd_check(randn(4, 6, 14), [&](Tape<double>& t, Var x) {
    Var y = ad::rmsnorm_rows(x, t.constant(gain), 1e-5);
    return ad::sum_all(ad::cmul(y, y));
  });
  fd_check(gain, [&](Tape<double>& t, Var g) {
    Var y = ad::rmsnorm_rows(t.input(randn(4, 6, 14)), g, 1e-5);
    return ad::sum_all(ad::cmul(y, y));
  });
}

TEST_CASE("layernorm rows") {
  const M gain = randn(1, 5, 15).array() + 1.5;
  const M bias = randn(1, 5, 16);
  fd_check(randn(3, 5, 17), [&](Tape<double>& t, Var x) {
    Var y = ad::layernorm_rows(x, t.constant(gain), t.constant(bias), 1e-10);
    return ad::sum_all(ad::cmul(y, y));
  }, 1e-6);
}

TEST_CASE("gather, scatter, slices, concats") {
  auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{3, 0, 3});
  fd_check(randn(5, 3, 18), [&](Tape<double>& t, Var x) {
    (void)t;
    Var g = ad::rows_gather(x, idx);
    return ad::sum_all(ad::cmul(g, g));
  });
  auto sidx = std::make_shared<const std::vector<int>>(std::vector<int>{1, 4});
  fd_check(randn(2, 3, 19), [&](Tape<double>& t, Var rows) {
    Var base = t.input(randn(5, 3, 20));
    Var y = ad::rows_scatter(base, rows, sidx);
    return ad::sum_all(ad::cmul(y, y));
  });
  fd_check(randn(5, 3, 21), [&](Tape<double>& t, Var base) {
    Var rows = t.constant(randn(2, 3, 22));
    Var y = ad::rows_scatter(base, rows, sidx);
    return ad::sum_all(ad::cmul(y, y));
  });
  fd_check(randn(4, 6, 23), [&](Tape<double>& t, Var x) {
    Var a = ad::slice_cols(x, 1, 2);
    Var b = ad::slice_cols(x, 3, 3);
    Var cat = ad::concat_cols<double>({a, b, a});
    Var rows = ad::concat_rows<double>({cat, cat});
    (void)t;
    return ad::sum_all(ad::cmul(rows, rows));
  });
}

TEST_CASE("rope rotates per head and round-trips gradients") {
  auto pos = std::make_shared<const std::vector<int>>(std::vector<int>{0, 3, 3, 7});
  fd_check(randn(4, 8, 24), [&](Tape<double>& t, Var x) {
    (void)t;
    Var y = ad::rope(x, pos, 4, 10000.0);
    return ad::sum_all(ad::cmul(y, y));
  });
  // Norm preservation per row (rotation).
  Tape<double> tape;
  const M x0 = randn(4, 8, 25);
  Var y = ad::rope(tape.input(x0), pos, 4, 10000.0);
  for (int r = 0; r < 4; ++r) {
    CHECK(std::abs(tape.value(y).row(r).norm() - x0.row(r).norm()) < 1e-12);
  }
  // Position 0 is the identity.
  CHECK((tape.value(y).row(0) - x0.row(0)).norm() < 1e-15);
}

TEST_CASE("attention core matches a naive oracle and its gradient checks") {
  const int L = 6, D = 8, heads = 2, dh = D / heads;
  auto allow = std::make_shared<ad::MaskMat>(L, L);
  allow->setZero();
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j <= i; ++j) (*allow)(i, j) = 1;
  }
  (*allow)(2, 1) = 0;
  for (int j = 0; j < L; ++j) (*allow)(4, j) = 0;  // fully masked query row

  const M q0 = randn(L, D, 26), k0 = randn(L, D, 27), v0 = randn(L, D, 28);

  // Naive per-head oracle.
  M expected(L, D);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < L; ++i) {
      Eigen::VectorXd logits(L);
      bool any = false;
      for (int j = 0; j < L; ++j) {
        if ((*allow)(i, j)) {
          logits[j] = q0.row(i).segment(h * dh, dh)
                          .dot(k0.row(j).segment(h * dh, dh)) /
                      std::sqrt(static_cast<double>(dh));
          any = true;
        } else {
          logits[j] = -1e300;
        }
      }
      Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(dh);
      if (any) {
        const double mx = logits.maxCoeff();
        double denom = 0;
        for (int j = 0; j < L; ++j) {
          if ((*allow)(i, j)) denom += std::exp(logits[j] - mx);
        }
        for (int j = 0; j < L; ++j) {
          if ((*allow)(i, j)) {
            out += (std::exp(logits[j] - mx) / denom) *
                   v0.row(j).segment(h * dh, dh);
          }
        }
      }
      expected.row(i).segment(h * dh, dh) = out;
    }
  }

  Tape<double> tape;
  std::shared_ptr<const ad::MaskMat> callow = allow;
  Var out = ad::attention(tape.input(q0), tape.input(k0), tape.input(v0), callow,
                          heads, Var{nullptr, -1}, "test");
  CHECK((tape.value(out) - expected).cwiseAbs().maxCoeff() < 1e-10);
  // Fully masked query row yields zeros.
  CHECK(tape.value(out).row(4).norm() == 0.0);

  for (int which = 0; which < 3; ++which) {
    fd_check(randn(L, D, 29 + static_cast<unsigned>(which)),
             [&](Tape<double>& t, Var x) {
               Var q = which == 0 ? x : t.constant(q0);
               Var k = which == 1 ? x : t.constant(k0);
               Var v = which == 2 ? x : t.constant(v0);
               Var o = ad::attention(q, k, v, callow, heads, Var{nullptr, -1}, "t");
               return ad::sum_all(ad::cmul(o, o));
             },
             1e-6);
  }
}

TEST_CASE("attention bias gradient via bias_scatter") {
  const int L = 5, D = 4, heads = 2;
  auto allow = std::make_shared<ad::MaskMat>(L, L);
  allow->setOnes();
  std::shared_ptr<const ad::MaskMat> callow = allow;
  auto pairs = std::make_shared<const std::vector<std::pair<int, int>>>(
      std::vector<std::pair<int, int>>{{0, 1}, {2, 3}, {4, 4}});
  const M q0 = randn(L, D, 40), k0 = randn(L, D, 41), v0 = randn(L, D, 42);
  fd_check(randn(3, heads, 43), [&](Tape<double>& t, Var vals) {
    Var bias = ad::bias_scatter(vals, pairs, L, heads);
    Var o = ad::attention(t.constant(q0), t.constant(k0), t.constant(v0), callow,
                          heads, bias, "t");
    return ad::sum_all(ad::cmul(o, o));
  });
}

TEST_CASE("oa_mask_rows zeroes values and is a structural gradient blackout") {
  const int L = 4, D = 6, a_eff = 2;
  auto rows = std::make_shared<const std::vector<int>>(std::vector<int>{1, 3});
  Tape<double> tape;
  const M x0 = randn(L, D, 44);
  Var x = tape.input(x0);
  Var y = ad::oa_mask_rows(x, rows, a_eff);
  CHECK(tape.value(y)(1, 3) == 0.0);
  CHECK(tape.value(y)(3, 5) == 0.0);
  CHECK(tape.value(y)(0, 3) == x0(0, 3));
  CHECK(tape.value(y)(1, 1) == x0(1, 1));
  tape.backward(ad::sum_all(ad::cmul(y, y)));
  const M g = tape.grad(x);
  for (const int r : *rows) {
    for (int c = a_eff; c < D; ++c) CHECK(g(r, c) == 0.0);  // exact zero
  }
  CHECK(g(0, 5) != 0.0);
}

TEST_CASE("addr_reset overwrites the addr slice and severs its gradient") {
  const int L = 4, D = 5, A = 2;
  auto rows = std::make_shared<const std::vector<int>>(std::vector<int>{0, 2});
  auto addr = std::make_shared<const M>(randn(2, A, 45));
  Tape<double> tape;
  const M x0 = randn(L, D, 46);
  Var x = tape.input(x0);
  Var y = ad::addr_reset(x, rows, addr);
  CHECK(tape.value(y)(0, 0) == (*addr)(0, 0));
  CHECK(tape.value(y)(2, 1) == (*addr)(1, 1));
  CHECK(tape.value(y)(0, 3) == x0(0, 3));
  CHECK(tape.value(y)(1, 0) == x0(1, 0));
  tape.backward(ad::sum_all(ad::cmul(y, y)));
  const M g = tape.grad(x);
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == 0.0);
  CHECK(g(2, 0) == 0.0);
  CHECK(g(1, 0) != 0.0);
  CHECK(g(0, 3) != 0.0);
}

TEST_CASE("softmax, log, entry, inner_const, cross entropy") {
  auto valid = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 0, 1, 1});
  fd_check(randn(3, 4, 47), [&](Tape<double>& t, Var x) {
    Var p = ad::softmax_rows_masked(x, valid);
    Var lp = ad::log_guard(p, 1e-30);
    Var e = ad::entry(lp, 1, 2);
    auto w = std::make_shared<const M>(randn(3, 4, 48));
    return ad::add(ad::inner_const(p, w), e);
  }, 1e-6);

  // Masked columns carry zero probability; rows sum to one.
  Tape<double> tape;
  Var p = ad::softmax_rows_masked(tape.input(randn(3, 4, 49)), valid);
  for (int r = 0; r < 3; ++r) {
    CHECK(tape.value(p)(r, 1) == 0.0);
    CHECK(std::abs(tape.value(p).row(r).sum() - 1.0) < 1e-12);
  }

  auto targets = std::make_shared<const std::vector<int>>(std::vector<int>{2, 0});
  auto weights = std::make_shared<const std::vector<double>>(std::vector<double>{1.0, 0.25});
  fd_check(randn(2, 5, 50), [&](Tape<double>& t, Var x) {
    (void)t;
    return ad::cross_entropy_rows(x, targets, weights);
  }, 1e-6);

  // Uniform logits: CE = log(vocab).
  Tape<double> t2;
  auto ones_w = std::make_shared<const std::vector<double>>(std::vector<double>{1.0});
  auto tgt = std::make_shared<const std::vector<int>>(std::vector<int>{3});
  Var ce = ad::cross_entropy_rows(t2.input(M::Zero(1, 7)), tgt, ones_w);
  CHECK(std::abs(t2.value(ce)(0, 0) - std::log(7.0)) < 1e-12);
}

TEST_CASE("detach blocks gradient flow") {
  Tape<double> tape;
  Var x = tape.input(randn(2, 2, 51));
  Var y = ad::detach(ad::scale(x, 3.0));
  Var z = ad::sum_all(ad::cmul(y, y));
  tape.backward(z);
  CHECK(tape.grad(x).norm() == 0.0);
}

TEST_CASE("parameters accumulate scaled gradients across tapes") {
  ad::Parameter<double> p;
  p.name = "w";
  p.value = randn(2, 2, 52);
  p.zero_grad();
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    Var w = tape.leaf(p);
    CHECK(tape.leaf(p).i == w.i);  // same node on reuse
    tape.backward(ad::sum_all(ad::cmul(w, w)));
    tape.accumulate_param_grads(0.5);
  }
  CHECK((p.grad - 2.0 * p.value).norm() < 1e-12);  // 2 * (0.5 * 2w)
}
