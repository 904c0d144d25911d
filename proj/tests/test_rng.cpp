#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oawam/rng.hpp"

using oawam::Rng;

TEST_CASE("identical seeds give identical streams") {
  Rng a(42, "train");
  Rng b(42, "train");
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("named streams are independent") {
  Rng a(42, "train");
  Rng b(42, "eval");
  int equal = 0;
  for (int i = 0; i < 64; ++i) {
    if (a.next_u64() == b.next_u64()) ++equal;
  }
  CHECK(equal == 0);
}

TEST_CASE("child streams are stable") {
  Rng root(7);
  Rng c1 = root.child("item", 3);
  Rng c2 = root.child("item", 3);
  CHECK(c1.next_u64() == c2.next_u64());
  Rng c3 = root.child("item", 4);
  CHECK(c1.next_u64() != c3.next_u64());
}

TEST_CASE("uniform stays in range, below is unbiased enough") {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  int counts[5] = {};
  for (int i = 0; i < 5000; ++i) ++counts[r.below(5)];
  for (const int c : counts) {
    CHECK(c > 800);
    CHECK(c < 1200);
  }
}

TEST_CASE("normal moments") {
  Rng r(99);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}
