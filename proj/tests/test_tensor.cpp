#include <doctest.h>

#include <cmath>

#include "germ/tensor.hpp"

using germ::Rng;
using germ::Tensor;

TEST_CASE("tensor shape and data must agree") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), germ::ShapeMismatch);
    CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), germ::NonFinite);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
}

TEST_CASE("tensor arithmetic and transpose") {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor b = a.transposed();
    CHECK(b.at(0, 1) == 3);
    CHECK(b.at(1, 0) == 2);
    Tensor c = a;
    c += a;
    CHECK(c.at(1, 1) == 8);
    c *= 0.5;
    CHECK(c == a);
    CHECK_THROWS_AS(c += Tensor({3, 3}), germ::ShapeMismatch);
}

TEST_CASE("rng streams are reproducible") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 10000; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
}

TEST_CASE("rng uniform draws land in range and differ by seed") {
    Rng a(1), b(2);
    bool any_diff = false;
    for (int i = 0; i < 1000; ++i) {
        const double ua = a.uniform();
        CHECK(ua >= 0.0);
        CHECK(ua < 1.0);
        if (ua != b.uniform()) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("rng below is exhaustive and in range") {
    Rng rng(7);
    bool seen[5] = {false, false, false, false, false};
    for (int i = 0; i < 500; ++i) {
        const std::uint64_t v = rng.below(5);
        REQUIRE(v < 5);
        seen[v] = true;
    }
    for (bool s : seen) CHECK(s);
    CHECK_THROWS_AS(rng.below(0), germ::IndexOutOfRange);
}

TEST_CASE("rng forks are deterministic and independent") {
    Rng root(99);
    Rng f1 = root.fork(1);
    Rng f2 = root.fork(2);
    Rng f1_again = Rng(99).fork(1);
    CHECK(f1.next_u64() == f1_again.next_u64());
    CHECK(f1.next_u64() != f2.next_u64());
}

TEST_CASE("normal draws have sane moments") {
    Rng rng(5);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}
