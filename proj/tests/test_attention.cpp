#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "germ/attention.hpp"

using germ::AttentionVariant;
using germ::BlockMode;
using germ::ModelConfig;
using germ::Rng;
using germ::Tensor;

namespace {

std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return v[a] < v[b];
    });
    return idx;
}

}  // namespace

TEST_CASE("softmax1 hand cases") {
    CHECK(germ::softmax1(std::vector<double>{0.0})[0] == doctest::Approx(0.5).epsilon(1e-15));

    // Deep-negative scores: the implicit zero logit swallows all the mass.
    const auto escaped = germ::softmax1(std::vector<double>{-1e4, -1e4});
    double sum = 0.0;
    for (double p : escaped) {
        CHECK(std::isfinite(p));
        CHECK(p >= 0.0);
        sum += p;
    }
    CHECK(sum < 1e-12);

    const auto thirds =
        germ::softmax1(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)});
    CHECK(thirds[0] == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
    CHECK(thirds[1] == doctest::Approx(2.0 / 7.0).epsilon(1e-14));
    CHECK(thirds[2] == doctest::Approx(3.0 / 7.0).epsilon(1e-14));
}

TEST_CASE("softmax hand cases") {
    CHECK(germ::softmax(std::vector<double>{0.0})[0] == 1.0);
    for (double c : {-100.0, 0.0, 3.5, 1e4}) {
        const auto p = germ::softmax(std::vector<double>{c, c, c, c});
        for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
    }
    const auto q = germ::softmax(std::vector<double>{std::log(1.0), std::log(3.0)});
    CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax1 relates to softmax through the denominator ratio") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t len = 1 + rng.below(64);
        std::vector<double> s(len);
        for (double& v : s) v = rng.uniform(-30.0, 30.0);
        const auto p1 = germ::softmax1(s);
        const auto p = germ::softmax(s);
        double z = 0.0;
        for (double v : s) z += std::exp(v);
        const double ratio = z / (1.0 + z);
        double sum1 = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            REQUIRE(std::abs(p1[i] - p[i] * ratio) < 1e-12);
            sum1 += p1[i];
        }
        CHECK(sum1 < 1.0);
        CHECK(argsort(p1) == argsort(s));
    }
}

TEST_CASE("softmax1 is not shift invariant and escapes to zero") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t len = 1 + rng.below(32);
        std::vector<double> s(len);
        for (double& v : s) v = rng.uniform(-5.0, 5.0) - 50.0;
        const auto p1 = germ::softmax1(s);
        double sum = 0.0;
        for (double v : p1) sum += v;
        CHECK(sum < 1e-6);
        // Vanilla softmax still normalizes to one under the same shift.
        const auto p = germ::softmax(s);
        double psum = 0.0;
        for (double v : p) psum += v;
        CHECK(std::abs(psum - 1.0) < 1e-12);
    }
}

TEST_CASE("alibi bias rows follow -m|j-i|") {
    const auto row = germ::alibi_bias_row(2, 5, 1.0);
    CHECK(row == std::vector<double>{-2, -1, 0, -1, -2});
    CHECK(germ::alibi_bias_row(0, 1, 17.0) == std::vector<double>{0});
    CHECK(germ::alibi_bias_row(0, 4, 0.5) == std::vector<double>{0, -0.5, -1, -1.5});
    CHECK_THROWS_AS(germ::alibi_bias_row(5, 5, 1.0), germ::IndexOutOfRange);
}

TEST_CASE("alibi bias matrix is symmetric with zero diagonal") {
    const std::size_t n = 7;
    for (std::size_t i = 0; i < n; ++i) {
        const auto ri = germ::alibi_bias_row(i, n, 0.25);
        CHECK(ri[i] == 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            CHECK(ri[j] == germ::alibi_bias_row(j, n, 0.25)[i]);
        }
    }
}

TEST_CASE("alibi slopes form the geometric schedule") {
    const auto s8 = germ::alibi_slopes(8);
    REQUIRE(s8.size() == 8);
    for (std::size_t h = 0; h < 8; ++h) {
        CHECK(s8[h] == doctest::Approx(std::pow(2.0, -double(h + 1))).epsilon(1e-14));
    }
    const auto s1 = germ::alibi_slopes(1);
    CHECK(s1[0] == doctest::Approx(std::pow(2.0, -8.0)).epsilon(1e-14));
}

TEST_CASE("model config validation") {
    ModelConfig cfg;
    cfg.heads = 0;
    CHECK_THROWS_AS(cfg.validate(), germ::ConfigError);

    cfg = ModelConfig{};
    cfg.block_mode = BlockMode::Practical;
    cfg.model_dim = 30;
    cfg.heads = 4;
    CHECK_THROWS_AS(cfg.validate(), germ::ConfigError);

    cfg = ModelConfig{};
    cfg.block_mode = BlockMode::Formal;
    cfg.model_dim = 8;
    cfg.ffn_dim = 16;
    CHECK_THROWS_AS(cfg.validate(), germ::ConfigError);

    cfg.ffn_dim = 8;
    cfg.alibi = true;
    CHECK_THROWS_AS(cfg.validate(), germ::ConfigError);
    cfg.alibi = false;
    cfg.heads = 2;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.use_output_softmax1());  // formal default

    ModelConfig practical;
    CHECK_FALSE(practical.use_output_softmax1());
    practical.output_softmax1 = true;
    CHECK(practical.use_output_softmax1());
}

TEST_CASE("variant and mode string round trips") {
    CHECK(germ::attention_variant_from_string("softmax1") == AttentionVariant::Softmax1);
    CHECK(germ::to_string(AttentionVariant::VanillaSoftmax) == "softmax");
    CHECK(germ::block_mode_from_string("formal") == BlockMode::Formal);
    CHECK_THROWS_AS(germ::attention_variant_from_string("gelu"), germ::ConfigError);
}
