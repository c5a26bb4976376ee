#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "germ/outlier.hpp"

using germ::Checkpoint;
using germ::ModelConfig;
using germ::OutlierReport;
using germ::Rng;
using germ::Tensor;

TEST_CASE("kurtosis hand cases") {
    CHECK(germ::kurtosis(std::vector<double>{-1, 1}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(germ::kurtosis(std::vector<double>{-1, 0, 1}) ==
          doctest::Approx(1.5).epsilon(1e-14));
    CHECK_THROWS_AS(germ::kurtosis(std::vector<double>{3.5, 3.5, 3.5}),
                    germ::DegenerateSample);
    CHECK_THROWS_AS(germ::kurtosis(std::vector<double>{1.0}), germ::DegenerateSample);
}

TEST_CASE("kurtosis is scale and shift invariant") {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> x(16 + rng.below(48));
        for (double& v : x) v = rng.normal();
        const double k = germ::kurtosis(x);
        CHECK(k >= 1.0);
        const double a = rng.uniform(0.1, 5.0) * (rng.below(2) ? 1.0 : -1.0);
        const double b = rng.uniform(-10.0, 10.0);
        std::vector<double> y = x;
        for (double& v : y) v = a * v + b;
        CHECK(std::abs(germ::kurtosis(y) - k) < 1e-9 * std::max(1.0, k));
    }
}

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.model_dim = 8;
    cfg.ffn_dim = 8;
    cfg.vocab_size = 8;
    cfg.max_seq_len = 8;
    cfg.block_mode = germ::BlockMode::Formal;
    cfg.variant = germ::AttentionVariant::Softmax1;
    return cfg;
}

}  // namespace

TEST_CASE("zero model reports degenerate probes and undefined average") {
    Rng rng(3);
    Checkpoint ckpt = germ::init_model(tiny_config(), rng, 0.0);
    OutlierReport report = germ::collect_report(ckpt, {{0, 1, 2}}, "zero");
    CHECK_FALSE(report.avg_kurtosis.has_value());
    for (const auto& probe : report.per_probe) {
        CHECK_FALSE(probe.kurtosis.has_value());
    }
    CHECK(report.max_inf_norm >= 0.0);

    nlohmann::json j = nlohmann::json::parse(report.to_json());
    CHECK(j.at("avg_kurtosis").is_null());
    CHECK(j.at("n_sequences") == 1);
}

TEST_CASE("duplicated sequences pool to the single-sequence statistics") {
    Rng rng(4);
    Checkpoint ckpt = germ::init_model(tiny_config(), rng, 0.5);
    const std::vector<std::size_t> seq = {0, 3, 5, 7};
    OutlierReport one = germ::collect_report(ckpt, {seq}, "m");
    OutlierReport two = germ::collect_report(ckpt, {seq, seq}, "m");
    REQUIRE(one.per_probe.size() == two.per_probe.size());
    CHECK(two.n_sequences == 2);
    for (std::size_t i = 0; i < one.per_probe.size(); ++i) {
        REQUIRE(one.per_probe[i].kurtosis.has_value());
        CHECK(*two.per_probe[i].kurtosis ==
              doctest::Approx(*one.per_probe[i].kurtosis).epsilon(1e-12));
        CHECK(two.per_probe[i].inf_norm == one.per_probe[i].inf_norm);
    }
    CHECK(two.max_inf_norm == one.max_inf_norm);
    REQUIRE(one.avg_kurtosis.has_value());
    CHECK(*two.avg_kurtosis == doctest::Approx(*one.avg_kurtosis).epsilon(1e-12));
}

TEST_CASE("report aggregates follow their definitions") {
    Rng rng(5);
    Checkpoint ckpt = germ::init_model(tiny_config(), rng, 0.5);
    OutlierReport report =
        germ::collect_report(ckpt, {{0, 1, 2, 3}, {4, 5, 6}}, "agg");

    double max_inf = 0.0, kurt_sum = 0.0;
    std::size_t kurt_n = 0;
    for (const auto& probe : report.per_probe) {
        max_inf = std::max(max_inf, probe.inf_norm);
        CHECK(report.max_inf_norm >= probe.inf_norm);  // adding probes never lowers it
        if (probe.kurtosis && probe.kind != germ::ProbeKind::AttentionProbs) {
            kurt_sum += *probe.kurtosis;
            ++kurt_n;
        }
    }
    CHECK(report.max_inf_norm == max_inf);
    REQUIRE(kurt_n > 0);
    REQUIRE(report.avg_kurtosis.has_value());
    CHECK(*report.avg_kurtosis == doctest::Approx(kurt_sum / double(kurt_n)).epsilon(1e-12));
}

TEST_CASE("report serializes to parseable json and csv") {
    Rng rng(6);
    Checkpoint ckpt = germ::init_model(tiny_config(), rng, 0.5);
    OutlierReport report = germ::collect_report(ckpt, {{1, 2, 3}}, "serial");
    nlohmann::json j = nlohmann::json::parse(report.to_json());
    CHECK(j.at("model_id") == "serial");
    CHECK(j.at("per_probe").size() == report.per_probe.size());

    const std::string csv = report.to_csv();
    std::size_t lines = 0;
    for (char c : csv) {
        if (c == '\n') ++lines;
    }
    CHECK(lines == report.per_probe.size() + 1);  // header + rows
}

TEST_CASE("empty sample is rejected") {
    Rng rng(7);
    Checkpoint ckpt = germ::init_model(tiny_config(), rng, 0.5);
    CHECK_THROWS_AS(germ::collect_report(ckpt, {}, "x"), germ::EmptySample);
}
