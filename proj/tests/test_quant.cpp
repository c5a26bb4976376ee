#include <doctest.h>

#include <cmath>

#include "germ/linalg.hpp"
#include "germ/quant.hpp"

using germ::CalibrationStats;
using germ::Checkpoint;
using germ::ModelConfig;
using germ::QuantSpec;
using germ::Rng;
using germ::Tensor;

TEST_CASE("fake_quant hand cases") {
    Tensor half = Tensor::vector({0.5});
    // 0.5 / (1/127) = 63.5 rounds to 64 under half-to-even.
    CHECK(germ::fake_quant(half, 8, 1.0)[0] == doctest::Approx(64.0 / 127.0).epsilon(1e-15));
    CHECK(germ::fake_quant(Tensor::vector({0.0}), 8, 1.0)[0] == 0.0);
    CHECK(germ::fake_quant(Tensor::vector({3.2}), 4, 7.0)[0] ==
          doctest::Approx(3.0).epsilon(1e-15));
    CHECK_THROWS_AS(germ::fake_quant(half, 5, 1.0), germ::InvalidBits);
    CHECK_THROWS_AS(germ::fake_quant(half, 16, 1.0), germ::InvalidBits);
    CHECK_THROWS_AS(germ::fake_quant(half, 8, 0.0), germ::ZeroRange);
    CHECK(germ::fake_quant(Tensor({3}), 8, 0.0) == Tensor({3}));  // zero data passes
}

TEST_CASE("round_half_even ties go to the even integer") {
    CHECK(germ::round_half_even(0.5) == 0.0);
    CHECK(germ::round_half_even(1.5) == 2.0);
    CHECK(germ::round_half_even(2.5) == 2.0);
    CHECK(germ::round_half_even(-0.5) == 0.0);
    CHECK(germ::round_half_even(-1.5) == -2.0);
    CHECK(germ::round_half_even(0.4999) == 0.0);
    CHECK(germ::round_half_even(0.5001) == 1.0);
}

TEST_CASE("fake_quant round-trip bound, idempotence, monotonicity") {
    Rng rng(31);
    for (int bits : {4, 6, 8}) {
        const double absmax = 2.5;
        const double scale = absmax / double((1 << (bits - 1)) - 1);
        Tensor x({256});
        for (double& v : x.raw()) v = rng.uniform(-absmax, absmax);
        Tensor q = germ::fake_quant(x, bits, absmax);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(std::abs(q[i] - x[i]) <= scale / 2.0 + 1e-12);
        }
        CHECK(germ::fake_quant(q, bits, absmax) == q);  // exactly idempotent

        double prev = -1e9;
        for (double v = -absmax; v <= absmax; v += absmax / 53.0) {
            const double qq = germ::fake_quant(Tensor::vector({v}), bits, absmax)[0];
            CHECK(qq >= prev);
            prev = qq;
        }
    }
}

TEST_CASE("quantization error decreases with bit width") {
    Rng rng(32);
    Tensor x({512});
    for (double& v : x.raw()) v = rng.normal();
    const double absmax = germ::inf_norm(x);
    double mse[3];
    int idx = 0;
    for (int bits : {4, 6, 8}) {
        Tensor q = germ::fake_quant(x, bits, absmax);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += (q[i] - x[i]) * (q[i] - x[i]);
        mse[idx++] = acc / double(x.size());
    }
    CHECK(mse[0] >= mse[1]);
    CHECK(mse[1] >= mse[2]);
}

TEST_CASE("affine fake quantization keeps values in range and is idempotent") {
    Rng rng(33);
    Tensor x({128});
    for (double& v : x.raw()) v = rng.uniform(-1.0, 3.0);
    Tensor q = germ::fake_quant_affine(x, 8, -1.0, 3.0);
    const double scale = 4.0 / 255.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(std::abs(q[i] - x[i]) <= scale / 2.0 + 1e-12);
    }
    CHECK(germ::fake_quant_affine(q, 8, -1.0, 3.0) == q);
}

TEST_CASE("smoothquant migration formula and bounds") {
    const auto s = germ::smoothquant_migrate({4.0}, {1.0}, 0.5);
    CHECK(s[0] == doctest::Approx(2.0).epsilon(1e-14));
    const auto s0 = germ::smoothquant_migrate({4.0, 9.0}, {2.0, 0.5}, 0.0);
    CHECK(s0[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(s0[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK_THROWS_AS(germ::smoothquant_migrate({1.0}, {1.0}, 1.5), germ::AlphaOutOfRange);
    CHECK_THROWS_AS(germ::smoothquant_migrate({1.0, 2.0}, {1.0}, 0.5), germ::ShapeMismatch);
    // Zero stats are floored, never a non-positive scale.
    const auto sf = germ::smoothquant_migrate({0.0}, {0.0}, 0.5);
    CHECK(sf[0] > 0.0);
}

TEST_CASE("migration is an exact algebraic identity on the product") {
    Rng rng(34);
    Tensor x = randn({6, 10}, rng);   // rows are channels
    Tensor w = randn({5, 6}, rng);    // consumes x as w * x
    std::vector<double> x_absmax(6), w_absmax(6);
    for (std::size_t c = 0; c < 6; ++c) {
        for (std::size_t j = 0; j < 10; ++j) {
            x_absmax[c] = std::max(x_absmax[c], std::abs(x.at(c, j)));
        }
        for (std::size_t r = 0; r < 5; ++r) {
            w_absmax[c] = std::max(w_absmax[c], std::abs(w.at(r, c)));
        }
    }
    const auto s = germ::smoothquant_migrate(x_absmax, w_absmax, 0.7);
    Tensor x_scaled = x, w_scaled = w;
    for (std::size_t c = 0; c < 6; ++c) {
        for (std::size_t j = 0; j < 10; ++j) x_scaled.at(c, j) /= s[c];
        for (std::size_t r = 0; r < 5; ++r) w_scaled.at(r, c) *= s[c];
    }
    Tensor base = germ::matmul(w, x);
    Tensor migrated = germ::matmul(w_scaled, x_scaled);
    migrated -= base;
    CHECK(germ::inf_norm(migrated) <= 1e-12 * std::max(1.0, germ::inf_norm(base)));
}

namespace {

ModelConfig quant_config(germ::AttentionVariant variant) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.model_dim = 8;
    cfg.ffn_dim = 16;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 8;
    cfg.block_mode = germ::BlockMode::Practical;
    cfg.alibi = true;
    cfg.variant = variant;
    return cfg;
}

std::vector<std::vector<std::size_t>> sample_sequences() {
    return {{0, 1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 0, 1, 2}};
}

}  // namespace

TEST_CASE("calibration records running maxima per site") {
    CalibrationStats stats;
    stats.observe("site", Tensor::matrix({{-3.0, 2.0}}), false);
    CHECK(stats.sites.at("site").absmax[0] == 3.0);
    stats.observe("site", Tensor::matrix({{1.0, -5.0}}), false);
    CHECK(stats.sites.at("site").absmax[0] == 5.0);
    CHECK(stats.sites.at("site").lo[0] == -5.0);
    CHECK(stats.sites.at("site").hi[0] == 2.0);
}

TEST_CASE("calibrate covers every linear input and score site") {
    Rng rng(41);
    Checkpoint ckpt = germ::init_model(quant_config(germ::AttentionVariant::Softmax1), rng, 0.4);
    QuantSpec spec;
    CalibrationStats stats = germ::calibrate(ckpt, sample_sequences(), spec);

    const ModelConfig& cfg = ckpt.config;
    std::vector<std::string> expected;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            expected.push_back(germ::names::attn_weight(l, w) + ".in");
        }
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            expected.push_back("l" + std::to_string(l) + ".h" + std::to_string(h) + ".scores");
        }
        expected.push_back(germ::names::ffn(l, "w1") + ".in");
        expected.push_back(germ::names::ffn(l, "w2") + ".in");
    }
    expected.push_back(std::string(germ::names::output_weight()) + ".in");

    CHECK(stats.sites.size() == expected.size());
    for (const std::string& site : expected) {
        CHECK(stats.sites.count(site) == 1);
    }
    CHECK_THROWS_AS(germ::calibrate(ckpt, {}, spec), germ::EmptySample);

    // Two-sequence stats are the elementwise max of the single-run stats.
    CalibrationStats first = germ::calibrate(ckpt, {sample_sequences()[0]}, spec);
    CalibrationStats second = germ::calibrate(ckpt, {sample_sequences()[1]}, spec);
    CalibrationStats both =
        germ::calibrate(ckpt, {sample_sequences()[0], sample_sequences()[1]}, spec);
    for (const auto& [site, st] : both.sites) {
        for (std::size_t c = 0; c < st.absmax.size(); ++c) {
            CHECK(st.absmax[c] == std::max(first.sites.at(site).absmax[c],
                                           second.sites.at(site).absmax[c]));
        }
    }
}

TEST_CASE("16W/16A is a bit-identical pass-through") {
    Rng rng(42);
    Checkpoint ckpt = germ::init_model(quant_config(germ::AttentionVariant::Softmax1), rng, 0.4);
    QuantSpec spec;
    spec.weight_bits = 16;
    spec.act_bits = 16;
    CalibrationStats stats = germ::calibrate(ckpt, sample_sequences(), spec);
    germ::QuantizedModel qm = germ::quantize_model(ckpt, spec, stats);
    for (const auto& seq : sample_sequences()) {
        Tensor base = germ::model_forward(ckpt, seq);
        Tensor quant = qm.forward(seq);
        CHECK(base == quant);
    }
}

TEST_CASE("W8A8 on the zero model keeps logits at zero") {
    Rng rng(43);
    Checkpoint ckpt = germ::init_model(quant_config(germ::AttentionVariant::Softmax1), rng, 0.0);
    QuantSpec spec;  // 8W/8A
    CalibrationStats stats = germ::calibrate(ckpt, sample_sequences(), spec);
    germ::QuantizedModel qm = germ::quantize_model(ckpt, spec, stats);
    Tensor out = qm.forward(sample_sequences()[0]);
    CHECK(germ::inf_norm(out) == 0.0);
}

TEST_CASE("smoothquant migration alone preserves the forward pass") {
    Rng rng(44);
    Checkpoint ckpt = germ::init_model(quant_config(germ::AttentionVariant::Softmax1), rng, 0.4);
    QuantSpec spec;
    spec.weight_bits = 16;
    spec.act_bits = 16;
    spec.method = germ::QuantMethod::SmoothQuant;
    spec.smoothquant_alpha = 0.5;
    CalibrationStats stats = germ::calibrate(ckpt, sample_sequences(), spec);
    germ::QuantizedModel qm = germ::quantize_model(ckpt, spec, stats);
    for (const auto& seq : sample_sequences()) {
        Tensor base = germ::model_forward(ckpt, seq);
        Tensor quant = qm.forward(seq);
        quant -= base;
        CHECK(germ::inf_norm(quant) <= 1e-10 * std::max(1.0, germ::inf_norm(base)));
    }
}

TEST_CASE("quantized forward needs calibration for every site") {
    Rng rng(45);
    Checkpoint ckpt = germ::init_model(quant_config(germ::AttentionVariant::Softmax1), rng, 0.4);
    QuantSpec spec;
    CalibrationStats stats = germ::calibrate(ckpt, sample_sequences(), spec);
    stats.sites.erase("l0.ffn.w1.in");
    CHECK_THROWS_AS(germ::quantize_model(ckpt, spec, stats), germ::MissingStats);
}

TEST_CASE("quant spec parsing and validation") {
    CHECK(QuantSpec::parse_bits("8W/8A") == std::pair<int, int>{8, 8});
    CHECK(QuantSpec::parse_bits("16W/16A") == std::pair<int, int>{16, 16});
    CHECK(QuantSpec::parse_bits("4W/6A") == std::pair<int, int>{4, 6});
    CHECK_THROWS_AS(QuantSpec::parse_bits("8/8"), germ::ConfigError);
    CHECK_THROWS_AS(QuantSpec::parse_bits("9W/9A"), germ::InvalidBits);
    QuantSpec spec;
    spec.smoothquant_alpha = 0.5;
    CHECK_THROWS_AS(spec.validate(), germ::ConfigError);  // alpha without smoothquant
    spec.method = germ::QuantMethod::SmoothQuant;
    spec.smoothquant_alpha = 1.5;
    CHECK_THROWS_AS(spec.validate(), germ::AlphaOutOfRange);
}
