#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "germ/checkpoint.hpp"
#include "germ/lora.hpp"

using germ::Checkpoint;
using germ::CheckpointDtype;
using germ::ModelConfig;
using germ::Rng;
using germ::Tensor;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("germ_test_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

Checkpoint make_model(double init_std = 0.3) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.model_dim = 4;
    cfg.ffn_dim = 4;
    cfg.vocab_size = 4;
    cfg.max_seq_len = 8;
    cfg.block_mode = germ::BlockMode::Formal;
    cfg.variant = germ::AttentionVariant::Softmax1;
    Rng rng(71);
    Checkpoint ckpt = germ::init_model(cfg, rng, init_std);
    ckpt.step = 123;
    return ckpt;
}

}  // namespace

TEST_CASE("f64 checkpoints round-trip exactly") {
    Checkpoint ckpt = make_model();
    const std::string path = temp_path("f64.germ");
    germ::save_checkpoint(ckpt, path, CheckpointDtype::F64);
    Checkpoint loaded = germ::load_checkpoint(path);
    CHECK(loaded.step == ckpt.step);
    CHECK(loaded.kind == ckpt.kind);
    CHECK(loaded.params.size() == ckpt.params.size());
    for (const auto& [name, tensor] : ckpt.params) {
        CHECK(loaded.param(name) == tensor);
    }
    std::remove(path.c_str());
}

TEST_CASE("f32 checkpoints are bit-stable at their declared precision") {
    Checkpoint ckpt = make_model();
    const std::string a = temp_path("f32a.germ");
    const std::string b = temp_path("f32b.germ");
    germ::save_checkpoint(ckpt, a, CheckpointDtype::F32);
    Checkpoint loaded = germ::load_checkpoint(a);
    germ::save_checkpoint(loaded, b, CheckpointDtype::F32);
    CHECK(slurp(a) == slurp(b));
    // Identical in-memory state always produces identical bytes.
    const std::string c = temp_path("f32c.germ");
    germ::save_checkpoint(ckpt, c, CheckpointDtype::F32);
    CHECK(slurp(a) == slurp(c));
    std::remove(a.c_str());
    std::remove(b.c_str());
    std::remove(c.c_str());
}

TEST_CASE("corrupt files are rejected with precise errors") {
    Checkpoint ckpt = make_model();
    const std::string path = temp_path("corrupt.germ");
    germ::save_checkpoint(ckpt, path, CheckpointDtype::F32);
    std::string blob = slurp(path);

    {
        std::string bad = blob;
        bad[0] = 'X';
        std::ofstream(path, std::ios::binary) << bad;
        CHECK_THROWS_AS(germ::load_checkpoint(path), germ::BadMagic);
    }
    {
        std::string bad = blob;
        bad[4] = 99;  // version
        std::ofstream(path, std::ios::binary) << bad;
        CHECK_THROWS_AS(germ::load_checkpoint(path), germ::VersionUnsupported);
    }
    {
        std::string bad = blob.substr(0, blob.size() - 17);
        std::ofstream(path, std::ios::binary) << bad;
        CHECK_THROWS_AS(germ::load_checkpoint(path), germ::CorruptManifest);
    }
    CHECK_THROWS_AS(germ::load_checkpoint(temp_path("missing.germ")), germ::IoError);
    std::remove(path.c_str());
}

TEST_CASE("adapter sets ride the checkpoint container") {
    Checkpoint model = make_model();
    germ::AdapterSet set;
    Rng rng(72);
    germ::LoraAdapter ad;
    ad.target = "l0.h0.wq";
    ad.rank = 2;
    ad.alpha = 4.0;
    ad.a = randn({4, 2}, rng);
    ad.b = randn({2, 4}, rng);
    set.adapters[ad.target] = ad;
    set.replaced_biases["l0.ffn.b1"] = Tensor::vector({1, 2, 3, 4});

    Checkpoint container = set.to_checkpoint(model.config);
    CHECK(container.kind == "adapters");
    const std::string path = temp_path("adapters.germ");
    germ::save_checkpoint(container, path, CheckpointDtype::F64);
    germ::AdapterSet loaded = germ::AdapterSet::from_checkpoint(germ::load_checkpoint(path));

    REQUIRE(loaded.adapters.count("l0.h0.wq") == 1);
    const germ::LoraAdapter& lad = loaded.adapters.at("l0.h0.wq");
    CHECK(lad.rank == 2);
    CHECK(lad.alpha == 4.0);
    CHECK(lad.a == ad.a);
    CHECK(lad.b == ad.b);
    CHECK(loaded.replaced_biases.at("l0.ffn.b1") == Tensor::vector({1, 2, 3, 4}));
    std::remove(path.c_str());

    CHECK_THROWS_AS(germ::AdapterSet::from_checkpoint(model), germ::ConfigMismatch);
}

TEST_CASE("model config json round trip") {
    ModelConfig cfg;
    cfg.layers = 3;
    cfg.heads = 2;
    cfg.model_dim = 16;
    cfg.ffn_dim = 32;
    cfg.vocab_size = 20;
    cfg.max_seq_len = 12;
    cfg.alibi = true;
    cfg.variant = germ::AttentionVariant::Softmax1;
    const std::string text = germ::model_config_to_json(cfg);
    ModelConfig back = germ::model_config_from_json_text(text);
    CHECK(back.same_architecture(cfg));
    CHECK(back.variant == cfg.variant);
    CHECK(back.use_output_softmax1() == cfg.use_output_softmax1());
    CHECK_THROWS_AS(germ::model_config_from_json_text("{not json"), germ::ConfigError);
}
