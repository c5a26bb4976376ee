#include <doctest.h>

#include <cmath>

#include "germ/train.hpp"

using germ::Checkpoint;
using germ::MaskedBatch;
using germ::MccCounts;
using germ::ModelConfig;
using germ::Rng;
using germ::Tensor;
using germ::TrainConfig;
using germ::Vocab;

namespace {

ModelConfig toy_model_config(std::size_t vocab_size) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.model_dim = 16;
    cfg.ffn_dim = 32;
    cfg.vocab_size = vocab_size;
    cfg.max_seq_len = 32;
    cfg.block_mode = germ::BlockMode::Practical;
    cfg.alibi = true;
    return cfg;
}

std::vector<std::string> motif_corpus(std::uint64_t seed) {
    germ::CorpusSpec spec;
    spec.num_sequences = 48;
    spec.min_len = 16;
    spec.max_len = 32;
    spec.seed = seed;
    spec.motifs = {{"TATAGC", 0.7}, {"AAAAAA", 0.4}};
    return germ::gen_corpus(spec);
}

}  // namespace

TEST_CASE("mlm batches are reproducible and respect the mask budget") {
    const auto corpus = motif_corpus(1);
    Vocab vocab = germ::bpe_train(corpus, 4);  // no merges: tokens == characters
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.mask_rate = 0.15;

    Rng a(42), b(42);
    MaskedBatch ba = germ::mlm_batch(corpus, vocab, cfg, 32, a);
    MaskedBatch bb = germ::mlm_batch(corpus, vocab, cfg, 32, b);
    REQUIRE(ba.items.size() == bb.items.size());
    for (std::size_t i = 0; i < ba.items.size(); ++i) {
        CHECK(ba.items[i].inputs == bb.items[i].inputs);
        CHECK(ba.items[i].labels == bb.items[i].labels);
    }
}

TEST_CASE("mask count follows the binomial expectation") {
    const std::vector<std::string> corpus = {std::string(100, 'A')};
    Vocab vocab = germ::bpe_train({"ACGT"}, 4);
    TrainConfig cfg;
    cfg.batch_size = 1;
    cfg.mask_rate = 0.15;
    Rng rng(7);
    double total = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        MaskedBatch batch = germ::mlm_batch(corpus, vocab, cfg, 100, rng);
        total += static_cast<double>(batch.masked_count());
    }
    const double mean = total / draws;
    // sigma of the per-draw count is sqrt(100 * .15 * .85) ~ 3.57.
    const double tolerance = 3.0 * 3.57 / std::sqrt(double(draws));
    CHECK(std::abs(mean - 15.0) < tolerance);
}

TEST_CASE("masked corruption uses mask, random and unchanged tokens") {
    const std::vector<std::string> corpus = {std::string(64, 'G')};
    Vocab vocab = germ::bpe_train({"ACGT"}, 4);
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.mask_rate = 0.5;
    Rng rng(11);
    MaskedBatch batch = germ::mlm_batch(corpus, vocab, cfg, 64, rng);
    std::size_t masked = 0, unchanged = 0, randomized = 0;
    const std::size_t g_id = vocab.token_to_id.at("G");
    for (const auto& item : batch.items) {
        for (std::size_t i = 0; i < item.inputs.size(); ++i) {
            if (item.labels[i] < 0) continue;
            if (item.inputs[i] == vocab.mask_id()) {
                ++masked;
            } else if (item.inputs[i] == g_id) {
                ++unchanged;
            } else {
                ++randomized;
            }
        }
    }
    CHECK(masked > 0);
    CHECK(unchanged > 0);
    CHECK(randomized > 0);
    CHECK(masked > randomized);  // 80/10/10 split dominates
}

TEST_CASE("zero-weight model scores at the uniform cross-entropy") {
    Vocab vocab = germ::bpe_train(motif_corpus(3), 16);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(4);
    Checkpoint zero = germ::init_model(mcfg, rng, 0.0);
    MaskedBatch batch;
    MaskedBatch::Item item;
    item.inputs = {5, 6, 7, 8};
    item.labels = {6, -1, 5, -1};
    batch.items.push_back(item);
    CHECK(germ::mlm_loss(zero, batch) ==
          doctest::Approx(std::log(double(vocab.size()))).epsilon(1e-9));

    Checkpoint near_zero = germ::init_model(mcfg, rng, 0.02);
    CHECK(germ::mlm_loss(near_zero, batch) <= std::log(double(vocab.size())) + 0.1);
}

TEST_CASE("loss_and_grads rejects unmasked batches") {
    Vocab vocab = germ::bpe_train(motif_corpus(5), 8);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(5);
    Checkpoint ckpt = germ::init_model(mcfg, rng);
    MaskedBatch batch;
    MaskedBatch::Item item;
    item.inputs = {5, 6};
    item.labels = {-1, -1};
    batch.items.push_back(item);
    CHECK_THROWS_AS(germ::loss_and_grads(ckpt, batch), germ::NoMaskedPositions);
}

TEST_CASE("adamw hand cases") {
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 0;
    std::map<std::string, Tensor> params{{"p", Tensor::vector({2.0, -3.0})}};
    germ::GradMap zero{{"p", Tensor({2})}};
    germ::AdamState state;
    germ::adamw_step(params, zero, state, cfg);
    CHECK(params.at("p") == Tensor::vector({2.0, -3.0}));

    cfg.weight_decay = 0.01;
    germ::adamw_step(params, zero, state, cfg);
    CHECK(params.at("p")[0] == doctest::Approx(2.0 * 0.999).epsilon(1e-15));
    CHECK(params.at("p")[1] == doctest::Approx(-3.0 * 0.999).epsilon(1e-15));
}

TEST_CASE("adamw minimizes a quadratic monotonically") {
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 0;
    std::map<std::string, Tensor> params{{"p", Tensor::vector({0.0})}};
    germ::AdamState state;
    auto loss = [&] {
        const double d = params.at("p")[0] - 3.0;
        return d * d;
    };
    double prev = loss();
    for (int step = 0; step < 100; ++step) {
        germ::GradMap grads{{"p", Tensor::vector({2.0 * (params.at("p")[0] - 3.0)})}};
        germ::adamw_step(params, grads, state, cfg);
        const double now = loss();
        CHECK(now <= prev + 1e-12);
        prev = now;
    }
    CHECK(prev < loss() + 1.0);
    CHECK(params.at("p")[0] > 0.5);
}

TEST_CASE("short pretraining runs are deterministic and reduce the loss") {
    const auto corpus = motif_corpus(6);
    Vocab vocab = germ::bpe_train(corpus, 16);
    ModelConfig mcfg = toy_model_config(vocab.size());
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.seed = 12;
    cfg.warmup_steps = 20;

    germ::TrainResult a = germ::pretrain(cfg, corpus, vocab, mcfg);
    germ::TrainResult b = germ::pretrain(cfg, corpus, vocab, mcfg);
    CHECK(a.ckpt.params == b.ckpt.params);
    CHECK(a.loss_trace == b.loss_trace);

    REQUIRE(a.loss_trace.size() >= 40);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        head += a.loss_trace[i].second;
        tail += a.loss_trace[a.loss_trace.size() - 1 - i].second;
    }
    CHECK(tail / 20.0 < head / 20.0);
    CHECK(a.ckpt.step == 200);
}

TEST_CASE("surgery flips only the attention variant") {
    Vocab vocab = germ::bpe_train(motif_corpus(7), 8);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(8);
    Checkpoint ckpt = germ::init_model(mcfg, rng, 0.3);
    ckpt.step = 100;
    Checkpoint swapped = germ::surgery(ckpt);
    CHECK(swapped.config.variant == germ::AttentionVariant::Softmax1);
    CHECK(swapped.params == ckpt.params);
    CHECK(swapped.step == ckpt.step);
    CHECK_THROWS_AS(germ::surgery(swapped), germ::AlreadyOutlierFree);
}

TEST_CASE("mcc hand cases and conventions") {
    CHECK(germ::mcc({1, 1, 1, 1}) == 0.0);
    CHECK(germ::mcc({10, 10, 0, 0}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(germ::mcc({2, 3, 1, 0}) == doctest::Approx(6.0 / std::sqrt(72.0)).epsilon(1e-14));
    CHECK(germ::mcc({0, 5, 0, 5}) == 0.0);  // zero marginal
    CHECK(germ::mcc({0, 0, 0, 0}) == 0.0);
}

namespace {

std::vector<germ::LabeledExample> motif_task(std::uint64_t seed, std::size_t per_class) {
    germ::CorpusSpec pos;
    pos.num_sequences = per_class;
    pos.min_len = 12;
    pos.max_len = 16;
    pos.seed = seed;
    pos.motifs = {{"TATAGCGC", 1.0}};
    germ::CorpusSpec neg = pos;
    neg.seed = seed + 1;
    neg.motifs.clear();
    std::vector<germ::LabeledExample> data;
    for (const auto& s : germ::gen_corpus(pos)) data.push_back({s, 1});
    for (const auto& s : germ::gen_corpus(neg)) data.push_back({s, 0});
    return data;
}

}  // namespace

TEST_CASE("full-rank fine-tuning solves a separable motif task") {
    const auto corpus = motif_corpus(9);
    Vocab vocab = germ::bpe_train(corpus, 16);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(10);
    Checkpoint ckpt = germ::init_model(mcfg, rng, 0.05);

    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    cfg.seed = 3;
    cfg.warmup_steps = 10;
    const auto data = motif_task(21, 60);
    germ::FinetuneResult result = germ::finetune_classifier(
        ckpt, data, vocab, cfg, germ::FinetuneMode::Full);
    CHECK(result.mcc_value >= 0.9);
}

TEST_CASE("untrained heads give near-random mcc") {
    const auto corpus = motif_corpus(11);
    Vocab vocab = germ::bpe_train(corpus, 16);
    ModelConfig mcfg = toy_model_config(vocab.size());
    const auto data = motif_task(31, 30);

    std::vector<double> scores;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(100 + seed);
        Checkpoint ckpt = germ::init_model(mcfg, rng, 0.05);
        TrainConfig cfg;
        cfg.seed = seed;
        germ::FinetuneResult result = germ::finetune_classifier(
            ckpt, data, vocab, cfg, germ::FinetuneMode::Frozen);
        scores.push_back(std::abs(result.mcc_value));
    }
    std::sort(scores.begin(), scores.end());
    CHECK(scores[2] < 0.3);  // median over five seeds
}

TEST_CASE("single-class data is rejected") {
    Vocab vocab = germ::bpe_train(motif_corpus(13), 8);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(14);
    Checkpoint ckpt = germ::init_model(mcfg, rng);
    std::vector<germ::LabeledExample> data = {{"ACGTACGTACGT", 1}, {"GGTTGGTTAACC", 1}};
    TrainConfig cfg;
    CHECK_THROWS_AS(
        germ::finetune_classifier(ckpt, data, vocab, cfg, germ::FinetuneMode::Full),
        germ::SingleClassDataset);
}

TEST_CASE("lora fine-tuning reduces the training loss") {
    const auto corpus = motif_corpus(15);
    Vocab vocab = germ::bpe_train(corpus, 16);
    ModelConfig mcfg = toy_model_config(vocab.size());
    Rng rng(16);
    Checkpoint ckpt = germ::init_model(mcfg, rng, 0.05);

    TrainConfig cfg;
    cfg.steps = 50;
    cfg.batch_size = 8;
    cfg.lr = 5e-3;
    cfg.seed = 4;
    cfg.warmup_steps = 5;
    const auto data = motif_task(41, 30);
    germ::FinetuneResult result =
        germ::lora_finetune(ckpt, data, vocab, cfg, 8, 16.0);
    REQUIRE(result.adapters.has_value());
    REQUIRE(result.loss_trace.size() == 50);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += result.loss_trace[i].second;
        tail += result.loss_trace[result.loss_trace.size() - 1 - i].second;
    }
    CHECK(tail < head);
    // Only adapters and the head move; the backbone stays frozen: merged
    // deltas must be rank <= 8.
    for (const auto& [target, ad] : result.adapters->adapters) {
        CHECK(ad.rank == 8);
        CHECK(ad.a.cols() == 8);
    }
}
