#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "germ/bpe.hpp"
#include "germ/grad.hpp"
#include "germ/lora.hpp"
#include "germ/model.hpp"

namespace germ {

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    double lr = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double mask_rate = 0.15;
    std::uint64_t seed = 0;
    std::size_t warmup_steps = 50;

    void validate() const;
};

// One masked-LM batch: per sequence, the corrupted inputs plus labels
// (-1 marks unscored positions).
struct MaskedBatch {
    struct Item {
        std::vector<std::size_t> inputs;
        std::vector<long> labels;
    };
    std::vector<Item> items;

    std::size_t masked_count() const;
};

// 80% [MASK] / 10% random token / 10% unchanged corruption at mask_rate.
MaskedBatch mlm_batch(const std::vector<std::string>& corpus, const Vocab& vocab,
                      const TrainConfig& cfg, std::size_t max_len, Rng& rng);

struct LossAndGrads {
    double loss = 0.0;
    GradMap grads;
};

// Mean cross-entropy over every masked position in the batch, with analytic
// gradients for all parameters. Throws NoMaskedPositions when nothing is
// scored.
LossAndGrads loss_and_grads(const Checkpoint& ckpt, const MaskedBatch& batch);

double mlm_loss(const Checkpoint& ckpt, const MaskedBatch& batch);

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::int64_t t = 0;
};

// Decoupled weight decay; linear warmup over cfg.warmup_steps.
void adamw_step(std::map<std::string, Tensor>& params, const GradMap& grads,
                AdamState& state, const TrainConfig& cfg);
void adamw_step(Checkpoint& ckpt, const GradMap& grads, AdamState& state,
                const TrainConfig& cfg);

struct TrainResult {
    Checkpoint ckpt;
    std::vector<std::pair<std::size_t, double>> loss_trace;  // (step, loss)
};

TrainResult pretrain(const TrainConfig& cfg, const std::vector<std::string>& corpus,
                     const Vocab& vocab, const ModelConfig& model_cfg);

// Continues MLM training from an existing checkpoint (fresh optimizer state,
// data stream forked from the checkpoint's step so it does not replay).
TrainResult continue_training(const Checkpoint& ckpt, const TrainConfig& cfg,
                              const std::vector<std::string>& corpus, const Vocab& vocab,
                              std::size_t extra_steps);

// Swaps a softmax-trained checkpoint to Softmax1 attention, parameters
// bit-identical. Throws AlreadyOutlierFree on a Softmax1 checkpoint.
Checkpoint surgery(const Checkpoint& ckpt);

struct MccCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

// Binary Matthews correlation; 0 whenever a marginal vanishes.
double mcc(const MccCounts& counts);

struct LabeledExample {
    std::string sequence;
    int label = 0;  // binary
};

enum class FinetuneMode { Full, Frozen, Lora, QLora, LoftQ };

FinetuneMode finetune_mode_from_string(const std::string& s);
std::string to_string(FinetuneMode m);

struct FinetuneResult {
    Checkpoint model;               // backbone actually used at eval time
    Tensor head_w;                  // 2 x D classification head
    Tensor head_b;                  // 2
    std::optional<AdapterSet> adapters;
    MccCounts counts;
    double mcc_value = 0.0;
    std::vector<std::pair<std::size_t, double>> loss_trace;
};

// Mean-pooled final hidden state into a linear head; trains per mode and
// reports MCC on a held-out split. LoRA-family modes train adapters (and the
// head) against a frozen -- for QLoRA/LoftQ 4-bit fake-quantized -- backbone.
FinetuneResult finetune_classifier(const Checkpoint& ckpt,
                                   const std::vector<LabeledExample>& data,
                                   const Vocab& vocab, const TrainConfig& cfg,
                                   FinetuneMode mode, std::size_t rank = 8,
                                   double alpha = 16.0);

// Plain-LoRA convenience wrapper used by the adapter module's tests.
FinetuneResult lora_finetune(const Checkpoint& ckpt, const std::vector<LabeledExample>& data,
                             const Vocab& vocab, const TrainConfig& cfg, std::size_t rank,
                             double alpha);

}  // namespace germ
