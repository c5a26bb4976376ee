#include "germ/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "germ/quant.hpp"

namespace germ {

void TrainConfig::validate() const {
    if (steps == 0 || batch_size == 0) throw ConfigError("steps and batch_size must be positive");
    if (lr <= 0.0 || eps <= 0.0) throw ConfigError("lr and eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (mask_rate <= 0.0 || mask_rate >= 1.0) throw ConfigError("mask_rate must lie in (0, 1)");
}

std::size_t MaskedBatch::masked_count() const {
    std::size_t n = 0;
    for (const Item& item : items) {
        for (long l : item.labels) {
            if (l >= 0) ++n;
        }
    }
    return n;
}

MaskedBatch mlm_batch(const std::vector<std::string>& corpus, const Vocab& vocab,
                      const TrainConfig& cfg, std::size_t max_len, Rng& rng) {
    if (corpus.empty()) throw EmptyCorpus("mlm_batch on empty corpus");
    MaskedBatch batch;
    const std::size_t regular = vocab.size() - vocab.first_regular_id();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::string& seq = corpus[rng.below(corpus.size())];
        std::vector<std::size_t> ids = encode(seq, vocab);
        if (ids.size() > max_len) ids.resize(max_len);
        if (ids.empty()) continue;
        MaskedBatch::Item item;
        item.labels.assign(ids.size(), -1);
        item.inputs = ids;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (rng.uniform() >= cfg.mask_rate) continue;
            item.labels[i] = static_cast<long>(ids[i]);
            const double roll = rng.uniform();
            if (roll < 0.8) {
                item.inputs[i] = vocab.mask_id();
            } else if (roll < 0.9) {
                item.inputs[i] = vocab.first_regular_id() + rng.below(regular);
            }  // else keep the original token
        }
        batch.items.push_back(std::move(item));
    }
    return batch;
}

namespace {

// Cross-entropy over masked positions of one sequence; writes dlogits
// (scaled by inv_total) when requested.
double masked_ce(const ModelConfig& cfg, const Tensor& logits,
                 const std::vector<long>& labels, double inv_total, Tensor* dlogits) {
    Tensor probs = output_probs(cfg, logits);
    double loss = 0.0;
    if (dlogits) *dlogits = Tensor(logits.shape());
    for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] < 0) continue;
        const std::size_t y = static_cast<std::size_t>(labels[j]);
        const double p = probs.at(y, j);
        loss += -std::log(std::max(p, 1e-300));
        if (dlogits) {
            for (std::size_t i = 0; i < logits.rows(); ++i) {
                dlogits->at(i, j) = (probs.at(i, j) - (i == y ? 1.0 : 0.0)) * inv_total;
            }
        }
    }
    return loss;
}

void accumulate_embedding_grad(GradMap& grads, const Checkpoint& ckpt,
                               const std::vector<std::size_t>& tokens, const Tensor& dx0) {
    const Tensor& emb = ckpt.param(names::embedding());
    auto it = grads.find(names::embedding());
    if (it == grads.end()) it = grads.emplace(names::embedding(), Tensor(emb.shape())).first;
    Tensor& g = it->second;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        for (std::size_t i = 0; i < dx0.rows(); ++i) {
            g.at(i, tokens[j]) += dx0.at(i, j);
        }
    }
}

}  // namespace

LossAndGrads loss_and_grads(const Checkpoint& ckpt, const MaskedBatch& batch) {
    const std::size_t total = batch.masked_count();
    if (total == 0) throw NoMaskedPositions("batch has no masked positions");
    const double inv_total = 1.0 / static_cast<double>(total);

    LossAndGrads out;
    for (const MaskedBatch::Item& item : batch.items) {
        Tensor x0 = embed_tokens(ckpt, item.inputs);
        detail::ForwardCache cache = detail::cached_forward(ckpt, x0);
        Tensor dlogits;
        out.loss += masked_ce(ckpt.config, cache.logits, item.labels, inv_total, &dlogits);
        Tensor dx0;
        detail::backward(ckpt, cache, &dlogits, nullptr, out.grads, &dx0);
        accumulate_embedding_grad(out.grads, ckpt, item.inputs, dx0);
    }
    out.loss *= inv_total;
    return out;
}

double mlm_loss(const Checkpoint& ckpt, const MaskedBatch& batch) {
    const std::size_t total = batch.masked_count();
    if (total == 0) throw NoMaskedPositions("batch has no masked positions");
    double loss = 0.0;
    for (const MaskedBatch::Item& item : batch.items) {
        Tensor logits = model_forward(ckpt, item.inputs);
        loss += masked_ce(ckpt.config, logits, item.labels, 0.0, nullptr);
    }
    return loss / static_cast<double>(total);
}

void adamw_step(std::map<std::string, Tensor>& params, const GradMap& grads,
                AdamState& state, const TrainConfig& cfg) {
    state.t += 1;
    const double t = static_cast<double>(state.t);
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && state.t <= static_cast<std::int64_t>(cfg.warmup_steps)) {
        lr *= t / static_cast<double>(cfg.warmup_steps);
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);

    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // parameter not trained this step
        const Tensor& g = git->second;
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Tensor(p.shape())).first;
            state.v.emplace(name, Tensor(p.shape()));
        }
        Tensor& m = mit->second;
        Tensor& v = state.v.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
}

void adamw_step(Checkpoint& ckpt, const GradMap& grads, AdamState& state,
                const TrainConfig& cfg) {
    adamw_step(ckpt.params, grads, state, cfg);
}

namespace {

TrainResult run_mlm_training(Checkpoint ckpt, const TrainConfig& cfg,
                             const std::vector<std::string>& corpus, const Vocab& vocab,
                             std::size_t steps, Rng data_rng) {
    TrainResult result;
    AdamState state;
    const std::size_t start = static_cast<std::size_t>(ckpt.step);
    for (std::size_t step = 1; step <= steps; ++step) {
        MaskedBatch batch = mlm_batch(corpus, vocab, cfg, ckpt.config.max_seq_len, data_rng);
        if (batch.masked_count() == 0) continue;  // nothing to score this step
        LossAndGrads lg = loss_and_grads(ckpt, batch);
        adamw_step(ckpt, lg.grads, state, cfg);
        result.loss_trace.emplace_back(start + step, lg.loss);
    }
    ckpt.step = static_cast<std::int64_t>(start + steps);
    result.ckpt = std::move(ckpt);
    return result;
}

}  // namespace

TrainResult pretrain(const TrainConfig& cfg, const std::vector<std::string>& corpus,
                     const Vocab& vocab, const ModelConfig& model_cfg) {
    cfg.validate();
    model_cfg.validate();
    if (corpus.empty()) throw EmptyCorpus("pretrain on empty corpus");
    Rng root(cfg.seed);
    Rng init_rng = root.fork(1);
    Checkpoint ckpt = init_model(model_cfg, init_rng);
    return run_mlm_training(std::move(ckpt), cfg, corpus, vocab, cfg.steps, root.fork(2));
}

TrainResult continue_training(const Checkpoint& ckpt, const TrainConfig& cfg,
                              const std::vector<std::string>& corpus, const Vocab& vocab,
                              std::size_t extra_steps) {
    cfg.validate();
    if (corpus.empty()) throw EmptyCorpus("continue_training on empty corpus");
    Rng root(cfg.seed);
    // Forked off the resume step so the stream does not replay pretraining.
    Rng data_rng = root.fork(3).fork(static_cast<std::uint64_t>(ckpt.step));
    return run_mlm_training(ckpt, cfg, corpus, vocab, extra_steps, std::move(data_rng));
}

Checkpoint surgery(const Checkpoint& ckpt) {
    if (ckpt.kind != "model") throw ConfigMismatch("surgery expects a model checkpoint");
    if (ckpt.config.variant == AttentionVariant::Softmax1) {
        throw AlreadyOutlierFree("checkpoint already uses Softmax1 attention");
    }
    Checkpoint out = ckpt;
    out.config.variant = AttentionVariant::Softmax1;
    return out;
}

double mcc(const MccCounts& c) {
    const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
    const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom <= 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(denom);
}

FinetuneMode finetune_mode_from_string(const std::string& s) {
    if (s == "full") return FinetuneMode::Full;
    if (s == "frozen") return FinetuneMode::Frozen;
    if (s == "lora") return FinetuneMode::Lora;
    if (s == "qlora") return FinetuneMode::QLora;
    if (s == "loftq") return FinetuneMode::LoftQ;
    throw ConfigError("unknown finetune mode '" + s + "'");
}

std::string to_string(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::Full: return "full";
        case FinetuneMode::Frozen: return "frozen";
        case FinetuneMode::Lora: return "lora";
        case FinetuneMode::QLora: return "qlora";
        case FinetuneMode::LoftQ: return "loftq";
    }
    return "?";
}

namespace {

constexpr const char* kHeadW = "head.w";
constexpr const char* kHeadB = "head.b";

struct EncodedExample {
    std::vector<std::size_t> ids;
    int label;
};

// Classifier loss over a batch: mean-pooled final representation through the
// 2 x D head stored in the checkpoint's params. Returns the mean
// cross-entropy and accumulates gradients (model + head).
double classifier_loss_and_grads(const Checkpoint& ckpt,
                                 const std::vector<const EncodedExample*>& batch,
                                 GradMap& grads) {
    const Tensor& head_w = ckpt.param(kHeadW);
    const Tensor& head_b = ckpt.param(kHeadB);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const EncodedExample* ex : batch) {
        Tensor x0 = embed_tokens(ckpt, ex->ids);
        detail::ForwardCache cache = detail::cached_forward(ckpt, x0);
        const Tensor& rep = cache.final_rep;
        const std::size_t d = rep.rows(), n = rep.cols();

        std::vector<double> pooled(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < n; ++j) pooled[i] += rep.at(i, j);
            pooled[i] /= static_cast<double>(n);
        }
        std::vector<double> logits(2, 0.0);
        for (std::size_t c = 0; c < 2; ++c) {
            double acc = head_b[c];
            for (std::size_t i = 0; i < d; ++i) acc += head_w.at(c, i) * pooled[i];
            logits[c] = acc;
        }
        const std::vector<double> p = softmax(logits);
        const std::size_t y = ex->label ? 1 : 0;
        loss += -std::log(std::max(p[y], 1e-300)) * inv_batch;

        std::vector<double> dlogits(2);
        for (std::size_t c = 0; c < 2; ++c) {
            dlogits[c] = (p[c] - (c == y ? 1.0 : 0.0)) * inv_batch;
        }
        Tensor& gw = grads.try_emplace(kHeadW, Tensor(head_w.shape())).first->second;
        Tensor& gb = grads.try_emplace(kHeadB, Tensor(head_b.shape())).first->second;
        Tensor drep({d, n});
        for (std::size_t c = 0; c < 2; ++c) {
            gb[c] += dlogits[c];
            for (std::size_t i = 0; i < d; ++i) {
                gw.at(c, i) += dlogits[c] * pooled[i];
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            double dpooled = 0.0;
            for (std::size_t c = 0; c < 2; ++c) dpooled += head_w.at(c, i) * dlogits[c];
            const double per_col = dpooled / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) drep.at(i, j) = per_col;
        }
        Tensor dx0;
        detail::backward(ckpt, cache, nullptr, &drep, grads, &dx0);
        accumulate_embedding_grad(grads, ckpt, ex->ids, dx0);
    }
    return loss;
}

int predict(const Checkpoint& ckpt, const EncodedExample& ex) {
    Tensor x0 = embed_tokens(ckpt, ex.ids);
    Tensor rep = forward_blocks(ckpt, x0);
    const Tensor& head_w = ckpt.param(kHeadW);
    const Tensor& head_b = ckpt.param(kHeadB);
    const std::size_t d = rep.rows(), n = rep.cols();
    double best = 0.0;
    int arg = 0;
    for (std::size_t c = 0; c < 2; ++c) {
        double acc = head_b[c];
        for (std::size_t i = 0; i < d; ++i) {
            double pooled = 0.0;
            for (std::size_t j = 0; j < n; ++j) pooled += rep.at(i, j);
            acc += head_w.at(c, i) * pooled / static_cast<double>(n);
        }
        if (c == 0 || acc > best) {
            best = acc;
            arg = static_cast<int>(c);
        }
    }
    return arg;
}

// 4-bit per-tensor weight quantization of the backbone, the QLoRA-style base.
void quantize_backbone(Checkpoint& ckpt) {
    for (const std::string& name : quantizable_weights(ckpt)) {
        Tensor& w = ckpt.param(name);
        w = fake_quant(w, 4, inf_norm(w));
    }
}

}  // namespace

FinetuneResult finetune_classifier(const Checkpoint& ckpt,
                                   const std::vector<LabeledExample>& data,
                                   const Vocab& vocab, const TrainConfig& cfg,
                                   FinetuneMode mode, std::size_t rank, double alpha) {
    cfg.validate();
    if (data.empty()) throw EmptySample("finetune_classifier on empty dataset");
    bool has_pos = false, has_neg = false;
    for (const LabeledExample& ex : data) {
        (ex.label ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) {
        throw SingleClassDataset("classification data covers a single class");
    }

    Rng root(cfg.seed);
    Rng shuffle_rng = root.fork(10);
    Rng init_rng = root.fork(11);
    Rng batch_rng = root.fork(12);

    std::vector<EncodedExample> encoded;
    encoded.reserve(data.size());
    for (const LabeledExample& ex : data) {
        EncodedExample e;
        e.ids = encode(ex.sequence, vocab);
        if (e.ids.size() > ckpt.config.max_seq_len) e.ids.resize(ckpt.config.max_seq_len);
        if (e.ids.empty()) continue;
        e.label = ex.label ? 1 : 0;
        encoded.push_back(std::move(e));
    }
    if (encoded.size() < 2) throw EmptySample("not enough usable examples");

    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i-- > 1;) {
        std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    }
    const std::size_t train_count = std::max<std::size_t>(1, (order.size() * 4) / 5);
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + train_count);
    std::vector<std::size_t> eval_idx(order.begin() + train_count, order.end());
    if (eval_idx.empty()) eval_idx.push_back(order.back());

    // Mode-specific backbone preparation.
    Checkpoint base = ckpt;
    std::optional<AdapterSet> adapters;
    if (mode == FinetuneMode::Lora || mode == FinetuneMode::QLora ||
        mode == FinetuneMode::LoftQ) {
        AdapterSet set;
        if (mode == FinetuneMode::QLora) quantize_backbone(base);
        for (const std::string& target : default_lora_targets(base.config)) {
            Tensor& w = base.param(target);
            if (mode == FinetuneMode::LoftQ) {
                LoftqResult lq = loftq_init(w, 4, rank, 3, target);
                w = lq.q;
                LoraAdapter ad = lq.adapter;
                // Rescale the factors so the (alpha / rank) merge scaling
                // reproduces the initialization delta exactly.
                const double old_scaling = ad.alpha / static_cast<double>(ad.rank);
                ad.alpha = alpha;
                ad.a *= old_scaling * static_cast<double>(ad.rank) / alpha;
                set.adapters[target] = std::move(ad);
            } else {
                LoraAdapter ad;
                ad.target = target;
                ad.rank = rank;
                ad.alpha = alpha;
                ad.a = randn({w.rows(), rank}, init_rng, 0.02);
                ad.b = Tensor({rank, w.cols()});  // zero: merged delta starts at zero
                set.adapters[target] = std::move(ad);
            }
        }
        if (mode == FinetuneMode::LoftQ) {
            // Non-adapted weights still ride on the 4-bit base.
            for (const std::string& name : quantizable_weights(base)) {
                if (set.adapters.count(name)) continue;
                Tensor& w = base.param(name);
                w = fake_quant(w, 4, inf_norm(w));
            }
        }
        adapters = std::move(set);
    }

    base.params[kHeadW] = randn({2, base.config.model_dim}, init_rng, 0.02);
    base.params[kHeadB] = Tensor({2});

    FinetuneResult result;
    AdamState state;
    const std::size_t steps = mode == FinetuneMode::Frozen ? 0 : cfg.steps;
    for (std::size_t step = 1; step <= steps; ++step) {
        std::vector<const EncodedExample*> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(&encoded[train_idx[batch_rng.below(train_idx.size())]]);
        }
        Checkpoint merged = adapters ? apply_adapters(base, *adapters) : base;
        GradMap grads;
        const double loss = classifier_loss_and_grads(merged, batch, grads);
        result.loss_trace.emplace_back(step, loss);

        if (!adapters) {
            adamw_step(base, grads, state, cfg);
            continue;
        }
        // Chain merged-weight gradients onto the adapter factors; only the
        // adapters and the head train.
        std::map<std::string, Tensor> trainable;
        GradMap adapter_grads;
        for (auto& [target, ad] : adapters->adapters) {
            const double scaling = ad.alpha / static_cast<double>(ad.rank);
            auto git = grads.find(target);
            Tensor dw = git != grads.end() ? git->second
                                           : Tensor(base.param(target).shape());
            Tensor ga = matmul(dw, ad.b.transposed());
            ga *= scaling;
            Tensor gb = matmul(ad.a.transposed(), dw);
            gb *= scaling;
            trainable["adapter." + target + ".a"] = ad.a;
            trainable["adapter." + target + ".b"] = ad.b;
            adapter_grads["adapter." + target + ".a"] = std::move(ga);
            adapter_grads["adapter." + target + ".b"] = std::move(gb);
        }
        trainable[kHeadW] = base.param(kHeadW);
        trainable[kHeadB] = base.param(kHeadB);
        adapter_grads[kHeadW] = grads.at(kHeadW);
        adapter_grads[kHeadB] = grads.at(kHeadB);
        adamw_step(trainable, adapter_grads, state, cfg);
        for (auto& [target, ad] : adapters->adapters) {
            ad.a = trainable.at("adapter." + target + ".a");
            ad.b = trainable.at("adapter." + target + ".b");
        }
        base.param(kHeadW) = trainable.at(kHeadW);
        base.param(kHeadB) = trainable.at(kHeadB);
    }

    Checkpoint final_model = adapters ? apply_adapters(base, *adapters) : base;
    for (std::size_t idx : eval_idx) {
        const EncodedExample& ex = encoded[idx];
        const int pred = predict(final_model, ex);
        if (ex.label == 1 && pred == 1) ++result.counts.tp;
        if (ex.label == 0 && pred == 0) ++result.counts.tn;
        if (ex.label == 0 && pred == 1) ++result.counts.fp;
        if (ex.label == 1 && pred == 0) ++result.counts.fn;
    }
    result.mcc_value = mcc(result.counts);
    result.head_w = final_model.param(kHeadW);
    result.head_b = final_model.param(kHeadB);
    final_model.params.erase(kHeadW);
    final_model.params.erase(kHeadB);
    result.model = std::move(final_model);
    result.adapters = std::move(adapters);
    return result;
}

FinetuneResult lora_finetune(const Checkpoint& ckpt, const std::vector<LabeledExample>& data,
                             const Vocab& vocab, const TrainConfig& cfg, std::size_t rank,
                             double alpha) {
    return finetune_classifier(ckpt, data, vocab, cfg, FinetuneMode::Lora, rank, alpha);
}

}  // namespace germ
