#include "germ/model.hpp"

#include <cmath>
#include <string>

#include "germ/linalg.hpp"

namespace germ {

Tensor& Checkpoint::param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw TargetMissing("missing parameter '" + name + "'");
    return it->second;
}

const Tensor& Checkpoint::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw TargetMissing("missing parameter '" + name + "'");
    return it->second;
}

namespace names {

std::string head_weight(std::size_t layer, std::size_t head, const char* which) {
    return "l" + std::to_string(layer) + ".h" + std::to_string(head) + "." + which;
}

std::string attn_weight(std::size_t layer, const char* which) {
    return "l" + std::to_string(layer) + ".attn." + which;
}

std::string ffn(std::size_t layer, const char* which) {
    return "l" + std::to_string(layer) + ".ffn." + which;
}

std::string layer_norm(std::size_t layer, int which, const char* part) {
    return "l" + std::to_string(layer) + ".ln" + std::to_string(which) + "." + part;
}

}  // namespace names

Checkpoint init_model(const ModelConfig& cfg, Rng& rng, double init_std) {
    cfg.validate();
    Checkpoint ckpt;
    ckpt.config = cfg;
    const std::size_t d = cfg.model_dim, f = cfg.ffn_dim, v = cfg.vocab_size;

    ckpt.params[names::embedding()] = randn({d, v}, rng, init_std);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (cfg.block_mode == BlockMode::Formal) {
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                for (const char* w : {"wq", "wk", "wv", "wo"}) {
                    ckpt.params[names::head_weight(l, h, w)] = randn({d, d}, rng, init_std);
                }
            }
        } else {
            for (const char* w : {"wq", "wk", "wv", "wo"}) {
                ckpt.params[names::attn_weight(l, w)] = randn({d, d}, rng, init_std);
            }
            for (const char* b : {"bq", "bk", "bv", "bo"}) {
                ckpt.params[names::attn_weight(l, b)] = Tensor({d});
            }
            for (int which : {1, 2}) {
                Tensor gain({d});
                for (double& x : gain.raw()) x = 1.0;
                ckpt.params[names::layer_norm(l, which, "g")] = gain;
                ckpt.params[names::layer_norm(l, which, "b")] = Tensor({d});
            }
        }
        ckpt.params[names::ffn(l, "w1")] = randn({f, d}, rng, init_std);
        ckpt.params[names::ffn(l, "b1")] = Tensor({f});
        ckpt.params[names::ffn(l, "w2")] = randn({d, f}, rng, init_std);
        ckpt.params[names::ffn(l, "b2")] = Tensor({d});
    }

    if (cfg.block_mode == BlockMode::Practical) {
        Tensor gain({d});
        for (double& x : gain.raw()) x = 1.0;
        ckpt.params[names::final_norm_gain()] = gain;
        ckpt.params[names::final_norm_bias()] = Tensor({d});
        ckpt.params[names::output_bias()] = Tensor({v});
    }
    ckpt.params[names::output_weight()] = randn({v, d}, rng, init_std);
    return ckpt;
}

std::string to_string(ProbeKind k) {
    switch (k) {
        case ProbeKind::FfnOutput: return "ffn_output";
        case ProbeKind::LayerNormOutput: return "layernorm_output";
        case ProbeKind::AttentionProbs: return "attention_probs";
    }
    return "?";
}

void ActivationTrace::add(std::string name, ProbeKind kind, std::size_t layer, Tensor t) {
    probes.push_back(Probe{std::move(name), kind, layer, std::move(t)});
}

namespace {

Tensor hook(const ForwardOptions& opts, const std::string& site, Tensor x) {
    return opts.act_hook ? opts.act_hook->transform(site, std::move(x)) : x;
}

// x += b * 1^T (broadcast a column bias over all positions).
void add_column_bias(Tensor& x, const Tensor& b) {
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
        const double bi = b[i];
        for (std::size_t j = 0; j < c; ++j) x.at(i, j) += bi;
    }
}

// Per-column LayerNorm with learned affine parameters, eps 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    constexpr double kEps = 1e-5;
    const std::size_t d = x.rows(), n = x.cols();
    Tensor out({d, n});
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + kEps);
        for (std::size_t i = 0; i < d; ++i) {
            out.at(i, j) = gain[i] * (x.at(i, j) - mean) * inv_std + bias[i];
        }
    }
    return out;
}

Tensor rows_slice(const Tensor& x, std::size_t row0, std::size_t count) {
    Tensor out({count, x.cols()});
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(row0 + i, j);
    }
    return out;
}

Tensor formal_attention(const Checkpoint& ckpt, std::size_t layer, const Tensor& z,
                        std::vector<Tensor>* head_probs, const ForwardOptions& opts) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t d = cfg.model_dim, n = z.cols();
    Tensor out({d, n});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Tensor& wq = ckpt.param(names::head_weight(layer, h, "wq"));
        const Tensor& wk = ckpt.param(names::head_weight(layer, h, "wk"));
        const Tensor& wv = ckpt.param(names::head_weight(layer, h, "wv"));
        const Tensor& wo = ckpt.param(names::head_weight(layer, h, "wo"));

        const std::string stem = "l" + std::to_string(layer) + ".h" + std::to_string(h);
        Tensor q = matmul(wq, hook(opts, names::head_weight(layer, h, "wq") + ".in", z));
        Tensor k = matmul(wk, hook(opts, names::head_weight(layer, h, "wk") + ".in", z));
        Tensor v = matmul(wv, hook(opts, names::head_weight(layer, h, "wv") + ".in", z));

        Tensor scores = matmul(k.transposed(), q);  // N x N, unscaled per the formal equations
        scores = hook(opts, stem + ".scores", std::move(scores));
        activate_columns_inplace(scores, cfg.variant);
        if (head_probs) head_probs->push_back(scores);
        if (opts.trace) opts.trace->add(stem + ".probs", ProbeKind::AttentionProbs, layer, scores);

        Tensor av = matmul(v, scores);
        out += matmul(wo, hook(opts, names::head_weight(layer, h, "wo") + ".in", std::move(av)));
    }
    return out;
}

Tensor practical_attention(const Checkpoint& ckpt, std::size_t layer, const Tensor& y,
                           std::vector<Tensor>* head_probs, const ForwardOptions& opts) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t d = cfg.model_dim, n = y.cols(), dh = cfg.head_dim();

    Tensor q = matmul(ckpt.param(names::attn_weight(layer, "wq")),
                      hook(opts, names::attn_weight(layer, "wq") + ".in", y));
    Tensor k = matmul(ckpt.param(names::attn_weight(layer, "wk")),
                      hook(opts, names::attn_weight(layer, "wk") + ".in", y));
    Tensor v = matmul(ckpt.param(names::attn_weight(layer, "wv")),
                      hook(opts, names::attn_weight(layer, "wv") + ".in", y));
    add_column_bias(q, ckpt.param(names::attn_weight(layer, "bq")));
    add_column_bias(k, ckpt.param(names::attn_weight(layer, "bk")));
    add_column_bias(v, ckpt.param(names::attn_weight(layer, "bv")));

    const std::vector<double> slopes = cfg.alibi ? alibi_slopes(cfg.heads)
                                                 : std::vector<double>(cfg.heads, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor concat({d, n});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor qh = rows_slice(q, h * dh, dh);
        Tensor kh = rows_slice(k, h * dh, dh);
        Tensor vh = rows_slice(v, h * dh, dh);

        Tensor scores = matmul(kh.transposed(), qh);
        scores *= scale;
        if (cfg.alibi) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::vector<double> bias = alibi_bias_row(i, n, slopes[h]);
                for (std::size_t j = 0; j < n; ++j) scores.at(i, j) += bias[j];
            }
        }
        const std::string stem = "l" + std::to_string(layer) + ".h" + std::to_string(h);
        scores = hook(opts, stem + ".scores", std::move(scores));
        activate_columns_inplace(scores, cfg.variant);
        if (head_probs) head_probs->push_back(scores);
        if (opts.trace) opts.trace->add(stem + ".probs", ProbeKind::AttentionProbs, layer, scores);

        Tensor head_out = matmul(vh, scores);
        for (std::size_t i = 0; i < dh; ++i) {
            for (std::size_t j = 0; j < n; ++j) concat.at(h * dh + i, j) = head_out.at(i, j);
        }
    }

    Tensor out = matmul(ckpt.param(names::attn_weight(layer, "wo")),
                        hook(opts, names::attn_weight(layer, "wo") + ".in", std::move(concat)));
    add_column_bias(out, ckpt.param(names::attn_weight(layer, "bo")));
    return out;
}

Tensor ffn_forward(const Checkpoint& ckpt, std::size_t layer, const Tensor& x,
                   const ForwardOptions& opts) {
    Tensor u = matmul(ckpt.param(names::ffn(layer, "w1")),
                      hook(opts, names::ffn(layer, "w1") + ".in", x));
    add_column_bias(u, ckpt.param(names::ffn(layer, "b1")));
    for (double& val : u.raw()) val = val > 0.0 ? val : 0.0;
    Tensor out = matmul(ckpt.param(names::ffn(layer, "w2")),
                        hook(opts, names::ffn(layer, "w2") + ".in", std::move(u)));
    add_column_bias(out, ckpt.param(names::ffn(layer, "b2")));
    return out;
}

}  // namespace

Tensor attention_forward(const Checkpoint& ckpt, std::size_t layer, const Tensor& z,
                         std::vector<Tensor>* head_probs, const ForwardOptions& opts) {
    if (z.ndim() != 2 || z.rows() != ckpt.config.model_dim) {
        throw ShapeMismatch("attention input must be model_dim x N");
    }
    if (layer >= ckpt.config.layers) throw IndexOutOfRange("layer index out of range");
    if (ckpt.config.block_mode == BlockMode::Formal) {
        return formal_attention(ckpt, layer, z, head_probs, opts);
    }
    return practical_attention(ckpt, layer, z, head_probs, opts);
}

Tensor forward_blocks(const Checkpoint& ckpt, const Tensor& x, const ForwardOptions& opts) {
    const ModelConfig& cfg = ckpt.config;
    if (x.ndim() != 2 || x.rows() != cfg.model_dim) {
        throw ShapeMismatch("block input must be model_dim x N");
    }
    Tensor z = x;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (cfg.block_mode == BlockMode::Formal) {
            Tensor attn = attention_forward(ckpt, l, z, nullptr, opts);
            z = ffn_forward(ckpt, l, attn, opts);
            if (opts.trace) {
                opts.trace->add("l" + std::to_string(l) + ".ffn", ProbeKind::FfnOutput, l, z);
            }
        } else {
            Tensor y1 = layer_norm(z, ckpt.param(names::layer_norm(l, 1, "g")),
                                   ckpt.param(names::layer_norm(l, 1, "b")));
            if (opts.trace) {
                opts.trace->add("l" + std::to_string(l) + ".ln1", ProbeKind::LayerNormOutput, l, y1);
            }
            z += attention_forward(ckpt, l, y1, nullptr, opts);

            Tensor y2 = layer_norm(z, ckpt.param(names::layer_norm(l, 2, "g")),
                                   ckpt.param(names::layer_norm(l, 2, "b")));
            if (opts.trace) {
                opts.trace->add("l" + std::to_string(l) + ".ln2", ProbeKind::LayerNormOutput, l, y2);
            }
            Tensor f = ffn_forward(ckpt, l, y2, opts);
            if (opts.trace) {
                opts.trace->add("l" + std::to_string(l) + ".ffn", ProbeKind::FfnOutput, l, f);
            }
            z += f;
        }
    }
    if (cfg.block_mode == BlockMode::Practical) {
        z = layer_norm(z, ckpt.param(names::final_norm_gain()),
                       ckpt.param(names::final_norm_bias()));
    }
    return z;
}

Tensor model_forward_raw(const Checkpoint& ckpt, const Tensor& x, const ForwardOptions& opts) {
    Tensor z = forward_blocks(ckpt, x, opts);
    Tensor logits = matmul(ckpt.param(names::output_weight()),
                           hook(opts, std::string(names::output_weight()) + ".in", std::move(z)));
    if (ckpt.config.block_mode == BlockMode::Practical) {
        add_column_bias(logits, ckpt.param(names::output_bias()));
    }
    return logits;
}

Tensor embed_tokens(const Checkpoint& ckpt, const std::vector<std::size_t>& tokens) {
    const ModelConfig& cfg = ckpt.config;
    if (tokens.empty()) throw EmptyInput("empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
        throw SequenceTooLong("sequence length " + std::to_string(tokens.size()) +
                              " exceeds max " + std::to_string(cfg.max_seq_len));
    }
    const Tensor& emb = ckpt.param(names::embedding());
    Tensor x({cfg.model_dim, tokens.size()});
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        if (tokens[j] >= cfg.vocab_size) {
            throw TokenOutOfRange("token id " + std::to_string(tokens[j]) +
                                  " >= vocab size " + std::to_string(cfg.vocab_size));
        }
        for (std::size_t i = 0; i < cfg.model_dim; ++i) x.at(i, j) = emb.at(i, tokens[j]);
    }
    return x;
}

Tensor model_forward(const Checkpoint& ckpt, const std::vector<std::size_t>& tokens,
                     const ForwardOptions& opts) {
    return model_forward_raw(ckpt, embed_tokens(ckpt, tokens), opts);
}

Tensor output_probs(const ModelConfig& cfg, const Tensor& logits) {
    Tensor probs = logits;
    activate_columns_inplace(probs, cfg.use_output_softmax1() ? AttentionVariant::Softmax1
                                                              : AttentionVariant::VanillaSoftmax);
    return probs;
}

}  // namespace germ
