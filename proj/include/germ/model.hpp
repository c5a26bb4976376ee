#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "germ/attention.hpp"
#include "germ/tensor.hpp"

namespace germ {

// Named parameter container. The same struct carries trained models and
// adapter sets (kind tag), and is what checkpoint_io serializes.
struct Checkpoint {
    ModelConfig config;
    std::int64_t step = 0;
    std::string kind = "model";
    std::map<std::string, Tensor> params;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const { return params.count(name) != 0; }
};

// Near-zero Gaussian init (stddev 0.02) for weights, zero biases, unit
// LayerNorm gains.
Checkpoint init_model(const ModelConfig& cfg, Rng& rng, double init_std = 0.02);

// Parameter names for one layer / the model head; shared by init, training,
// quantization and the theorem construction so everything agrees on layout.
namespace names {
std::string head_weight(std::size_t layer, std::size_t head, const char* which);
std::string attn_weight(std::size_t layer, const char* which);
std::string ffn(std::size_t layer, const char* which);
std::string layer_norm(std::size_t layer, int which, const char* part);
inline const char* embedding() { return "emb"; }
inline const char* output_weight() { return "out.w"; }
inline const char* output_bias() { return "out.b"; }
inline const char* final_norm_gain() { return "lnf.g"; }
inline const char* final_norm_bias() { return "lnf.b"; }
}  // namespace names

enum class ProbeKind { FfnOutput, LayerNormOutput, AttentionProbs };

std::string to_string(ProbeKind k);

struct Probe {
    std::string name;
    ProbeKind kind;
    std::size_t layer;
    Tensor tensor;
};

// Ordered probe log of one or more forward passes.
struct ActivationTrace {
    std::vector<Probe> probes;
    void add(std::string name, ProbeKind kind, std::size_t layer, Tensor t);
};

// Hook invoked wherever an activation is about to be consumed by a linear
// projection (and on raw attention scores). Calibration observes, the
// quantized runtime rewrites.
class ActHook {
public:
    virtual ~ActHook() = default;
    virtual Tensor transform(const std::string& site, Tensor x) = 0;
};

struct ForwardOptions {
    ActivationTrace* trace = nullptr;
    ActHook* act_hook = nullptr;
};

// Runs the transformer blocks on a raw D x N input (the formal-equation
// entry point; also used by the theorem verifier). Returns Z_L for formal
// mode, the final LayerNorm output for practical mode.
Tensor forward_blocks(const Checkpoint& ckpt, const Tensor& x,
                      const ForwardOptions& opts = {});

// Blocks + output projection on a raw input; logits are V x N.
Tensor model_forward_raw(const Checkpoint& ckpt, const Tensor& x,
                         const ForwardOptions& opts = {});

// Token path: embedding lookup, blocks, output projection.
Tensor model_forward(const Checkpoint& ckpt, const std::vector<std::size_t>& tokens,
                     const ForwardOptions& opts = {});

// Output probabilities per config (vanilla softmax or Softmax1 head),
// normalized over the vocabulary axis for each position.
Tensor output_probs(const ModelConfig& cfg, const Tensor& logits);

// One attention sub-layer on input z (D x N): the formal sum over full D x D
// head projections, or the practical sliced/scaled/biased variant applied
// directly to z (no LayerNorm, no residual). Per-head probability matrices
// are appended to head_probs when given.
Tensor attention_forward(const Checkpoint& ckpt, std::size_t layer, const Tensor& z,
                         std::vector<Tensor>* head_probs = nullptr,
                         const ForwardOptions& opts = {});

// Embedding lookup: D x N matrix of token columns.
Tensor embed_tokens(const Checkpoint& ckpt, const std::vector<std::size_t>& tokens);

}  // namespace germ
