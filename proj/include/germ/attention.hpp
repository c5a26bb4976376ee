#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "germ/tensor.hpp"

namespace germ {

enum class AttentionVariant { VanillaSoftmax, Softmax1 };
enum class BlockMode { Formal, Practical };

std::string to_string(AttentionVariant v);
std::string to_string(BlockMode m);
AttentionVariant attention_variant_from_string(const std::string& s);
BlockMode block_mode_from_string(const std::string& s);

// Architecture description. Formal mode follows the D x D per-head layout of
// the block equations verbatim (no residual, no normalization, ffn_dim == D);
// Practical mode is a pre-LayerNorm residual encoder with D/H head slices,
// 1/sqrt(d_head) score scaling and optional ALiBi biases.
struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t model_dim = 32;
    std::size_t ffn_dim = 64;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 64;
    AttentionVariant variant = AttentionVariant::VanillaSoftmax;
    BlockMode block_mode = BlockMode::Practical;
    bool alibi = false;
    // Unset means "follow the block mode": the formal output layer applies
    // Softmax1, the practical one a vanilla softmax head.
    std::optional<bool> output_softmax1;

    bool use_output_softmax1() const {
        return output_softmax1.value_or(block_mode == BlockMode::Formal);
    }
    std::size_t head_dim() const { return model_dim / heads; }

    void validate() const;  // throws ConfigError
    bool same_architecture(const ModelConfig& other) const;
};

// Softmax1(S) = exp(S) / (1 + sum_i exp(S_i)): softmax with an implicit
// extra logit pinned at exactly zero. Stabilized with M = max(0, max S) so
// the zero logit survives the shift; outputs lie in [0,1) and sum to < 1.
std::vector<double> softmax1(const std::vector<double>& scores);
std::vector<double> softmax(const std::vector<double>& scores);

// Last-axis application for rank >= 1 tensors.
Tensor softmax1(const Tensor& scores);
Tensor softmax(const Tensor& scores);

// Normalizes every column of a matrix in place with the chosen activation;
// this is the orientation attention uses (attention matrices act on the
// right of the value path, so probability columns correspond to queries).
void activate_columns_inplace(Tensor& scores, AttentionVariant variant);

// Row i of the symmetric ALiBi bias matrix: entry j = -m * |j - i|.
std::vector<double> alibi_bias_row(std::size_t i, std::size_t seq_len, double slope);

// Geometric slope schedule m_h = 2^(-8h/H), h = 1..H.
std::vector<double> alibi_slopes(std::size_t heads);

}  // namespace germ
