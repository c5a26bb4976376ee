#include "germ/attention.hpp"

#include <algorithm>
#include <cmath>

namespace germ {

std::string to_string(AttentionVariant v) {
    return v == AttentionVariant::VanillaSoftmax ? "softmax" : "softmax1";
}

std::string to_string(BlockMode m) {
    return m == BlockMode::Formal ? "formal" : "practical";
}

AttentionVariant attention_variant_from_string(const std::string& s) {
    if (s == "softmax") return AttentionVariant::VanillaSoftmax;
    if (s == "softmax1") return AttentionVariant::Softmax1;
    throw ConfigError("unknown attention variant '" + s + "'");
}

BlockMode block_mode_from_string(const std::string& s) {
    if (s == "formal") return BlockMode::Formal;
    if (s == "practical") return BlockMode::Practical;
    throw ConfigError("unknown block mode '" + s + "'");
}

void ModelConfig::validate() const {
    if (layers == 0 || heads == 0 || model_dim == 0 || ffn_dim == 0 ||
        vocab_size == 0 || max_seq_len == 0) {
        throw ConfigError("all model dimensions must be positive");
    }
    if (block_mode == BlockMode::Practical) {
        if (model_dim % heads != 0) {
            throw ConfigError("model_dim must be divisible by heads in practical mode");
        }
    } else {
        if (ffn_dim != model_dim) {
            throw ConfigError("formal mode uses square D x D feedforward matrices; "
                              "set ffn_dim == model_dim");
        }
        if (alibi) {
            throw ConfigError("alibi is only valid in practical mode");
        }
    }
}

bool ModelConfig::same_architecture(const ModelConfig& other) const {
    return layers == other.layers && heads == other.heads &&
           model_dim == other.model_dim && ffn_dim == other.ffn_dim &&
           vocab_size == other.vocab_size && max_seq_len == other.max_seq_len &&
           block_mode == other.block_mode && alibi == other.alibi;
}

namespace {

void softmax1_span(const double* in, double* out, std::size_t n) {
    double max_s = 0.0;  // the implicit extra logit sits at exactly zero
    for (std::size_t i = 0; i < n; ++i) max_s = std::max(max_s, in[i]);
    double denom = std::exp(-max_s);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - max_s);
        denom += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= denom;
}

void softmax_span(const double* in, double* out, std::size_t n) {
    double max_s = in[0];
    for (std::size_t i = 1; i < n; ++i) max_s = std::max(max_s, in[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - max_s);
        denom += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= denom;
}

}  // namespace

std::vector<double> softmax1(const std::vector<double>& scores) {
    std::vector<double> out(scores.size());
    if (!scores.empty()) softmax1_span(scores.data(), out.data(), scores.size());
    return out;
}

std::vector<double> softmax(const std::vector<double>& scores) {
    if (scores.empty()) throw EmptyInput("softmax on empty scores");
    std::vector<double> out(scores.size());
    softmax_span(scores.data(), out.data(), scores.size());
    return out;
}

namespace {

template <void (*Fn)(const double*, double*, std::size_t)>
Tensor apply_last_axis(const Tensor& scores) {
    if (scores.ndim() == 0 || scores.empty()) {
        throw EmptyInput("activation on empty tensor");
    }
    const std::size_t width = scores.shape().back();
    Tensor out(scores.shape());
    for (std::size_t off = 0; off < scores.size(); off += width) {
        Fn(scores.raw().data() + off, out.raw().data() + off, width);
    }
    return out;
}

}  // namespace

Tensor softmax1(const Tensor& scores) {
    return apply_last_axis<softmax1_span>(scores);
}

Tensor softmax(const Tensor& scores) {
    return apply_last_axis<softmax_span>(scores);
}

void activate_columns_inplace(Tensor& scores, AttentionVariant variant) {
    const std::size_t r = scores.rows(), c = scores.cols();
    std::vector<double> col(r), act(r);
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < r; ++i) col[i] = scores.at(i, j);
        if (variant == AttentionVariant::Softmax1) {
            softmax1_span(col.data(), act.data(), r);
        } else {
            softmax_span(col.data(), act.data(), r);
        }
        for (std::size_t i = 0; i < r; ++i) scores.at(i, j) = act[i];
    }
}

std::vector<double> alibi_bias_row(std::size_t i, std::size_t seq_len, double slope) {
    if (i >= seq_len) {
        throw IndexOutOfRange("alibi_bias_row: token index " + std::to_string(i) +
                              " out of range for length " + std::to_string(seq_len));
    }
    std::vector<double> row(seq_len);
    for (std::size_t j = 0; j < seq_len; ++j) {
        const double dist = static_cast<double>(j > i ? j - i : i - j);
        row[j] = -slope * dist;
    }
    return row;
}

std::vector<double> alibi_slopes(std::size_t heads) {
    std::vector<double> slopes(heads);
    for (std::size_t h = 1; h <= heads; ++h) {
        slopes[h - 1] = std::pow(2.0, -8.0 * static_cast<double>(h) /
                                           static_cast<double>(heads));
    }
    return slopes;
}

}  // namespace germ
