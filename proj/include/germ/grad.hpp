#pragma once

#include <map>
#include <vector>

#include "germ/model.hpp"

namespace germ {

using GradMap = std::map<std::string, Tensor>;

namespace detail {

struct NormCache {
    Tensor xhat;                  // D x N
    std::vector<double> inv_std;  // per column
    Tensor out;
};

struct HeadCache {
    Tensor q, k, v;  // formal: D x N projections; practical: head slices
    Tensor probs;    // N x N
    Tensor av;       // value path output fed into the o-projection
};

struct LayerCache {
    Tensor z_in;
    // practical only
    NormCache ln1, ln2;
    Tensor q_full, k_full, v_full;
    Tensor concat;
    Tensor attn_out;
    Tensor z_mid;
    // both modes
    std::vector<HeadCache> heads;
    Tensor attn;      // formal: summed head outputs (ffn input)
    Tensor relu_in;   // pre-activation of the first ffn layer
    Tensor relu_out;
    Tensor ffn_out;
    Tensor z_out;
};

// Forward pass retaining every intermediate needed by backward(). The
// resulting logits match model_forward_raw exactly (asserted in tests).
struct ForwardCache {
    Tensor x0;
    std::vector<LayerCache> layers;
    NormCache final_norm;  // practical only
    Tensor final_rep;      // what the output head / classifier consumes
    Tensor logits;
};

ForwardCache cached_forward(const Checkpoint& ckpt, const Tensor& x0);

// Accumulates parameter gradients into grads (lazily zero-initialized).
// dlogits and/or dfinal_rep may be null; dx0 receives the input gradient
// when requested (used for the embedding backward).
void backward(const Checkpoint& ckpt, const ForwardCache& cache, const Tensor* dlogits,
              const Tensor* dfinal_rep, GradMap& grads, Tensor* dx0);

// d(activation)/d(scores) pull-back shared by softmax and softmax1 columns:
// ds = p (.) (dp - <dp, p>), applied column-wise.
Tensor activation_backward_columns(const Tensor& probs, const Tensor& dprobs);

}  // namespace detail

}  // namespace germ
