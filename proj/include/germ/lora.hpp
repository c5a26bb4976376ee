#pragma once

#include <map>
#include <string>
#include <vector>

#include "germ/linalg.hpp"
#include "germ/model.hpp"

namespace germ {

struct LoraAdapter {
    std::string target;
    Tensor a;  // out x r
    Tensor b;  // r x in
    std::size_t rank = 0;
    double alpha = 0.0;

    // (alpha / rank) * a * b
    Tensor merged_delta() const;
};

// Low-rank updates plus the replacement bias vectors the exact-representation
// construction rewrites (biases are assigned, not added).
struct AdapterSet {
    std::map<std::string, LoraAdapter> adapters;
    std::map<std::string, Tensor> replaced_biases;

    // Serialized through the checkpoint container with kind "adapters".
    Checkpoint to_checkpoint(const ModelConfig& cfg) const;
    static AdapterSet from_checkpoint(const Checkpoint& ckpt);
};

// Best rank-r approximation via truncated SVD (Eckart-Young optimal).
// r >= rank(w) returns w unchanged.
Tensor lra(const Tensor& w, std::size_t r);

struct NonSingularityIssue {
    std::string family;  // which assumption family failed
    std::string detail;  // offending matrix / indices
};

struct NonSingularityReport {
    bool pass = true;
    std::vector<NonSingularityIssue> failures;
    std::size_t checked = 0;
};

// Evaluates every matrix family of the non-singularity assumption for all
// r in [1, R]: the weight matrices of both models plus the frozen products
// perturbed by rank-r truncations of the target discrepancy.
NonSingularityReport check_nonsingularity(const Checkpoint& frozen, const Checkpoint& target,
                                          std::size_t rank_budget);

struct FunctionalityGap {
    // gaps[i] is G_{i+1}: per-block discrepancy ranks for i < L, the output
    // layer gap at index L.
    std::vector<std::size_t> gaps;

    std::size_t max_gap() const;
    // Smallest admissible LoRA rank, max_i ceil(G_i / 2).
    std::size_t required_rank() const;
};

FunctionalityGap functionality_gap(const Checkpoint& frozen, const Checkpoint& target);

struct LemmaResult {
    std::vector<Tensor> updates;  // one per factor, each of rank <= R
    double achieved_error = 0.0;  // spectral norm of the residual product
};

// Rank-R-per-factor updates driving prod(W_l + dW_l) to
// prod(W_l) + LRA_{RL ^ rank(E)}(E), E = target - prod(W_l). Factors are
// updated last-to-first, so with a 2-factor product the second factor
// absorbs the leading singular directions and the first factor is solved
// against the already-updated second one.
LemmaResult lemma_product_update(const std::vector<Tensor>& factors, const Tensor& target,
                                 std::size_t rank_budget);

// The constructive proof: key/query, value/output and output-layer products
// matched with the lemma, bias vectors rewritten. Requires formal mode,
// matching configs, a square output head and rank_budget >= required_rank().
AdapterSet construct_adapters(const Checkpoint& frozen, const Checkpoint& target,
                              std::size_t rank_budget);

// Max infinity-norm deviation between adapted and target model outputs over
// random inputs in [-1, 1]^(D x N).
double verify_theorem(const Checkpoint& frozen, const Checkpoint& target,
                      const AdapterSet& adapters, std::size_t trials, std::size_t seq_len,
                      Rng& rng);

struct LoftqResult {
    Tensor q;  // fake-quantized base
    LoraAdapter adapter;
    std::vector<double> residual_history;  // Frobenius residual per iteration
};

// Alternating quantized-base / low-rank-residual initialization:
// repeat q = fake_quant(w - ab), ab = LRA_r(w - q).
LoftqResult loftq_init(const Tensor& w, int bits, std::size_t r, std::size_t iters,
                       const std::string& target = "");

// Merges adapter deltas into the checkpoint and installs replacement biases.
Checkpoint apply_adapters(const Checkpoint& ckpt, const AdapterSet& adapters);

// Attention projections adapted during LoRA fine-tuning (query and value).
std::vector<std::string> default_lora_targets(const ModelConfig& cfg);

}  // namespace germ
