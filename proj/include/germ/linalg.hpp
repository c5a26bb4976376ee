#pragma once

#include <vector>

#include "germ/tensor.hpp"

namespace germ {

// Result of a thin SVD: w = u * diag(sigma) * v^T with orthonormal columns
// in u and v and sigma sorted non-increasing.
struct SvdResult {
    Tensor u;                   // m x k
    std::vector<double> sigma;  // k = min(m, n)
    Tensor v;                   // n x k

    Tensor reconstruct() const;
    // Singular value by 1-based-logic index: sigma_k(w) with k past the end
    // reads as zero, matching the convention used by rank arguments.
    double sigma_or_zero(std::size_t idx) const {
        return idx < sigma.size() ? sigma[idx] : 0.0;
    }
};

// a [m x k] * b [k x n]; sequential accumulation over k in a fixed order so
// results are bit-reproducible across runs and platforms.
Tensor matmul(const Tensor& a, const Tensor& b);

// One-sided Jacobi SVD. Deterministic sweep order, convergence when the
// relative off-diagonal mass drops below 1e-12, cap of 100*n sweeps
// (NonConvergence past that). Sign convention: the largest-magnitude entry
// of each u column is positive, ties broken by lowest index.
SvdResult svd(const Tensor& w);

// Gauss-Jordan inverse with partial pivoting. Throws Singular when a pivot
// falls below 1e-12 * inf_norm(w).
Tensor inverse(const Tensor& w);

// Largest absolute element.
double inf_norm(const Tensor& x);

// sigma_1(w).
double spectral_norm(const Tensor& w);

// Count of singular values above rel_tol * sigma_1.
std::size_t numerical_rank(const Tensor& w, double rel_tol = 1e-9);

double frobenius_norm(const Tensor& w);

}  // namespace germ
