#include "germ/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace germ {

Tensor SvdResult::reconstruct() const {
    const std::size_t m = u.rows();
    const std::size_t n = v.rows();
    const std::size_t k = sigma.size();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += u.at(i, t) * sigma[t] * v.at(j, t);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeMismatch("matmul expects rank-2 tensors");
    }
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw ShapeMismatch("matmul inner dimensions " + std::to_string(k) +
                            " vs " + std::to_string(k2));
    }
    Tensor out({m, n});
    const double* pa = a.raw().data();
    const double* pb = b.raw().data();
    double* po = out.raw().data();
    // i,p,j loop order: cache friendly and each out[i][j] still accumulates
    // over p in increasing order, so the summation order is fixed.
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = pb + p * n;
            double* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    return out;
}

namespace {

// One-sided Jacobi on a, m >= n. Columns of a converge to u_i * sigma_i;
// accumulated rotations form v.
struct JacobiOut {
    Tensor a;  // rotated copy, columns = sigma_i * u_i
    Tensor v;  // n x n orthogonal
};

JacobiOut one_sided_jacobi(const Tensor& w) {
    const std::size_t m = w.rows(), n = w.cols();
    Tensor a = w;
    Tensor v = Tensor::identity(n);
    const double tol = 1e-12;
    const std::size_t max_sweeps = 100 * std::max<std::size_t>(n, 1);

    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    const double ai = a.at(r, i), aj = a.at(r, j);
                    alpha += ai * ai;
                    beta += aj * aj;
                    gamma += ai * aj;
                }
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0) continue;
                off = std::max(off, std::abs(gamma) / denom);
                if (std::abs(gamma) <= tol * denom) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double ai = a.at(r, i), aj = a.at(r, j);
                    a.at(r, i) = c * ai - s * aj;
                    a.at(r, j) = s * ai + c * aj;
                }
                for (std::size_t r = 0; r < n; ++r) {
                    const double vi = v.at(r, i), vj = v.at(r, j);
                    v.at(r, i) = c * vi - s * vj;
                    v.at(r, j) = s * vi + c * vj;
                }
            }
        }
        if (off <= tol) return {a, v};
    }
    throw NonConvergence("jacobi svd exceeded sweep cap");
}

// Complete u columns whose singular value is (numerically) zero with an
// orthonormal basis drawn from standard basis vectors, in index order.
void complete_column(Tensor& u, std::size_t col) {
    const std::size_t m = u.rows();
    const std::size_t k = u.cols();
    for (std::size_t e = 0; e < m; ++e) {
        std::vector<double> cand(m, 0.0);
        cand[e] = 1.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (c == col) continue;
            double dot = 0.0;
            for (std::size_t r = 0; r < m; ++r) dot += cand[r] * u.at(r, c);
            for (std::size_t r = 0; r < m; ++r) cand[r] -= dot * u.at(r, c);
        }
        double norm = 0.0;
        for (double x : cand) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.5) {
            for (std::size_t r = 0; r < m; ++r) u.at(r, col) = cand[r] / norm;
            return;
        }
    }
    throw NonConvergence("could not complete orthonormal basis");
}

SvdResult svd_tall(const Tensor& w) {
    const std::size_t m = w.rows(), n = w.cols();
    JacobiOut jo = one_sided_jacobi(w);

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double norm = 0.0;
        for (std::size_t r = 0; r < m; ++r) norm += jo.a.at(r, j) * jo.a.at(r, j);
        sigma[j] = std::sqrt(norm);
    }

    // Order columns by descending sigma, stable in the original index.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    SvdResult out;
    out.u = Tensor({m, n});
    out.v = Tensor({n, n});
    out.sigma.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.sigma[j] = sigma[src];
        if (sigma[src] > 0.0) {
            for (std::size_t r = 0; r < m; ++r) {
                out.u.at(r, j) = jo.a.at(r, src) / sigma[src];
            }
        }
        for (std::size_t r = 0; r < n; ++r) out.v.at(r, j) = jo.v.at(r, src);
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (out.sigma[j] == 0.0) complete_column(out.u, j);
    }

    // Sign convention: largest-magnitude u entry positive, ties at lowest index.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t r = 0; r < m; ++r) {
            const double mag = std::abs(out.u.at(r, j));
            if (mag > best) {
                best = mag;
                arg = r;
            }
        }
        if (out.u.at(arg, j) < 0.0) {
            for (std::size_t r = 0; r < m; ++r) out.u.at(r, j) = -out.u.at(r, j);
            for (std::size_t r = 0; r < n; ++r) out.v.at(r, j) = -out.v.at(r, j);
        }
    }
    return out;
}

}  // namespace

SvdResult svd(const Tensor& w) {
    if (w.ndim() != 2) throw ShapeMismatch("svd expects a matrix");
    if (w.rows() == 0 || w.cols() == 0) throw EmptyTensor("svd on empty matrix");
    if (!w.all_finite()) throw NonFinite("svd on non-finite matrix");
    if (w.rows() >= w.cols()) return svd_tall(w);
    SvdResult t = svd_tall(w.transposed());
    return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

Tensor inverse(const Tensor& w) {
    if (w.ndim() != 2 || w.rows() != w.cols()) {
        throw ShapeMismatch("inverse expects a square matrix");
    }
    const std::size_t n = w.rows();
    if (n == 0) throw EmptyTensor("inverse on empty matrix");
    const double pivot_floor = 1e-12 * inf_norm(w);

    Tensor a = w;
    Tensor inv = Tensor::identity(n);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
        }
        const double pv = a.at(pivot, col);
        if (std::abs(pv) <= pivot_floor) {
            throw Singular("pivot " + std::to_string(pv) + " below threshold at column " +
                           std::to_string(col));
        }
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(a.at(pivot, j), a.at(col, j));
                std::swap(inv.at(pivot, j), inv.at(col, j));
            }
        }
        const double scale = 1.0 / a.at(col, col);
        for (std::size_t j = 0; j < n; ++j) {
            a.at(col, j) *= scale;
            inv.at(col, j) *= scale;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a.at(r, col);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                a.at(r, j) -= f * a.at(col, j);
                inv.at(r, j) -= f * inv.at(col, j);
            }
        }
    }
    return inv;
}

double inf_norm(const Tensor& x) {
    if (x.empty()) throw EmptyTensor("inf_norm on empty tensor");
    double best = 0.0;
    for (double v : x.raw()) best = std::max(best, std::abs(v));
    return best;
}

double spectral_norm(const Tensor& w) {
    SvdResult s = svd(w);
    return s.sigma.empty() ? 0.0 : s.sigma.front();
}

std::size_t numerical_rank(const Tensor& w, double rel_tol) {
    SvdResult s = svd(w);
    if (s.sigma.empty() || s.sigma.front() == 0.0) return 0;
    const double cutoff = rel_tol * s.sigma.front();
    std::size_t rank = 0;
    for (double sv : s.sigma) {
        if (sv > cutoff) ++rank;
    }
    return rank;
}

double frobenius_norm(const Tensor& w) {
    double acc = 0.0;
    for (double v : w.raw()) acc += v * v;
    return std::sqrt(acc);
}

}  // namespace germ
