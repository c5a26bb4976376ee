#include "germ/lora.hpp"

#include <algorithm>
#include <cmath>

#include "germ/quant.hpp"

namespace germ {

namespace {

// Factor a delta matrix into rank-r LoRA form through its SVD:
// a = U_r diag(sigma_r), b = V_r^T, alpha = r so the merged scaling is 1.
LoraAdapter factor_delta(const std::string& target, const Tensor& delta, std::size_t r) {
    const std::size_t out = delta.rows(), in = delta.cols();
    r = std::min(r, std::min(out, in));
    if (r == 0) throw RankConditionViolated("adapter rank must be positive");
    SvdResult s = svd(delta);
    LoraAdapter ad;
    ad.target = target;
    ad.rank = r;
    ad.alpha = static_cast<double>(r);
    ad.a = Tensor({out, r});
    ad.b = Tensor({r, in});
    for (std::size_t t = 0; t < r; ++t) {
        for (std::size_t i = 0; i < out; ++i) ad.a.at(i, t) = s.u.at(i, t) * s.sigma[t];
        for (std::size_t j = 0; j < in; ++j) ad.b.at(t, j) = s.v.at(j, t);
    }
    return ad;
}

void require_theorem_setting(const Checkpoint& frozen, const Checkpoint& target) {
    if (frozen.config.block_mode != BlockMode::Formal ||
        target.config.block_mode != BlockMode::Formal) {
        throw ConfigMismatch("theorem machinery requires formal-mode checkpoints");
    }
    if (!frozen.config.same_architecture(target.config)) {
        throw ConfigMismatch("frozen and target architectures differ");
    }
    if (frozen.config.vocab_size != frozen.config.model_dim) {
        throw ConfigMismatch("theorem machinery needs a square output head "
                             "(vocab_size == model_dim)");
    }
}

bool singular(const Tensor& m) {
    try {
        inverse(m);
        return false;
    } catch (const Singular&) {
        return true;
    }
}

}  // namespace

Tensor LoraAdapter::merged_delta() const {
    Tensor d = matmul(a, b);
    d *= alpha / static_cast<double>(rank);
    return d;
}

Checkpoint AdapterSet::to_checkpoint(const ModelConfig& cfg) const {
    Checkpoint out;
    out.config = cfg;
    out.kind = "adapters";
    for (const auto& [target, ad] : adapters) {
        out.params["adapter." + target + ".a"] = ad.a;
        out.params["adapter." + target + ".b"] = ad.b;
        out.params["adapter." + target + ".alpha"] = Tensor::vector({ad.alpha});
    }
    for (const auto& [name, bias] : replaced_biases) {
        out.params["bias." + name] = bias;
    }
    return out;
}

AdapterSet AdapterSet::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "adapters") {
        throw ConfigMismatch("checkpoint kind '" + ckpt.kind + "' is not an adapter set");
    }
    AdapterSet set;
    for (const auto& [name, tensor] : ckpt.params) {
        if (name.rfind("bias.", 0) == 0) {
            set.replaced_biases[name.substr(5)] = tensor;
            continue;
        }
        if (name.rfind("adapter.", 0) != 0 || name.size() < 10) {
            throw CorruptManifest("unexpected adapter entry '" + name + "'");
        }
        if (name.compare(name.size() - 2, 2, ".a") != 0) continue;
        const std::string target = name.substr(8, name.size() - 10);
        LoraAdapter ad;
        ad.target = target;
        ad.a = tensor;
        ad.b = ckpt.param("adapter." + target + ".b");
        ad.alpha = ckpt.param("adapter." + target + ".alpha")[0];
        ad.rank = ad.a.cols();
        set.adapters[target] = std::move(ad);
    }
    return set;
}

Tensor lra(const Tensor& w, std::size_t r) {
    if (w.ndim() != 2) throw ShapeMismatch("lra expects a matrix");
    const std::size_t k = std::min(w.rows(), w.cols());
    if (r >= k) return w;
    SvdResult s = svd(w);
    Tensor out({w.rows(), w.cols()});
    for (std::size_t t = 0; t < r; ++t) {
        for (std::size_t i = 0; i < w.rows(); ++i) {
            const double us = s.u.at(i, t) * s.sigma[t];
            for (std::size_t j = 0; j < w.cols(); ++j) {
                out.at(i, j) += us * s.v.at(j, t);
            }
        }
    }
    return out;
}

namespace theorem_detail {

// Score-product target for layer l, conjugated by the previous frozen /
// target second-feedforward matrices when l > 0.
Tensor kq_target(const Checkpoint& frozen, const Checkpoint& target, std::size_t l,
                 std::size_t h) {
    Tensor m = matmul(target.param(names::head_weight(l, h, "wk")).transposed(),
                      target.param(names::head_weight(l, h, "wq")));
    if (l == 0) return m;
    const Tensor& w2_prev = frozen.param(names::ffn(l - 1, "w2"));
    const Tensor& w2_prev_target = target.param(names::ffn(l - 1, "w2"));
    Tensor inv_prev = inverse(w2_prev);
    Tensor conj = matmul(matmul(w2_prev_target, inv_prev).transposed(),
                         matmul(m, matmul(w2_prev_target, inv_prev)));
    return conj;
}

Tensor ov_target(const Checkpoint& frozen, const Checkpoint& target, std::size_t l,
                 std::size_t h) {
    Tensor m = matmul(inverse(frozen.param(names::ffn(l, "w1"))),
                      matmul(target.param(names::ffn(l, "w1")),
                             matmul(target.param(names::head_weight(l, h, "wo")),
                                    target.param(names::head_weight(l, h, "wv")))));
    if (l == 0) return m;
    m = matmul(m, matmul(target.param(names::ffn(l - 1, "w2")),
                         inverse(frozen.param(names::ffn(l - 1, "w2")))));
    return m;
}

Tensor kq_frozen(const Checkpoint& frozen, std::size_t l, std::size_t h) {
    return matmul(frozen.param(names::head_weight(l, h, "wk")).transposed(),
                  frozen.param(names::head_weight(l, h, "wq")));
}

Tensor ov_frozen(const Checkpoint& frozen, std::size_t l, std::size_t h) {
    return matmul(frozen.param(names::head_weight(l, h, "wo")),
                  frozen.param(names::head_weight(l, h, "wv")));
}

}  // namespace theorem_detail

NonSingularityReport check_nonsingularity(const Checkpoint& frozen, const Checkpoint& target,
                                          std::size_t rank_budget) {
    require_theorem_setting(frozen, target);
    const ModelConfig& cfg = frozen.config;
    NonSingularityReport report;

    auto check = [&](const std::string& family, const std::string& detail, const Tensor& m) {
        ++report.checked;
        if (singular(m)) {
            report.pass = false;
            report.failures.push_back({family, detail});
        }
    };

    for (const auto* model : {&frozen, &target}) {
        const std::string which = model == &frozen ? "frozen" : "target";
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                for (const char* w : {"wq", "wk", "wv", "wo"}) {
                    check(which + "_weights", names::head_weight(l, h, w),
                          model->param(names::head_weight(l, h, w)));
                }
            }
            check(which + "_weights", names::ffn(l, "w1"), model->param(names::ffn(l, "w1")));
            check(which + "_weights", names::ffn(l, "w2"), model->param(names::ffn(l, "w2")));
        }
        check(which + "_weights", names::output_weight(), model->param(names::output_weight()));
    }

    auto check_family = [&](const std::string& family, const std::string& detail,
                            const Tensor& base, const Tensor& wanted) {
        Tensor discrepancy = wanted;
        discrepancy -= base;
        for (std::size_t r = 1; r <= rank_budget; ++r) {
            Tensor perturbed = base;
            perturbed += lra(discrepancy, r);
            check(family, detail + " r=" + std::to_string(r), perturbed);
        }
    };

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string at = "l" + std::to_string(l) + ".h" + std::to_string(h);
            check_family("key_query", at, theorem_detail::kq_frozen(frozen, l, h),
                         theorem_detail::kq_target(frozen, target, l, h));
            check_family("value_output", at, theorem_detail::ov_frozen(frozen, l, h),
                         theorem_detail::ov_target(frozen, target, l, h));
        }
    }
    {
        const std::size_t last = cfg.layers - 1;
        Tensor base = matmul(frozen.param(names::output_weight()),
                             frozen.param(names::ffn(last, "w2")));
        Tensor wanted = matmul(target.param(names::output_weight()),
                               target.param(names::ffn(last, "w2")));
        check_family("output_layer", "out", base, wanted);
    }
    return report;
}

std::size_t FunctionalityGap::max_gap() const {
    std::size_t best = 0;
    for (std::size_t g : gaps) best = std::max(best, g);
    return best;
}

std::size_t FunctionalityGap::required_rank() const {
    return (max_gap() + 1) / 2;
}

FunctionalityGap functionality_gap(const Checkpoint& frozen, const Checkpoint& target) {
    require_theorem_setting(frozen, target);
    const ModelConfig& cfg = frozen.config;
    FunctionalityGap out;

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::size_t gap = 0;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            Tensor kq_diff, ov_diff;
            if (l == 0) {
                kq_diff = matmul(target.param(names::head_weight(l, h, "wk")).transposed(),
                                 target.param(names::head_weight(l, h, "wq")));
                kq_diff -= theorem_detail::kq_frozen(frozen, l, h);
                ov_diff = matmul(target.param(names::ffn(l, "w1")),
                                 matmul(target.param(names::head_weight(l, h, "wo")),
                                        target.param(names::head_weight(l, h, "wv"))));
                ov_diff -= matmul(frozen.param(names::ffn(l, "w1")),
                                  theorem_detail::ov_frozen(frozen, l, h));
            } else {
                auto conjugated_kq = [&](const Checkpoint& model) {
                    const Tensor& w2p = model.param(names::ffn(l - 1, "w2"));
                    Tensor kq = matmul(model.param(names::head_weight(l, h, "wk")).transposed(),
                                       model.param(names::head_weight(l, h, "wq")));
                    return matmul(w2p.transposed(), matmul(kq, w2p));
                };
                kq_diff = conjugated_kq(target);
                kq_diff -= conjugated_kq(frozen);
                auto chained_ov = [&](const Checkpoint& model) {
                    Tensor ov = matmul(model.param(names::head_weight(l, h, "wo")),
                                       model.param(names::head_weight(l, h, "wv")));
                    return matmul(model.param(names::ffn(l, "w1")),
                                  matmul(ov, model.param(names::ffn(l - 1, "w2"))));
                };
                ov_diff = chained_ov(target);
                ov_diff -= chained_ov(frozen);
            }
            gap = std::max({gap, numerical_rank(kq_diff), numerical_rank(ov_diff)});
        }
        out.gaps.push_back(gap);
    }

    const std::size_t last = cfg.layers - 1;
    Tensor out_diff = matmul(target.param(names::output_weight()),
                             target.param(names::ffn(last, "w2")));
    out_diff -= matmul(frozen.param(names::output_weight()),
                       frozen.param(names::ffn(last, "w2")));
    out.gaps.push_back(numerical_rank(out_diff));
    return out;
}

LemmaResult lemma_product_update(const std::vector<Tensor>& factors, const Tensor& target,
                                 std::size_t rank_budget) {
    if (factors.empty()) throw ShapeMismatch("lemma needs at least one factor");
    const std::size_t n = factors.front().rows();
    for (const Tensor& f : factors) {
        if (f.ndim() != 2 || f.rows() != n || f.cols() != n) {
            throw ShapeMismatch("lemma factors must be square and equally sized");
        }
    }
    if (rank_budget == 0) throw RankConditionViolated("rank budget must be positive");
    const std::size_t count = factors.size();

    Tensor product = factors.front();
    for (std::size_t i = 1; i < count; ++i) product = matmul(product, factors[i]);
    Tensor error = target;
    error -= product;

    SvdResult es = svd(error);
    // Piece m holds singular directions ((m-1)R, mR] of the error.
    auto piece = [&](std::size_t m) {
        Tensor p({n, n});
        const std::size_t lo = (m - 1) * rank_budget;
        const std::size_t hi = std::min(m * rank_budget, es.sigma.size());
        for (std::size_t t = lo; t < hi && t < es.sigma.size(); ++t) {
            if (es.sigma[t] == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) {
                const double us = es.u.at(i, t) * es.sigma[t];
                for (std::size_t j = 0; j < n; ++j) p.at(i, j) += us * es.v.at(j, t);
            }
        }
        return p;
    };

    // Left partial products of the frozen factors.
    std::vector<Tensor> left(count + 1);
    left[0] = Tensor::identity(n);
    for (std::size_t i = 0; i < count; ++i) left[i + 1] = matmul(left[i], factors[i]);

    LemmaResult result;
    result.updates.assign(count, Tensor({n, n}));
    Tensor right = Tensor::identity(n);  // product of already-updated factors
    try {
        for (std::size_t j = count; j-- > 0;) {
            const Tensor b = piece(count - j);
            Tensor delta = matmul(inverse(left[j]), matmul(b, inverse(right)));
            result.updates[j] = delta;
            Tensor updated = factors[j];
            updated += delta;
            right = matmul(updated, right);
        }
    } catch (const Singular& e) {
        throw NonSingularityViolated(std::string("lemma construction hit a singular "
                                                 "partial product: ") +
                                     e.what());
    }

    Tensor achieved = factors.front();
    achieved += result.updates.front();
    for (std::size_t i = 1; i < count; ++i) {
        Tensor updated = factors[i];
        updated += result.updates[i];
        achieved = matmul(achieved, updated);
    }
    achieved -= target;
    result.achieved_error = spectral_norm(achieved);
    return result;
}

AdapterSet construct_adapters(const Checkpoint& frozen, const Checkpoint& target,
                              std::size_t rank_budget) {
    require_theorem_setting(frozen, target);
    const ModelConfig& cfg = frozen.config;
    if (rank_budget == 0 || rank_budget > cfg.model_dim) {
        throw RankConditionViolated("rank budget must lie in [1, D]");
    }
    const FunctionalityGap gap = functionality_gap(frozen, target);
    if (rank_budget < gap.required_rank()) {
        throw RankConditionViolated(
            "rank budget " + std::to_string(rank_budget) + " below required " +
            std::to_string(gap.required_rank()));
    }

    AdapterSet set;
    auto add_adapter = [&](const std::string& name, const Tensor& delta) {
        set.adapters[name] = factor_delta(name, delta, rank_budget);
    };

    try {
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                // Key/query: (wk + dk)^T (wq + dq) == conjugated target product.
                {
                    std::vector<Tensor> factors = {
                        frozen.param(names::head_weight(l, h, "wk")).transposed(),
                        frozen.param(names::head_weight(l, h, "wq"))};
                    LemmaResult lr = lemma_product_update(
                        factors, theorem_detail::kq_target(frozen, target, l, h), rank_budget);
                    add_adapter(names::head_weight(l, h, "wk"), lr.updates[0].transposed());
                    add_adapter(names::head_weight(l, h, "wq"), lr.updates[1]);
                }
                // Value/output: (wo + do)(wv + dv) == W1^-1 W1bar ovbar (chain).
                {
                    std::vector<Tensor> factors = {frozen.param(names::head_weight(l, h, "wo")),
                                                   frozen.param(names::head_weight(l, h, "wv"))};
                    LemmaResult lr = lemma_product_update(
                        factors, theorem_detail::ov_target(frozen, target, l, h), rank_budget);
                    add_adapter(names::head_weight(l, h, "wo"), lr.updates[0]);
                    add_adapter(names::head_weight(l, h, "wv"), lr.updates[1]);
                }
            }
            // First-feedforward bias is copied from the target.
            set.replaced_biases[names::ffn(l, "b1")] = target.param(names::ffn(l, "b1"));
            if (l + 1 < cfg.layers) {
                // b2_l = w2_l w2bar_l^-1 b2bar_l keeps Z_hat = w2 w2bar^-1 Zbar.
                Tensor scaled = matmul(frozen.param(names::ffn(l, "w2")),
                                       inverse(target.param(names::ffn(l, "w2"))));
                Tensor b({cfg.model_dim, 1});
                const Tensor& src = target.param(names::ffn(l, "b2"));
                for (std::size_t i = 0; i < cfg.model_dim; ++i) b.at(i, 0) = src[i];
                Tensor rewritten = matmul(scaled, b);
                Tensor bias({cfg.model_dim});
                for (std::size_t i = 0; i < cfg.model_dim; ++i) bias[i] = rewritten.at(i, 0);
                set.replaced_biases[names::ffn(l, "b2")] = bias;
            }
        }

        // Output layer: (wo_out + d)(w2_L + d2) == target product, then
        // b2_L = (wo_out + d)^-1 wobar b2bar_L.
        const std::size_t last = cfg.layers - 1;
        std::vector<Tensor> factors = {frozen.param(names::output_weight()),
                                       frozen.param(names::ffn(last, "w2"))};
        Tensor wanted = matmul(target.param(names::output_weight()),
                               target.param(names::ffn(last, "w2")));
        LemmaResult lr = lemma_product_update(factors, wanted, rank_budget);
        add_adapter(names::output_weight(), lr.updates[0]);
        add_adapter(names::ffn(last, "w2"), lr.updates[1]);

        Tensor adapted_out = frozen.param(names::output_weight());
        adapted_out += lr.updates[0];
        Tensor b({cfg.model_dim, 1});
        const Tensor& src = target.param(names::ffn(last, "b2"));
        for (std::size_t i = 0; i < cfg.model_dim; ++i) b.at(i, 0) = src[i];
        Tensor rewritten = matmul(inverse(adapted_out),
                                  matmul(target.param(names::output_weight()), b));
        Tensor bias({cfg.model_dim});
        for (std::size_t i = 0; i < cfg.model_dim; ++i) bias[i] = rewritten.at(i, 0);
        set.replaced_biases[names::ffn(last, "b2")] = bias;
    } catch (const Singular& e) {
        throw NonSingularityViolated(std::string("construction hit a singular matrix: ") +
                                     e.what());
    }
    return set;
}

double verify_theorem(const Checkpoint& frozen, const Checkpoint& target,
                      const AdapterSet& adapters, std::size_t trials, std::size_t seq_len,
                      Rng& rng) {
    Checkpoint adapted = apply_adapters(frozen, adapters);
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng trial_rng = rng.fork(t);
        Tensor x = rand_uniform({frozen.config.model_dim, seq_len}, trial_rng, -1.0, 1.0);
        Tensor fa = output_probs(adapted.config, model_forward_raw(adapted, x));
        Tensor fb = output_probs(target.config, model_forward_raw(target, x));
        fa -= fb;
        worst = std::max(worst, inf_norm(fa));
    }
    return worst;
}

LoftqResult loftq_init(const Tensor& w, int bits, std::size_t r, std::size_t iters,
                       const std::string& target) {
    if (iters == 0) throw ConfigError("loftq_init needs at least one iteration");
    LoftqResult result;
    Tensor ab({w.rows(), w.cols()});
    for (std::size_t it = 0; it < iters; ++it) {
        Tensor residual = w;
        residual -= ab;
        result.q = fake_quant(residual, bits, inf_norm(residual));
        Tensor remainder = w;
        remainder -= result.q;
        ab = lra(remainder, r);
        remainder -= ab;
        result.residual_history.push_back(frobenius_norm(remainder));
    }
    result.adapter = factor_delta(target, ab, r);
    return result;
}

Checkpoint apply_adapters(const Checkpoint& ckpt, const AdapterSet& adapters) {
    Checkpoint merged = ckpt;
    for (const auto& [name, ad] : adapters.adapters) {
        Tensor& w = merged.param(name);  // throws TargetMissing
        Tensor delta = ad.merged_delta();
        if (!w.same_shape(delta)) {
            throw ShapeMismatch("adapter for '" + name + "' has mismatched shape");
        }
        w += delta;
    }
    for (const auto& [name, bias] : adapters.replaced_biases) {
        Tensor& b = merged.param(name);
        if (!b.same_shape(bias)) {
            throw ShapeMismatch("replacement bias '" + name + "' has mismatched shape");
        }
        b = bias;
    }
    return merged;
}

std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> targets;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (cfg.block_mode == BlockMode::Formal) {
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                targets.push_back(names::head_weight(l, h, "wq"));
                targets.push_back(names::head_weight(l, h, "wv"));
            }
        } else {
            targets.push_back(names::attn_weight(l, "wq"));
            targets.push_back(names::attn_weight(l, "wv"));
        }
    }
    return targets;
}

}  // namespace germ
