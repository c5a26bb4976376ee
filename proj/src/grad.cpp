#include "germ/grad.hpp"

#include <cmath>

#include "germ/linalg.hpp"

namespace germ {
namespace detail {

namespace {

constexpr double kLnEps = 1e-5;

void add_column_bias(Tensor& x, const Tensor& b) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double bi = b[i];
        for (std::size_t j = 0; j < x.cols(); ++j) x.at(i, j) += bi;
    }
}

NormCache norm_forward(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const std::size_t d = x.rows(), n = x.cols();
    NormCache cache;
    cache.xhat = Tensor({d, n});
    cache.inv_std.resize(n);
    cache.out = Tensor({d, n});
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
        cache.inv_std[j] = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t i = 0; i < d; ++i) {
            cache.xhat.at(i, j) = (x.at(i, j) - mean) * cache.inv_std[j];
            cache.out.at(i, j) = gain[i] * cache.xhat.at(i, j) + bias[i];
        }
    }
    return cache;
}

// Returns dx; accumulates gain/bias gradients.
Tensor norm_backward(const NormCache& cache, const Tensor& gain, const Tensor& dy,
                     Tensor& dgain, Tensor& dbias) {
    const std::size_t d = dy.rows(), n = dy.cols();
    Tensor dx({d, n});
    for (std::size_t j = 0; j < n; ++j) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double g = dy.at(i, j);
            dgain[i] += g * cache.xhat.at(i, j);
            dbias[i] += g;
            const double dxhat = g * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat.at(i, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double dxhat = dy.at(i, j) * gain[i];
            dx.at(i, j) = cache.inv_std[j] *
                          (dxhat - mean_dxhat - cache.xhat.at(i, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

Tensor rows_slice(const Tensor& x, std::size_t row0, std::size_t count) {
    Tensor out({count, x.cols()});
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(row0 + i, j);
    }
    return out;
}

void rows_accumulate(Tensor& full, const Tensor& slice, std::size_t row0) {
    for (std::size_t i = 0; i < slice.rows(); ++i) {
        for (std::size_t j = 0; j < slice.cols(); ++j) {
            full.at(row0 + i, j) += slice.at(i, j);
        }
    }
}

Tensor& grad_slot(GradMap& grads, const std::string& name, const Tensor& like) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor(like.shape())).first;
    return it->second;
}

void row_sums_into(const Tensor& x, Tensor& out) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) acc += x.at(i, j);
        out[i] += acc;
    }
}

}  // namespace

Tensor activation_backward_columns(const Tensor& probs, const Tensor& dprobs) {
    const std::size_t r = probs.rows(), c = probs.cols();
    Tensor ds({r, c});
    for (std::size_t j = 0; j < c; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < r; ++i) dot += dprobs.at(i, j) * probs.at(i, j);
        for (std::size_t i = 0; i < r; ++i) {
            ds.at(i, j) = probs.at(i, j) * (dprobs.at(i, j) - dot);
        }
    }
    return ds;
}

ForwardCache cached_forward(const Checkpoint& ckpt, const Tensor& x0) {
    const ModelConfig& cfg = ckpt.config;
    if (x0.ndim() != 2 || x0.rows() != cfg.model_dim) {
        throw ShapeMismatch("cached_forward input must be model_dim x N");
    }
    const std::size_t n = x0.cols();

    ForwardCache cache;
    cache.x0 = x0;
    Tensor z = x0;

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerCache lc;
        lc.z_in = z;
        if (cfg.block_mode == BlockMode::Formal) {
            lc.attn = Tensor({cfg.model_dim, n});
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                HeadCache hc;
                hc.q = matmul(ckpt.param(names::head_weight(l, h, "wq")), z);
                hc.k = matmul(ckpt.param(names::head_weight(l, h, "wk")), z);
                hc.v = matmul(ckpt.param(names::head_weight(l, h, "wv")), z);
                Tensor scores = matmul(hc.k.transposed(), hc.q);
                activate_columns_inplace(scores, cfg.variant);
                hc.probs = std::move(scores);
                hc.av = matmul(hc.v, hc.probs);
                lc.attn += matmul(ckpt.param(names::head_weight(l, h, "wo")), hc.av);
                lc.heads.push_back(std::move(hc));
            }
            lc.relu_in = matmul(ckpt.param(names::ffn(l, "w1")), lc.attn);
            add_column_bias(lc.relu_in, ckpt.param(names::ffn(l, "b1")));
            lc.relu_out = lc.relu_in;
            for (double& v : lc.relu_out.raw()) v = v > 0.0 ? v : 0.0;
            lc.z_out = matmul(ckpt.param(names::ffn(l, "w2")), lc.relu_out);
            add_column_bias(lc.z_out, ckpt.param(names::ffn(l, "b2")));
        } else {
            const std::size_t dh = cfg.head_dim();
            lc.ln1 = norm_forward(z, ckpt.param(names::layer_norm(l, 1, "g")),
                                  ckpt.param(names::layer_norm(l, 1, "b")));
            lc.q_full = matmul(ckpt.param(names::attn_weight(l, "wq")), lc.ln1.out);
            lc.k_full = matmul(ckpt.param(names::attn_weight(l, "wk")), lc.ln1.out);
            lc.v_full = matmul(ckpt.param(names::attn_weight(l, "wv")), lc.ln1.out);
            add_column_bias(lc.q_full, ckpt.param(names::attn_weight(l, "bq")));
            add_column_bias(lc.k_full, ckpt.param(names::attn_weight(l, "bk")));
            add_column_bias(lc.v_full, ckpt.param(names::attn_weight(l, "bv")));

            const std::vector<double> slopes =
                cfg.alibi ? alibi_slopes(cfg.heads) : std::vector<double>(cfg.heads, 0.0);
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            lc.concat = Tensor({cfg.model_dim, n});
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                HeadCache hc;
                hc.q = rows_slice(lc.q_full, h * dh, dh);
                hc.k = rows_slice(lc.k_full, h * dh, dh);
                hc.v = rows_slice(lc.v_full, h * dh, dh);
                Tensor scores = matmul(hc.k.transposed(), hc.q);
                scores *= scale;
                if (cfg.alibi) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::vector<double> bias = alibi_bias_row(i, n, slopes[h]);
                        for (std::size_t j = 0; j < n; ++j) scores.at(i, j) += bias[j];
                    }
                }
                activate_columns_inplace(scores, cfg.variant);
                hc.probs = std::move(scores);
                hc.av = matmul(hc.v, hc.probs);
                for (std::size_t i = 0; i < dh; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        lc.concat.at(h * dh + i, j) = hc.av.at(i, j);
                    }
                }
                lc.heads.push_back(std::move(hc));
            }
            lc.attn_out = matmul(ckpt.param(names::attn_weight(l, "wo")), lc.concat);
            add_column_bias(lc.attn_out, ckpt.param(names::attn_weight(l, "bo")));
            lc.z_mid = lc.z_in + lc.attn_out;

            lc.ln2 = norm_forward(lc.z_mid, ckpt.param(names::layer_norm(l, 2, "g")),
                                  ckpt.param(names::layer_norm(l, 2, "b")));
            lc.relu_in = matmul(ckpt.param(names::ffn(l, "w1")), lc.ln2.out);
            add_column_bias(lc.relu_in, ckpt.param(names::ffn(l, "b1")));
            lc.relu_out = lc.relu_in;
            for (double& v : lc.relu_out.raw()) v = v > 0.0 ? v : 0.0;
            lc.ffn_out = matmul(ckpt.param(names::ffn(l, "w2")), lc.relu_out);
            add_column_bias(lc.ffn_out, ckpt.param(names::ffn(l, "b2")));
            lc.z_out = lc.z_mid + lc.ffn_out;
        }
        z = lc.z_out;
        cache.layers.push_back(std::move(lc));
    }

    if (cfg.block_mode == BlockMode::Practical) {
        cache.final_norm = norm_forward(z, ckpt.param(names::final_norm_gain()),
                                        ckpt.param(names::final_norm_bias()));
        cache.final_rep = cache.final_norm.out;
    } else {
        cache.final_rep = z;
    }
    cache.logits = matmul(ckpt.param(names::output_weight()), cache.final_rep);
    if (cfg.block_mode == BlockMode::Practical) {
        add_column_bias(cache.logits, ckpt.param(names::output_bias()));
    }
    return cache;
}

void backward(const Checkpoint& ckpt, const ForwardCache& cache, const Tensor* dlogits,
              const Tensor* dfinal_rep, GradMap& grads, Tensor* dx0) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t n = cache.x0.cols();

    Tensor dfinal({cfg.model_dim, n});
    if (dfinal_rep) dfinal += *dfinal_rep;
    if (dlogits) {
        const Tensor& wout = ckpt.param(names::output_weight());
        grad_slot(grads, names::output_weight(), wout) +=
            matmul(*dlogits, cache.final_rep.transposed());
        if (cfg.block_mode == BlockMode::Practical) {
            row_sums_into(*dlogits, grad_slot(grads, names::output_bias(),
                                              ckpt.param(names::output_bias())));
        }
        dfinal += matmul(wout.transposed(), *dlogits);
    }

    Tensor dz;
    if (cfg.block_mode == BlockMode::Practical) {
        dz = norm_backward(cache.final_norm, ckpt.param(names::final_norm_gain()), dfinal,
                           grad_slot(grads, names::final_norm_gain(),
                                     ckpt.param(names::final_norm_gain())),
                           grad_slot(grads, names::final_norm_bias(),
                                     ckpt.param(names::final_norm_bias())));
    } else {
        dz = dfinal;
    }

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const LayerCache& lc = cache.layers[li];
        if (cfg.block_mode == BlockMode::Formal) {
            // z_out = w2 * relu(w1 * attn + b1) + b2
            const Tensor& w2 = ckpt.param(names::ffn(li, "w2"));
            grad_slot(grads, names::ffn(li, "w2"), w2) += matmul(dz, lc.relu_out.transposed());
            row_sums_into(dz, grad_slot(grads, names::ffn(li, "b2"),
                                        ckpt.param(names::ffn(li, "b2"))));
            Tensor du = matmul(w2.transposed(), dz);
            for (std::size_t i = 0; i < du.size(); ++i) {
                if (lc.relu_in[i] <= 0.0) du[i] = 0.0;
            }
            const Tensor& w1 = ckpt.param(names::ffn(li, "w1"));
            grad_slot(grads, names::ffn(li, "w1"), w1) += matmul(du, lc.attn.transposed());
            row_sums_into(du, grad_slot(grads, names::ffn(li, "b1"),
                                        ckpt.param(names::ffn(li, "b1"))));
            Tensor dattn = matmul(w1.transposed(), du);

            Tensor dz_in({cfg.model_dim, n});
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                const HeadCache& hc = lc.heads[h];
                const Tensor& wo = ckpt.param(names::head_weight(li, h, "wo"));
                const Tensor& wq = ckpt.param(names::head_weight(li, h, "wq"));
                const Tensor& wk = ckpt.param(names::head_weight(li, h, "wk"));
                const Tensor& wv = ckpt.param(names::head_weight(li, h, "wv"));

                grad_slot(grads, names::head_weight(li, h, "wo"), wo) +=
                    matmul(dattn, hc.av.transposed());
                Tensor dav = matmul(wo.transposed(), dattn);
                Tensor dvp = matmul(dav, hc.probs.transposed());
                Tensor dprobs = matmul(hc.v.transposed(), dav);
                Tensor ds = activation_backward_columns(hc.probs, dprobs);
                Tensor dq = matmul(hc.k, ds);
                Tensor dk = matmul(hc.q, ds.transposed());

                grad_slot(grads, names::head_weight(li, h, "wq"), wq) +=
                    matmul(dq, lc.z_in.transposed());
                grad_slot(grads, names::head_weight(li, h, "wk"), wk) +=
                    matmul(dk, lc.z_in.transposed());
                grad_slot(grads, names::head_weight(li, h, "wv"), wv) +=
                    matmul(dvp, lc.z_in.transposed());
                dz_in += matmul(wq.transposed(), dq);
                dz_in += matmul(wk.transposed(), dk);
                dz_in += matmul(wv.transposed(), dvp);
            }
            dz = std::move(dz_in);
        } else {
            const std::size_t dh = cfg.head_dim();
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

            // z_out = z_mid + ffn(ln2(z_mid))
            Tensor dffn = dz;  // residual branch handled below
            const Tensor& w2 = ckpt.param(names::ffn(li, "w2"));
            grad_slot(grads, names::ffn(li, "w2"), w2) += matmul(dffn, lc.relu_out.transposed());
            row_sums_into(dffn, grad_slot(grads, names::ffn(li, "b2"),
                                          ckpt.param(names::ffn(li, "b2"))));
            Tensor du = matmul(w2.transposed(), dffn);
            for (std::size_t i = 0; i < du.size(); ++i) {
                if (lc.relu_in[i] <= 0.0) du[i] = 0.0;
            }
            const Tensor& w1 = ckpt.param(names::ffn(li, "w1"));
            grad_slot(grads, names::ffn(li, "w1"), w1) += matmul(du, lc.ln2.out.transposed());
            row_sums_into(du, grad_slot(grads, names::ffn(li, "b1"),
                                        ckpt.param(names::ffn(li, "b1"))));
            Tensor dy2 = matmul(w1.transposed(), du);

            Tensor dz_mid = norm_backward(lc.ln2, ckpt.param(names::layer_norm(li, 2, "g")), dy2,
                                          grad_slot(grads, names::layer_norm(li, 2, "g"),
                                                    ckpt.param(names::layer_norm(li, 2, "g"))),
                                          grad_slot(grads, names::layer_norm(li, 2, "b"),
                                                    ckpt.param(names::layer_norm(li, 2, "b"))));
            dz_mid += dz;  // residual around the ffn

            // z_mid = z_in + wo * concat + bo
            const Tensor& wo = ckpt.param(names::attn_weight(li, "wo"));
            grad_slot(grads, names::attn_weight(li, "wo"), wo) +=
                matmul(dz_mid, lc.concat.transposed());
            row_sums_into(dz_mid, grad_slot(grads, names::attn_weight(li, "bo"),
                                            ckpt.param(names::attn_weight(li, "bo"))));
            Tensor dconcat = matmul(wo.transposed(), dz_mid);

            Tensor dq_full({cfg.model_dim, n});
            Tensor dk_full({cfg.model_dim, n});
            Tensor dv_full({cfg.model_dim, n});
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                const HeadCache& hc = lc.heads[h];
                Tensor dav = rows_slice(dconcat, h * dh, dh);
                Tensor dvh = matmul(dav, hc.probs.transposed());
                Tensor dprobs = matmul(hc.v.transposed(), dav);
                Tensor ds = activation_backward_columns(hc.probs, dprobs);
                ds *= scale;
                Tensor dqh = matmul(hc.k, ds);
                Tensor dkh = matmul(hc.q, ds.transposed());
                rows_accumulate(dq_full, dqh, h * dh);
                rows_accumulate(dk_full, dkh, h * dh);
                rows_accumulate(dv_full, dvh, h * dh);
            }

            Tensor dy1({cfg.model_dim, n});
            const struct {
                const char* w;
                const char* b;
                Tensor* grad;
            } projections[] = {{"wq", "bq", &dq_full}, {"wk", "bk", &dk_full},
                               {"wv", "bv", &dv_full}};
            for (const auto& proj : projections) {
                const Tensor& w = ckpt.param(names::attn_weight(li, proj.w));
                grad_slot(grads, names::attn_weight(li, proj.w), w) +=
                    matmul(*proj.grad, lc.ln1.out.transposed());
                row_sums_into(*proj.grad, grad_slot(grads, names::attn_weight(li, proj.b),
                                                    ckpt.param(names::attn_weight(li, proj.b))));
                dy1 += matmul(w.transposed(), *proj.grad);
            }

            Tensor dz_in = norm_backward(lc.ln1, ckpt.param(names::layer_norm(li, 1, "g")), dy1,
                                         grad_slot(grads, names::layer_norm(li, 1, "g"),
                                                   ckpt.param(names::layer_norm(li, 1, "g"))),
                                         grad_slot(grads, names::layer_norm(li, 1, "b"),
                                                   ckpt.param(names::layer_norm(li, 1, "b"))));
            dz_in += dz_mid;  // residual around attention
            dz = std::move(dz_in);
        }
    }
    if (dx0) *dx0 = std::move(dz);
}

}  // namespace detail
}  // namespace germ
