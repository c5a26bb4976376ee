#include "germ/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "germ/linalg.hpp"

namespace germ {

namespace {

bool valid_bits(int b) { return b == 4 || b == 6 || b == 8 || b == 16; }

bool is_score_site(const std::string& site) {
    return site.size() > 7 && site.compare(site.size() - 7, 7, ".scores") == 0;
}

}  // namespace

void QuantSpec::validate() const {
    if (!valid_bits(weight_bits) || !valid_bits(act_bits)) {
        throw InvalidBits("bits must be one of 4, 6, 8, 16");
    }
    if (method == QuantMethod::SmoothQuant) {
        if (!smoothquant_alpha) throw ConfigError("smoothquant requires alpha");
        if (*smoothquant_alpha < 0.0 || *smoothquant_alpha > 1.0) {
            throw AlphaOutOfRange("alpha must lie in [0, 1]");
        }
    } else if (smoothquant_alpha) {
        throw ConfigError("alpha is only meaningful with the smoothquant method");
    }
    if (granularity == QuantGranularity::PerChannel && !symmetric) {
        throw ConfigError("per-channel asymmetric activation quantization is not supported");
    }
}

std::pair<int, int> QuantSpec::parse_bits(const std::string& s) {
    const auto slash = s.find('/');
    if (slash == std::string::npos) throw ConfigError("bits must look like '8W/8A'");
    const std::string w = s.substr(0, slash), a = s.substr(slash + 1);
    if (w.empty() || a.empty() || w.back() != 'W' || a.back() != 'A') {
        throw ConfigError("bits must look like '8W/8A'");
    }
    int wb = 0, ab = 0;
    try {
        wb = std::stoi(w.substr(0, w.size() - 1));
        ab = std::stoi(a.substr(0, a.size() - 1));
    } catch (const std::exception&) {
        throw ConfigError("bits must look like '8W/8A'");
    }
    if (!valid_bits(wb) || !valid_bits(ab)) throw InvalidBits("bits must be one of 4, 6, 8, 16");
    return {wb, ab};
}

std::string QuantSpec::bits_string() const {
    return std::to_string(weight_bits) + "W/" + std::to_string(act_bits) + "A";
}

double SiteStats::tensor_absmax() const {
    double m = 0.0;
    for (double v : absmax) m = std::max(m, v);
    return m;
}

double SiteStats::tensor_lo() const {
    double m = lo.empty() ? 0.0 : lo.front();
    for (double v : lo) m = std::min(m, v);
    return m;
}

double SiteStats::tensor_hi() const {
    double m = hi.empty() ? 0.0 : hi.front();
    for (double v : hi) m = std::max(m, v);
    return m;
}

void CalibrationStats::observe(const std::string& site, const Tensor& x, bool single_channel) {
    const std::size_t channels = single_channel ? 1 : x.rows();
    SiteStats& st = sites[site];
    if (st.absmax.empty()) {
        st.absmax.assign(channels, 0.0);
        st.lo.assign(channels, std::numeric_limits<double>::infinity());
        st.hi.assign(channels, -std::numeric_limits<double>::infinity());
    } else if (st.absmax.size() != channels) {
        throw ShapeMismatch("calibration channel count changed at site " + site);
    }
    if (single_channel) {
        for (double v : x.raw()) {
            st.absmax[0] = std::max(st.absmax[0], std::abs(v));
            st.lo[0] = std::min(st.lo[0], v);
            st.hi[0] = std::max(st.hi[0], v);
        }
        return;
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double v = x.at(i, j);
            st.absmax[i] = std::max(st.absmax[i], std::abs(v));
            st.lo[i] = std::min(st.lo[i], v);
            st.hi[i] = std::max(st.hi[i], v);
        }
    }
}

double round_half_even(double v) {
    const double fl = std::floor(v);
    const double diff = v - fl;
    if (diff > 0.5) return fl + 1.0;
    if (diff < 0.5) return fl;
    return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

namespace {

void check_quant_bits(int bits) {
    if (bits != 4 && bits != 6 && bits != 8) {
        throw InvalidBits("fake_quant bits must be 4, 6 or 8");
    }
}

void quantize_span(double* data, std::size_t n, int bits, double absmax) {
    const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
    if (absmax == 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (data[i] != 0.0) {
                throw ZeroRange("zero absmax with nonzero data");
            }
        }
        return;
    }
    const double scale = absmax / qmax;
    for (std::size_t i = 0; i < n; ++i) {
        double q = round_half_even(data[i] / scale);
        q = std::clamp(q, -qmax, qmax);
        data[i] = q * scale;
    }
}

}  // namespace

Tensor fake_quant(const Tensor& x, int bits, double absmax) {
    check_quant_bits(bits);
    if (absmax < 0.0) throw ZeroRange("negative absmax");
    Tensor out = x;
    quantize_span(out.raw().data(), out.size(), bits, absmax);
    return out;
}

Tensor fake_quant_per_channel(const Tensor& x, int bits, const std::vector<double>& absmax) {
    check_quant_bits(bits);
    if (absmax.size() != x.rows()) {
        throw ShapeMismatch("per-channel absmax size does not match row count");
    }
    Tensor out = x;
    const std::size_t c = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        quantize_span(out.raw().data() + i * c, c, bits, absmax[i]);
    }
    return out;
}

Tensor fake_quant_affine(const Tensor& x, int bits, double lo, double hi) {
    check_quant_bits(bits);
    if (hi < lo) throw ZeroRange("affine range with hi < lo");
    if (hi == lo) {
        for (double v : x.raw()) {
            if (v != lo) throw ZeroRange("zero affine range with varying data");
        }
        return x;
    }
    const double qmax = static_cast<double>((1 << bits) - 1);
    const double scale = (hi - lo) / qmax;
    const double zero_point = std::clamp(round_half_even(-lo / scale), 0.0, qmax);
    Tensor out = x;
    for (double& v : out.raw()) {
        double q = round_half_even(v / scale + zero_point);
        q = std::clamp(q, 0.0, qmax);
        v = (q - zero_point) * scale;
    }
    return out;
}

std::vector<double> smoothquant_migrate(const std::vector<double>& x_absmax,
                                        const std::vector<double>& w_absmax,
                                        double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw AlphaOutOfRange("alpha must lie in [0, 1]");
    if (x_absmax.size() != w_absmax.size()) {
        throw ShapeMismatch("migration stat vectors differ in length");
    }
    constexpr double kFloor = 1e-8;
    std::vector<double> s(x_absmax.size());
    for (std::size_t j = 0; j < s.size(); ++j) {
        const double x = std::max(x_absmax[j], kFloor);
        const double w = std::max(w_absmax[j], kFloor);
        s[j] = std::pow(x, alpha) / std::pow(w, 1.0 - alpha);
    }
    return s;
}

namespace {

// Calibration hook: record and pass activations through unchanged.
class RecordingHook : public ActHook {
public:
    explicit RecordingHook(CalibrationStats& stats) : stats_(stats) {}
    Tensor transform(const std::string& site, Tensor x) override {
        stats_.observe(site, x, is_score_site(site));
        return x;
    }

private:
    CalibrationStats& stats_;
};

std::vector<double> per_column_absmax(const Tensor& w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            out[j] = std::max(out[j], std::abs(w.at(i, j)));
        }
    }
    return out;
}

std::vector<double> per_row_absmax(const Tensor& w) {
    std::vector<double> out(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            out[i] = std::max(out[i], std::abs(w.at(i, j)));
        }
    }
    return out;
}

// Runtime hook for the quantized forward: migrate rows, then fake-quantize.
class QuantizeHook : public ActHook {
public:
    QuantizeHook(const QuantizedModel& qm, const QuantSpec& spec) : qm_(qm), spec_(spec) {}

    Tensor transform(const std::string& site, Tensor x) override {
        auto it = qm_.act_runtime.find(site);
        if (it == qm_.act_runtime.end()) {
            if (spec_.act_bits == 16) return x;  // nothing to apply here
            throw MissingStats("no calibration entry for site " + site);
        }
        const QuantizedModel::ActRuntime& rt = it->second;
        if (!rt.inv_migration.empty()) {
            if (rt.inv_migration.size() != x.rows()) {
                throw ShapeMismatch("migration vector does not match activation rows");
            }
            for (std::size_t i = 0; i < x.rows(); ++i) {
                for (std::size_t j = 0; j < x.cols(); ++j) {
                    x.at(i, j) *= rt.inv_migration[i];
                }
            }
        }
        if (spec_.act_bits == 16) return x;
        if (spec_.symmetric) {
            if (rt.absmax.size() == 1) return fake_quant(x, spec_.act_bits, rt.absmax[0]);
            return fake_quant_per_channel(x, spec_.act_bits, rt.absmax);
        }
        return fake_quant_affine(x, spec_.act_bits, rt.lo, rt.hi);
    }

private:
    const QuantizedModel& qm_;
    const QuantSpec& spec_;
};

}  // namespace

CalibrationStats calibrate(const Checkpoint& ckpt,
                           const std::vector<std::vector<std::size_t>>& sample,
                           const QuantSpec& spec) {
    spec.validate();
    if (sample.empty()) throw EmptySample("calibration sample is empty");
    CalibrationStats stats;
    RecordingHook hook(stats);
    ForwardOptions opts;
    opts.act_hook = &hook;
    for (const auto& seq : sample) {
        model_forward(ckpt, seq, opts);
    }
    return stats;
}

std::vector<std::string> quantizable_weights(const Checkpoint& ckpt) {
    std::vector<std::string> out;
    for (const auto& [name, tensor] : ckpt.params) {
        (void)tensor;
        for (const char* suffix : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2"}) {
            const std::size_t n = std::string(suffix).size();
            if (name.size() > n && name.compare(name.size() - n, n, suffix) == 0) {
                out.push_back(name);
                break;
            }
        }
        if (name == names::output_weight()) out.push_back(name);
    }
    return out;
}

QuantizedModel::QuantizedModel(Checkpoint ckpt, QuantSpec spec)
    : ckpt_(std::move(ckpt)), spec_(spec) {}

Tensor QuantizedModel::forward(const std::vector<std::size_t>& tokens,
                               ActivationTrace* trace) const {
    QuantizeHook hook(*this, spec_);
    ForwardOptions opts;
    opts.trace = trace;
    opts.act_hook = &hook;
    return model_forward(ckpt_, tokens, opts);
}

Tensor QuantizedModel::forward_raw(const Tensor& x, ActivationTrace* trace) const {
    QuantizeHook hook(*this, spec_);
    ForwardOptions opts;
    opts.trace = trace;
    opts.act_hook = &hook;
    return model_forward_raw(ckpt_, x, opts);
}

QuantizedModel quantize_model(const Checkpoint& ckpt, const QuantSpec& spec,
                              const CalibrationStats& stats) {
    spec.validate();
    Checkpoint quantized = ckpt;

    // Migration scales per linear site, applied to the weight here and to
    // the activation (as 1/s) at runtime.
    std::map<std::string, std::vector<double>> migration;
    if (spec.method == QuantMethod::SmoothQuant) {
        for (const std::string& wname : quantizable_weights(ckpt)) {
            const std::string site = wname + ".in";
            auto it = stats.sites.find(site);
            if (it == stats.sites.end()) {
                throw MissingStats("no calibration entry for site " + site);
            }
            Tensor& w = quantized.param(wname);
            const std::vector<double> s =
                smoothquant_migrate(it->second.absmax, per_column_absmax(w),
                                    *spec.smoothquant_alpha);
            for (std::size_t i = 0; i < w.rows(); ++i) {
                for (std::size_t j = 0; j < w.cols(); ++j) w.at(i, j) *= s[j];
            }
            migration[site] = s;
        }
    }

    if (spec.weight_bits != 16) {
        for (const std::string& wname : quantizable_weights(ckpt)) {
            Tensor& w = quantized.param(wname);
            if (spec.granularity == QuantGranularity::PerChannel) {
                w = fake_quant_per_channel(w, spec.weight_bits, per_row_absmax(w));
            } else {
                w = fake_quant(w, spec.weight_bits, inf_norm(w));
            }
        }
    }

    QuantizedModel qm(std::move(quantized), spec);

    const bool needs_runtime = spec.act_bits != 16 || !migration.empty();
    if (needs_runtime) {
        for (const std::string& wname : quantizable_weights(ckpt)) {
            const std::string site = wname + ".in";
            auto it = stats.sites.find(site);
            if (it == stats.sites.end()) {
                throw MissingStats("no calibration entry for site " + site);
            }
            const SiteStats& st = it->second;
            QuantizedModel::ActRuntime rt;
            auto mig = migration.find(site);
            const std::vector<double>* s = nullptr;
            if (mig != migration.end()) {
                s = &mig->second;
                rt.inv_migration.resize(s->size());
                for (std::size_t j = 0; j < s->size(); ++j) {
                    rt.inv_migration[j] = 1.0 / (*s)[j];
                }
            }
            auto scaled = [&](const std::vector<double>& v, std::size_t j) {
                return s ? v[j] / (*s)[j] : v[j];
            };
            if (spec.granularity == QuantGranularity::PerChannel) {
                rt.absmax.resize(st.absmax.size());
                for (std::size_t j = 0; j < st.absmax.size(); ++j) {
                    rt.absmax[j] = scaled(st.absmax, j);
                }
            } else {
                double m = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
                for (std::size_t j = 0; j < st.absmax.size(); ++j) {
                    m = std::max(m, scaled(st.absmax, j));
                    lo = std::min(lo, scaled(st.lo, j));
                    hi = std::max(hi, scaled(st.hi, j));
                }
                rt.absmax = {m};
                rt.lo = lo;
                rt.hi = hi;
            }
            qm.act_runtime[site] = std::move(rt);
        }
        if (spec.act_bits != 16) {
            // Score-matrix sites: per-tensor stats, never migrated.
            for (const auto& [site, st] : stats.sites) {
                if (!is_score_site(site)) continue;
                QuantizedModel::ActRuntime rt;
                rt.single_channel = true;
                rt.absmax = {st.tensor_absmax()};
                rt.lo = st.tensor_lo();
                rt.hi = st.tensor_hi();
                qm.act_runtime[site] = std::move(rt);
            }
        }
    }
    return qm;
}

DeviationReport logit_deviation(const Checkpoint& base, const QuantizedModel& qm,
                                const std::vector<std::vector<std::size_t>>& sequences) {
    if (sequences.empty()) throw EmptySample("deviation sample is empty");
    DeviationReport rep;
    double total = 0.0;
    for (const auto& seq : sequences) {
        Tensor ref = model_forward(base, seq);
        Tensor quant = qm.forward(seq);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const double d = std::abs(ref[i] - quant[i]);
            total += d;
            rep.max_abs = std::max(rep.max_abs, d);
            ++rep.count;
        }
    }
    rep.mean_abs = rep.count ? total / static_cast<double>(rep.count) : 0.0;
    return rep;
}

}  // namespace germ
