#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "germ/model.hpp"

namespace germ {

enum class QuantGranularity { PerTensor, PerChannel };
enum class QuantMethod { Traditional, SmoothQuant };

// Recipe for simulated post-training quantization. 16 bits means
// pass-through on that side.
struct QuantSpec {
    int weight_bits = 8;
    int act_bits = 8;
    QuantGranularity granularity = QuantGranularity::PerTensor;
    bool symmetric = true;
    QuantMethod method = QuantMethod::Traditional;
    std::optional<double> smoothquant_alpha;  // set only when method == SmoothQuant

    void validate() const;
    // "8W/8A" notation used by the CLI and report files.
    static std::pair<int, int> parse_bits(const std::string& s);
    std::string bits_string() const;
};

// Running min/max statistics for one activation site. Channel resolution is
// the row axis; score matrices are tracked as a single channel because their
// extent varies with sequence length.
struct SiteStats {
    std::vector<double> absmax;  // per channel
    std::vector<double> lo;
    std::vector<double> hi;

    double tensor_absmax() const;
    double tensor_lo() const;
    double tensor_hi() const;
};

struct CalibrationStats {
    std::map<std::string, SiteStats> sites;
    void observe(const std::string& site, const Tensor& x, bool single_channel);
};

double round_half_even(double v);

// Symmetric uniform fake quantization: scale = absmax / (2^(bits-1) - 1),
// q = clamp(round-half-even(x / scale), -qmax, qmax), result q * scale.
Tensor fake_quant(const Tensor& x, int bits, double absmax);

// Per-row symmetric variant.
Tensor fake_quant_per_channel(const Tensor& x, int bits, const std::vector<double>& absmax);

// Asymmetric affine fake quantization over [lo, hi] with an integer
// zero point.
Tensor fake_quant_affine(const Tensor& x, int bits, double lo, double hi);

// SmoothQuant per-channel difficulty migration:
// s_j = max|X_j|^alpha / max|W_j|^(1-alpha), inputs floored at 1e-8.
std::vector<double> smoothquant_migrate(const std::vector<double>& x_absmax,
                                        const std::vector<double>& w_absmax,
                                        double alpha);

// Runs the unquantized model over the sample recording per-site stats.
CalibrationStats calibrate(const Checkpoint& ckpt,
                           const std::vector<std::vector<std::size_t>>& sample,
                           const QuantSpec& spec);

// A checkpoint with fake-quantized weights plus the runtime recipe for
// activation quantization at every linear input and score matrix.
class QuantizedModel {
public:
    QuantizedModel(Checkpoint ckpt, QuantSpec spec);

    Tensor forward(const std::vector<std::size_t>& tokens,
                   ActivationTrace* trace = nullptr) const;
    Tensor forward_raw(const Tensor& x, ActivationTrace* trace = nullptr) const;

    const Checkpoint& checkpoint() const { return ckpt_; }
    const QuantSpec& spec() const { return spec_; }

    struct ActRuntime {
        std::vector<double> inv_migration;  // empty when no migration at this site
        bool single_channel = false;
        std::vector<double> absmax;  // effective post-migration absmax per channel
        double lo = 0.0, hi = 0.0;   // effective per-tensor range (asymmetric)
    };
    std::map<std::string, ActRuntime> act_runtime;

private:
    Checkpoint ckpt_;
    QuantSpec spec_;
};

// Applies migration (when requested) and weight quantization, and derives
// the activation runtime from calibration stats. Throws MissingStats when a
// site demanded by the spec has no calibration entry.
QuantizedModel quantize_model(const Checkpoint& ckpt, const QuantSpec& spec,
                              const CalibrationStats& stats);

// Names of the weight tensors that the quantizer touches.
std::vector<std::string> quantizable_weights(const Checkpoint& ckpt);

struct DeviationReport {
    double mean_abs = 0.0;
    double max_abs = 0.0;
    std::size_t count = 0;
};

// Element-wise logit deviation between the plain and quantized model over a
// set of sequences.
DeviationReport logit_deviation(const Checkpoint& base, const QuantizedModel& qm,
                                const std::vector<std::vector<std::size_t>>& sequences);

}  // namespace germ
