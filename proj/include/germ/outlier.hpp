#pragma once

#include <optional>
#include <string>
#include <vector>

#include "germ/model.hpp"

namespace germ {

// Pearson kurtosis of the pooled sample, exactly
// K = n * sum (x - mean)^4 / (sum (x - mean)^2)^2, no excess adjustment.
// Throws DegenerateSample when the squared deviation mass is below 1e-30
// (constant input) or the sample has fewer than two points.
double kurtosis(const std::vector<double>& x);
double kurtosis(const Tensor& x);

struct ProbeStat {
    std::string name;
    ProbeKind kind = ProbeKind::FfnOutput;
    std::size_t layer = 0;
    std::optional<double> kurtosis;  // empty when the probe was degenerate
    double inf_norm = 0.0;
};

struct OutlierReport {
    std::string model_id;
    std::size_t n_sequences = 0;
    std::vector<ProbeStat> per_probe;
    // Mean kurtosis over FFN and LayerNorm probes with a defined value;
    // empty when every such probe was degenerate.
    std::optional<double> avg_kurtosis;
    // Max over every transformer-layer probe, attention probabilities included.
    double max_inf_norm = 0.0;

    std::string to_json() const;
    std::string to_csv() const;
};

// Runs the model over the sample, pools every probe's values across all
// sequences, and aggregates the two outlier statistics.
OutlierReport collect_report(const Checkpoint& ckpt,
                             const std::vector<std::vector<std::size_t>>& sequences,
                             const std::string& model_id);

}  // namespace germ
