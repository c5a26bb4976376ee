#include "germ/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "germ/linalg.hpp"
#include "germ/report.hpp"

namespace germ {

double kurtosis(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 2) throw DegenerateSample("kurtosis needs at least two points");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double m2 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d = v - mean;
        const double d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    if (m2 < 1e-30) throw DegenerateSample("kurtosis undefined for constant sample");
    return static_cast<double>(n) * m4 / (m2 * m2);
}

double kurtosis(const Tensor& x) {
    return kurtosis(x.raw());
}

OutlierReport collect_report(const Checkpoint& ckpt,
                             const std::vector<std::vector<std::size_t>>& sequences,
                             const std::string& model_id) {
    if (sequences.empty()) throw EmptySample("collect_report on empty sample");

    struct Pooled {
        ProbeKind kind;
        std::size_t layer;
        std::vector<double> values;
        double inf_norm = 0.0;
    };
    std::vector<std::string> order;
    std::map<std::string, Pooled> pooled;

    for (const auto& seq : sequences) {
        ActivationTrace trace;
        ForwardOptions opts;
        opts.trace = &trace;
        model_forward(ckpt, seq, opts);
        for (const Probe& p : trace.probes) {
            auto it = pooled.find(p.name);
            if (it == pooled.end()) {
                order.push_back(p.name);
                it = pooled.emplace(p.name, Pooled{p.kind, p.layer, {}, 0.0}).first;
            }
            it->second.values.insert(it->second.values.end(), p.tensor.raw().begin(),
                                     p.tensor.raw().end());
            it->second.inf_norm = std::max(it->second.inf_norm, inf_norm(p.tensor));
        }
    }

    OutlierReport report;
    report.model_id = model_id;
    report.n_sequences = sequences.size();

    double kurt_sum = 0.0;
    std::size_t kurt_count = 0;
    for (const std::string& name : order) {
        const Pooled& p = pooled.at(name);
        ProbeStat stat;
        stat.name = name;
        stat.kind = p.kind;
        stat.layer = p.layer;
        stat.inf_norm = p.inf_norm;
        try {
            stat.kurtosis = kurtosis(p.values);
        } catch (const DegenerateSample&) {
            stat.kurtosis.reset();
        }
        if (stat.kurtosis && p.kind != ProbeKind::AttentionProbs) {
            kurt_sum += *stat.kurtosis;
            ++kurt_count;
        }
        report.max_inf_norm = std::max(report.max_inf_norm, p.inf_norm);
        report.per_probe.push_back(std::move(stat));
    }
    if (kurt_count > 0) {
        report.avg_kurtosis = kurt_sum / static_cast<double>(kurt_count);
    }
    return report;
}

std::string OutlierReport::to_json() const {
    JsonWriter w;
    w.begin_object();
    w.key("model_id");
    w.value(model_id);
    w.key("n_sequences");
    w.value(n_sequences);
    w.key("per_probe");
    w.begin_array();
    for (const ProbeStat& p : per_probe) {
        w.begin_object();
        w.key("name");
        w.value(p.name);
        w.key("kind");
        w.value(to_string(p.kind));
        w.key("layer");
        w.value(p.layer);
        w.key("kurtosis");
        if (p.kurtosis) {
            w.value(*p.kurtosis);
        } else {
            w.null_value();
        }
        w.key("inf_norm");
        w.value(p.inf_norm);
        w.end_object();
    }
    w.end_array();
    w.key("avg_kurtosis");
    if (avg_kurtosis) {
        w.value(*avg_kurtosis);
    } else {
        w.null_value();
    }
    w.key("max_inf_norm");
    w.value(max_inf_norm);
    w.end_object();
    return w.str();
}

std::string OutlierReport::to_csv() const {
    std::string out = "name,kind,layer,kurtosis,inf_norm\n";
    for (const ProbeStat& p : per_probe) {
        out += p.name;
        out += ',';
        out += to_string(p.kind);
        out += ',';
        out += std::to_string(p.layer);
        out += ',';
        if (p.kurtosis) out += JsonWriter::format_double(*p.kurtosis);
        out += ',';
        out += JsonWriter::format_double(p.inf_norm);
        out += '\n';
    }
    return out;
}

}  // namespace germ
