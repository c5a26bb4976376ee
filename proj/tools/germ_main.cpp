// germ: batch CLI for the outlier-free transformer laboratory.
//
// Subcommands cover the full pipeline: corpus generation, BPE tokenization,
// MLM pretraining, Softmax1 surgery with continued training, classifier
// fine-tuning (full / LoRA / QLoRA / LoftQ), PTQ simulation, outlier
// diagnostics and the low-rank expressivity check. Every command writes a
// RunManifest JSON next to its primary output.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "germ/bpe.hpp"
#include "germ/checkpoint.hpp"
#include "germ/lora.hpp"
#include "germ/outlier.hpp"
#include "germ/quant.hpp"
#include "germ/report.hpp"
#include "germ/train.hpp"

namespace {

using germ::JsonWriter;
using nlohmann::json;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw germ::IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw germ::IoError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw germ::IoError("short write to '" + path + "'");
}

void require_file(const std::string& path) {
    if (!std::filesystem::exists(path)) throw germ::IoError("input file '" + path + "' does not exist");
}

std::vector<std::string> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw germ::IoError("cannot open corpus '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw germ::EmptyCorpus("corpus '" + path + "' is empty");
    return lines;
}

std::optional<std::uint64_t> env_seed_override() {
    const char* env = std::getenv("GERM_SEED");
    if (!env || !*env) return std::nullopt;
    try {
        return std::stoull(env);
    } catch (const std::exception&) {
        throw germ::ConfigError("GERM_SEED is not an unsigned integer");
    }
}

struct ManifestInfo {
    std::string command;
    std::vector<std::string> argv;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;
    std::vector<std::pair<std::string, std::string>> outputs;
    std::string resolved_config_json;  // optional, already-serialized JSON
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    std::int64_t ms() const {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void write_manifest(const std::string& primary_output, const ManifestInfo& info,
                    std::int64_t wall_ms) {
    JsonWriter w;
    w.begin_object();
    w.key("command");
    w.value(info.command);
    w.key("argv");
    w.begin_array();
    for (const std::string& a : info.argv) w.value(a);
    w.end_array();
    w.key("seed");
    w.value(static_cast<std::int64_t>(info.seed));
    w.key("inputs");
    w.begin_object();
    for (const auto& [k, v] : info.inputs) {
        w.key(k);
        w.value(v);
    }
    w.end_object();
    w.key("outputs");
    w.begin_object();
    for (const auto& [k, v] : info.outputs) {
        w.key(k);
        w.value(v);
    }
    w.end_object();
    w.key("wall_time_ms");
    w.value(wall_ms);
    w.end_object();
    std::string text = w.str();
    if (!info.resolved_config_json.empty()) {
        // Splice the pre-serialized config in as-is to keep byte determinism.
        text.pop_back();
        text += ",\"config\":" + info.resolved_config_json + "}";
    }
    write_file(primary_output + ".manifest.json", text + "\n");
}

std::string loss_trace_csv(const std::vector<std::pair<std::size_t, double>>& trace) {
    std::string csv = "step,loss\n";
    for (const auto& [step, loss] : trace) {
        csv += std::to_string(step);
        csv += ',';
        csv += JsonWriter::format_double(loss);
        csv += '\n';
    }
    return csv;
}

germ::TrainConfig train_config_from_json(const json& j) {
    germ::TrainConfig cfg;
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.eps = j.value("eps", cfg.eps);
    cfg.mask_rate = j.value("mask_rate", cfg.mask_rate);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    return cfg;
}

std::string train_config_to_json(const germ::TrainConfig& cfg) {
    JsonWriter w;
    w.begin_object();
    w.key("batch_size");
    w.value(cfg.batch_size);
    w.key("beta1");
    w.value(cfg.beta1);
    w.key("beta2");
    w.value(cfg.beta2);
    w.key("eps");
    w.value(cfg.eps);
    w.key("lr");
    w.value(cfg.lr);
    w.key("mask_rate");
    w.value(cfg.mask_rate);
    w.key("seed");
    w.value(static_cast<std::int64_t>(cfg.seed));
    w.key("steps");
    w.value(cfg.steps);
    w.key("warmup_steps");
    w.value(cfg.warmup_steps);
    w.key("weight_decay");
    w.value(cfg.weight_decay);
    w.end_object();
    return w.str();
}

struct PipelineConfig {
    germ::ModelConfig model;
    germ::TrainConfig train;
};

PipelineConfig load_pipeline_config(const std::string& path) {
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw germ::ConfigError("config '" + path + "' is not valid JSON");
    PipelineConfig cfg;
    try {
        if (j.contains("model")) {
            cfg.model = germ::model_config_from_json_text(j.at("model").dump());
        }
        if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    } catch (const json::exception& e) {
        throw germ::ConfigError(std::string("malformed config: ") + e.what());
    }
    return cfg;
}

germ::Vocab load_vocab(const std::string& path) {
    require_file(path);
    return germ::Vocab::from_json_text(read_file(path));
}

std::vector<std::vector<std::size_t>> encode_corpus(const std::vector<std::string>& corpus,
                                                    const germ::Vocab& vocab,
                                                    std::size_t max_len) {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(corpus.size());
    for (const std::string& seq : corpus) {
        std::vector<std::size_t> ids = germ::encode(seq, vocab);
        if (ids.size() > max_len) ids.resize(max_len);
        if (!ids.empty()) out.push_back(std::move(ids));
    }
    if (out.empty()) throw germ::EmptyCorpus("no usable sequences after tokenization");
    return out;
}

void check_vocab_matches(const germ::Vocab& vocab, const germ::ModelConfig& cfg) {
    if (vocab.size() != cfg.vocab_size) {
        throw germ::ConfigError("vocab has " + std::to_string(vocab.size()) +
                                " tokens but the model expects " +
                                std::to_string(cfg.vocab_size));
    }
}

// ---------------------------------------------------------------- commands

int cmd_gen_corpus(const std::string& spec_path, const std::string& out_path,
                   const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(spec_path);
    json j = json::parse(read_file(spec_path), nullptr, false);
    if (j.is_discarded()) throw germ::ConfigError("corpus spec is not valid JSON");
    germ::CorpusSpec spec;
    try {
        spec.num_sequences = j.value("num_sequences", spec.num_sequences);
        spec.min_len = j.value("min_len", spec.min_len);
        spec.max_len = j.value("max_len", spec.max_len);
        spec.seed = j.value("seed", spec.seed);
        if (j.contains("motifs")) {
            for (const json& m : j.at("motifs")) {
                spec.motifs.push_back({m.at("motif").get<std::string>(),
                                       m.at("rate").get<double>()});
            }
        }
    } catch (const json::exception& e) {
        throw germ::ConfigError(std::string("malformed corpus spec: ") + e.what());
    }
    if (auto seed = env_seed_override()) spec.seed = *seed;

    std::vector<std::string> corpus = germ::gen_corpus(spec);
    std::string text;
    for (const std::string& seq : corpus) {
        text += seq;
        text += '\n';
    }
    write_file(out_path, text);

    ManifestInfo info{"gen-corpus", argv, spec.seed, {{"spec", spec_path}},
                      {{"corpus", out_path}}, ""};
    write_manifest(out_path, info, timer.ms());
    std::cout << "wrote " << corpus.size() << " sequences to " << out_path << "\n";
    return 0;
}

int cmd_tokenizer_train(const std::string& corpus_path, std::size_t vocab_size,
                        const std::string& out_path, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(corpus_path);
    germ::Vocab vocab = germ::bpe_train(read_corpus(corpus_path), vocab_size);
    write_file(out_path, vocab.to_json() + "\n");
    ManifestInfo info{"tokenizer-train", argv, 0, {{"corpus", corpus_path}},
                      {{"vocab", out_path}}, ""};
    write_manifest(out_path, info, timer.ms());
    std::cout << "vocab: " << vocab.size() << " tokens (" << vocab.merges.size()
              << " merges) -> " << out_path << "\n";
    return 0;
}

int cmd_tokenizer_encode(const std::string& vocab_path, const std::string& in_path,
                         const std::string& out_path, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(in_path);
    germ::Vocab vocab = load_vocab(vocab_path);
    std::string out;
    for (const std::string& seq : read_corpus(in_path)) {
        const std::vector<std::size_t> ids = germ::encode(seq, vocab);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(ids[i]);
        }
        out += '\n';
    }
    write_file(out_path, out);
    ManifestInfo info{"tokenizer-encode", argv, 0,
                      {{"vocab", vocab_path}, {"input", in_path}},
                      {{"ids", out_path}}, ""};
    write_manifest(out_path, info, timer.ms());
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& variant,
                 const std::string& corpus_path, const std::string& vocab_path,
                 const std::string& out_path, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(config_path);
    require_file(corpus_path);
    PipelineConfig cfg = load_pipeline_config(config_path);
    if (!variant.empty()) cfg.model.variant = germ::attention_variant_from_string(variant);
    if (auto seed = env_seed_override()) cfg.train.seed = *seed;
    germ::Vocab vocab = load_vocab(vocab_path);
    check_vocab_matches(vocab, cfg.model);

    std::vector<std::string> corpus = read_corpus(corpus_path);
    germ::TrainResult result = germ::pretrain(cfg.train, corpus, vocab, cfg.model);
    germ::save_checkpoint(result.ckpt, out_path);
    write_file(out_path + ".loss.csv", loss_trace_csv(result.loss_trace));

    ManifestInfo info{"pretrain", argv, cfg.train.seed,
                      {{"config", config_path}, {"corpus", corpus_path}, {"vocab", vocab_path}},
                      {{"checkpoint", out_path}, {"loss_trace", out_path + ".loss.csv"}},
                      "{\"model\":" + germ::model_config_to_json(result.ckpt.config) +
                          ",\"train\":" + train_config_to_json(cfg.train) + "}"};
    write_manifest(out_path, info, timer.ms());
    std::cout << "pretrained " << cfg.train.steps << " steps ("
              << germ::to_string(result.ckpt.config.variant) << ") -> " << out_path << "\n";
    return 0;
}

int cmd_surgery(const std::string& in_path, double steps_frac, const std::string& config_path,
                const std::string& corpus_path, const std::string& vocab_path,
                const std::string& out_path, const std::string& report_path,
                const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(in_path);
    require_file(config_path);
    require_file(corpus_path);
    if (steps_frac < 0.0) throw germ::ConfigError("steps-frac must be non-negative");
    PipelineConfig cfg = load_pipeline_config(config_path);
    if (auto seed = env_seed_override()) cfg.train.seed = *seed;
    germ::Vocab vocab = load_vocab(vocab_path);
    germ::Checkpoint ckpt = germ::load_checkpoint(in_path);
    check_vocab_matches(vocab, ckpt.config);
    std::vector<std::string> corpus = read_corpus(corpus_path);

    // Fixed evaluation batch shared by all three loss measurements.
    germ::Rng eval_rng = germ::Rng(cfg.train.seed).fork(99);
    germ::TrainConfig eval_cfg = cfg.train;
    eval_cfg.batch_size = std::max<std::size_t>(16, cfg.train.batch_size);
    germ::MaskedBatch eval_batch =
        germ::mlm_batch(corpus, vocab, eval_cfg, ckpt.config.max_seq_len, eval_rng);

    const double pre_loss = germ::mlm_loss(ckpt, eval_batch);
    germ::Checkpoint swapped = germ::surgery(ckpt);
    const double post_loss = germ::mlm_loss(swapped, eval_batch);

    const std::size_t extra =
        static_cast<std::size_t>(steps_frac * static_cast<double>(ckpt.step) + 0.5);
    germ::TrainResult result =
        germ::continue_training(swapped, cfg.train, corpus, vocab, extra);
    const double final_loss = germ::mlm_loss(result.ckpt, eval_batch);

    germ::save_checkpoint(result.ckpt, out_path);
    write_file(out_path + ".loss.csv", loss_trace_csv(result.loss_trace));

    JsonWriter w;
    w.begin_object();
    w.key("pre_surgery_loss");
    w.value(pre_loss);
    w.key("post_surgery_loss");
    w.value(post_loss);
    w.key("final_loss");
    w.value(final_loss);
    w.key("extra_steps");
    w.value(extra);
    w.key("base_steps");
    w.value(static_cast<std::int64_t>(ckpt.step));
    w.end_object();
    const std::string report = w.str() + "\n";
    if (!report_path.empty()) write_file(report_path, report);

    ManifestInfo info{"surgery", argv, cfg.train.seed,
                      {{"checkpoint", in_path}, {"config", config_path},
                       {"corpus", corpus_path}, {"vocab", vocab_path}},
                      {{"checkpoint", out_path}},
                      ""};
    if (!report_path.empty()) info.outputs.emplace_back("report", report_path);
    write_manifest(out_path, info, timer.ms());
    std::cout << "surgery: pre=" << pre_loss << " post=" << post_loss
              << " final=" << final_loss << " (+" << extra << " steps)\n";
    return 0;
}

std::vector<germ::LabeledExample> read_task(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw germ::IoError("cannot open task file '" + path + "'");
    std::vector<germ::LabeledExample> data;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        germ::LabeledExample ex;
        std::string label;
        if (!(ss >> label >> ex.sequence)) {
            throw germ::IoError("task line is not '<label> <sequence>': " + line);
        }
        ex.label = std::stoi(label) != 0 ? 1 : 0;
        data.push_back(std::move(ex));
    }
    if (data.empty()) throw germ::EmptySample("task file '" + path + "' is empty");
    return data;
}

int cmd_finetune(const std::string& in_path, const std::string& task_path,
                 const std::string& mode_str, std::size_t rank, double alpha,
                 const std::string& config_path, const std::string& vocab_path,
                 const std::string& out_dir, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(in_path);
    require_file(task_path);
    germ::TrainConfig train;
    train.steps = 200;
    train.lr = 1e-4;
    if (!config_path.empty()) {
        require_file(config_path);
        train = load_pipeline_config(config_path).train;
    }
    if (auto seed = env_seed_override()) train.seed = *seed;
    const germ::FinetuneMode mode = germ::finetune_mode_from_string(mode_str);

    germ::Vocab vocab = load_vocab(vocab_path);
    germ::Checkpoint ckpt = germ::load_checkpoint(in_path);
    check_vocab_matches(vocab, ckpt.config);
    std::vector<germ::LabeledExample> data = read_task(task_path);

    germ::FinetuneResult result =
        germ::finetune_classifier(ckpt, data, vocab, train, mode, rank, alpha);

    std::filesystem::create_directories(out_dir);
    const std::string model_path = out_dir + "/model.germ";
    germ::Checkpoint to_save = result.model;
    to_save.params["head.w"] = result.head_w;
    to_save.params["head.b"] = result.head_b;
    germ::save_checkpoint(to_save, model_path);
    if (result.adapters) {
        germ::save_checkpoint(result.adapters->to_checkpoint(ckpt.config),
                              out_dir + "/adapters.germ");
    }
    write_file(out_dir + "/loss.csv", loss_trace_csv(result.loss_trace));

    JsonWriter w;
    w.begin_object();
    w.key("mode");
    w.value(germ::to_string(mode));
    w.key("rank");
    w.value(rank);
    w.key("alpha");
    w.value(alpha);
    w.key("mcc");
    w.value(result.mcc_value);
    w.key("counts");
    w.begin_object();
    w.key("tp");
    w.value(static_cast<std::int64_t>(result.counts.tp));
    w.key("tn");
    w.value(static_cast<std::int64_t>(result.counts.tn));
    w.key("fp");
    w.value(static_cast<std::int64_t>(result.counts.fp));
    w.key("fn");
    w.value(static_cast<std::int64_t>(result.counts.fn));
    w.end_object();
    w.end_object();
    write_file(out_dir + "/eval.json", w.str() + "\n");

    ManifestInfo info{"finetune", argv, train.seed,
                      {{"checkpoint", in_path}, {"task", task_path}, {"vocab", vocab_path}},
                      {{"model", model_path}, {"eval", out_dir + "/eval.json"}},
                      "{\"train\":" + train_config_to_json(train) + "}"};
    write_manifest(model_path, info, timer.ms());
    std::cout << "finetune (" << mode_str << "): mcc=" << result.mcc_value << " -> "
              << out_dir << "\n";
    return 0;
}

int cmd_quantize(const std::string& in_path, const std::string& bits,
                 const std::string& method, double alpha, const std::string& calib_path,
                 const std::string& vocab_path, const std::string& granularity,
                 const std::string& report_path, const std::string& out_path,
                 const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(in_path);
    require_file(calib_path);

    germ::QuantSpec spec;
    std::tie(spec.weight_bits, spec.act_bits) = germ::QuantSpec::parse_bits(bits);
    if (method == "traditional") {
        spec.method = germ::QuantMethod::Traditional;
    } else if (method == "smoothquant") {
        spec.method = germ::QuantMethod::SmoothQuant;
        spec.smoothquant_alpha = alpha;
    } else {
        throw germ::ConfigError("unknown quantization method '" + method + "'");
    }
    if (granularity == "per_tensor") {
        spec.granularity = germ::QuantGranularity::PerTensor;
    } else if (granularity == "per_channel") {
        spec.granularity = germ::QuantGranularity::PerChannel;
    } else {
        throw germ::ConfigError("granularity must be per_tensor or per_channel");
    }
    spec.validate();

    germ::Vocab vocab = load_vocab(vocab_path);
    germ::Checkpoint ckpt = germ::load_checkpoint(in_path);
    check_vocab_matches(vocab, ckpt.config);
    const auto sample =
        encode_corpus(read_corpus(calib_path), vocab, ckpt.config.max_seq_len);

    germ::CalibrationStats stats = germ::calibrate(ckpt, sample, spec);
    germ::QuantizedModel qm = germ::quantize_model(ckpt, spec, stats);
    germ::DeviationReport dev = germ::logit_deviation(ckpt, qm, sample);

    JsonWriter w;
    w.begin_object();
    w.key("bits");
    w.value(spec.bits_string());
    w.key("method");
    w.value(method);
    if (spec.smoothquant_alpha) {
        w.key("alpha");
        w.value(*spec.smoothquant_alpha);
    }
    w.key("granularity");
    w.value(granularity);
    w.key("n_calibration");
    w.value(sample.size());
    w.key("mean_abs_logit_dev");
    w.value(dev.mean_abs);
    w.key("max_abs_logit_dev");
    w.value(dev.max_abs);
    w.end_object();
    write_file(report_path, w.str() + "\n");

    ManifestInfo info{"quantize", argv, 0,
                      {{"checkpoint", in_path}, {"calib", calib_path}, {"vocab", vocab_path}},
                      {{"report", report_path}}, ""};
    if (!out_path.empty()) {
        germ::save_checkpoint(qm.checkpoint(), out_path);
        info.outputs.emplace_back("checkpoint", out_path);
    }
    write_manifest(report_path, info, timer.ms());
    std::cout << "quantize " << spec.bits_string() << " (" << method
              << "): mean_abs_dev=" << dev.mean_abs << "\n";
    return 0;
}

int cmd_diagnose(const std::string& in_path, const std::string& sample_path,
                 const std::string& vocab_path, const std::string& report_path,
                 const std::string& csv_path, const std::string& attn_path,
                 std::size_t attn_limit, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(in_path);
    require_file(sample_path);
    germ::Vocab vocab = load_vocab(vocab_path);
    germ::Checkpoint ckpt = germ::load_checkpoint(in_path);
    check_vocab_matches(vocab, ckpt.config);
    const auto sample =
        encode_corpus(read_corpus(sample_path), vocab, ckpt.config.max_seq_len);

    // Identify the model by file name so reports from different run
    // directories stay byte-comparable.
    germ::OutlierReport report = germ::collect_report(
        ckpt, sample, std::filesystem::path(in_path).filename().string());
    write_file(report_path, report.to_json() + "\n");
    if (!csv_path.empty()) write_file(csv_path, report.to_csv());

    if (!attn_path.empty()) {
        std::string csv = "sequence,probe,row,col,value\n";
        const std::size_t limit = std::min(attn_limit, sample.size());
        for (std::size_t s = 0; s < limit; ++s) {
            germ::ActivationTrace trace;
            germ::ForwardOptions opts;
            opts.trace = &trace;
            germ::model_forward(ckpt, sample[s], opts);
            for (const germ::Probe& p : trace.probes) {
                if (p.kind != germ::ProbeKind::AttentionProbs) continue;
                for (std::size_t i = 0; i < p.tensor.rows(); ++i) {
                    for (std::size_t j = 0; j < p.tensor.cols(); ++j) {
                        csv += std::to_string(s) + ',' + p.name + ',' + std::to_string(i) +
                               ',' + std::to_string(j) + ',' +
                               JsonWriter::format_double(p.tensor.at(i, j)) + '\n';
                    }
                }
            }
        }
        write_file(attn_path, csv);
    }

    ManifestInfo info{"diagnose", argv, 0,
                      {{"checkpoint", in_path}, {"sample", sample_path}, {"vocab", vocab_path}},
                      {{"report", report_path}}, ""};
    if (!csv_path.empty()) info.outputs.emplace_back("csv", csv_path);
    if (!attn_path.empty()) info.outputs.emplace_back("attention_dump", attn_path);
    write_manifest(report_path, info, timer.ms());
    if (report.avg_kurtosis) {
        std::cout << "diagnose: avg_kurtosis=" << *report.avg_kurtosis
                  << " max_inf_norm=" << report.max_inf_norm << "\n";
    } else {
        std::cout << "diagnose: avg_kurtosis=undefined max_inf_norm=" << report.max_inf_norm
                  << "\n";
    }
    return 0;
}

int cmd_theorem_check(const std::string& frozen_path, const std::string& target_path,
                      std::size_t rank, std::size_t trials, std::size_t seq_len,
                      std::uint64_t seed, const std::string& report_path,
                      const std::string& adapters_out, const std::vector<std::string>& argv) {
    Stopwatch timer;
    require_file(frozen_path);
    require_file(target_path);
    if (auto s = env_seed_override()) seed = *s;
    germ::Checkpoint frozen = germ::load_checkpoint(frozen_path);
    germ::Checkpoint target = germ::load_checkpoint(target_path);

    germ::NonSingularityReport nonsingular = germ::check_nonsingularity(frozen, target, rank);
    germ::FunctionalityGap gap = germ::functionality_gap(frozen, target);

    JsonWriter w;
    w.begin_object();
    w.key("rank");
    w.value(rank);
    w.key("trials");
    w.value(trials);
    w.key("seq_len");
    w.value(seq_len);
    w.key("seed");
    w.value(static_cast<std::int64_t>(seed));
    w.key("gaps");
    w.begin_array();
    for (std::size_t g : gap.gaps) w.value(g);
    w.end_array();
    w.key("required_rank");
    w.value(gap.required_rank());
    w.key("nonsingularity_pass");
    w.value(nonsingular.pass);
    w.key("nonsingularity_checked");
    w.value(nonsingular.checked);

    if (!nonsingular.pass) {
        w.key("failures");
        w.begin_array();
        for (const auto& f : nonsingular.failures) {
            w.value(f.family + ":" + f.detail);
        }
        w.end_array();
        w.end_object();
        write_file(report_path, w.str() + "\n");
        throw germ::NonSingularityViolated("non-singularity assumption failed; see " +
                                           report_path);
    }

    germ::AdapterSet adapters = germ::construct_adapters(frozen, target, rank);
    germ::Rng rng(seed);
    const double deviation =
        germ::verify_theorem(frozen, target, adapters, trials, seq_len, rng);

    w.key("max_deviation");
    w.value(deviation);
    w.key("adapter_ranks");
    w.begin_object();
    for (const auto& [name, ad] : adapters.adapters) {
        w.key(name);
        w.value(germ::numerical_rank(ad.merged_delta()));
    }
    w.end_object();
    w.end_object();
    write_file(report_path, w.str() + "\n");

    ManifestInfo info{"theorem-check", argv, seed,
                      {{"frozen", frozen_path}, {"target", target_path}},
                      {{"report", report_path}}, ""};
    if (!adapters_out.empty()) {
        germ::save_checkpoint(adapters.to_checkpoint(frozen.config), adapters_out,
                              germ::CheckpointDtype::F64);
        info.outputs.emplace_back("adapters", adapters_out);
    }
    write_manifest(report_path, info, timer.ms());
    std::cout << "theorem-check: max_deviation=" << deviation << " (required rank "
              << gap.required_rank() << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"germ: outlier-free transformer laboratory"};
    app.require_subcommand(1);
    std::vector<std::string> argv_vec(argv, argv + argc);

    // gen-corpus
    std::string gc_spec, gc_out;
    CLI::App* gen = app.add_subcommand("gen-corpus", "generate a synthetic DNA corpus");
    gen->add_option("--spec", gc_spec, "corpus spec JSON")->required();
    gen->add_option("--out", gc_out, "output corpus path")->required();

    // tokenizer train|encode
    CLI::App* tok = app.add_subcommand("tokenizer", "BPE tokenizer utilities");
    tok->require_subcommand(1);
    std::string tt_corpus, tt_out;
    std::size_t tt_size = 64;
    CLI::App* tok_train = tok->add_subcommand("train", "learn a BPE vocabulary");
    tok_train->add_option("--corpus", tt_corpus, "training corpus")->required();
    tok_train->add_option("--vocab-size", tt_size, "non-special token budget");
    tok_train->add_option("--out", tt_out, "output vocab JSON")->required();
    std::string te_vocab, te_in, te_out;
    CLI::App* tok_encode = tok->add_subcommand("encode", "encode a corpus to token ids");
    tok_encode->add_option("--vocab", te_vocab, "vocab JSON")->required();
    tok_encode->add_option("--in", te_in, "input corpus")->required();
    tok_encode->add_option("--out", te_out, "output id file")->required();

    // pretrain
    std::string pt_config, pt_variant, pt_corpus, pt_vocab, pt_out;
    CLI::App* pre = app.add_subcommand("pretrain", "masked-LM pretraining");
    pre->add_option("--config", pt_config, "pipeline config JSON")->required();
    pre->add_option("--variant", pt_variant, "softmax|softmax1 (overrides config)");
    pre->add_option("--corpus", pt_corpus, "training corpus")->required();
    pre->add_option("--vocab", pt_vocab, "vocab JSON")->required();
    pre->add_option("--out", pt_out, "output checkpoint")->required();

    // surgery
    std::string sg_in, sg_config, sg_corpus, sg_vocab, sg_out, sg_report;
    double sg_frac = 0.2;
    CLI::App* surg = app.add_subcommand("surgery", "swap to Softmax1 and continue training");
    surg->add_option("--in", sg_in, "input checkpoint")->required();
    surg->add_option("--steps-frac", sg_frac, "extra steps as a fraction of the base budget");
    surg->add_option("--config", sg_config, "pipeline config JSON")->required();
    surg->add_option("--corpus", sg_corpus, "training corpus")->required();
    surg->add_option("--vocab", sg_vocab, "vocab JSON")->required();
    surg->add_option("--out", sg_out, "output checkpoint")->required();
    surg->add_option("--report", sg_report, "loss report JSON");

    // finetune
    std::string ft_in, ft_task, ft_mode = "full", ft_config, ft_vocab, ft_out;
    std::size_t ft_rank = 8;
    double ft_alpha = 16.0;
    CLI::App* fine = app.add_subcommand("finetune", "classifier fine-tuning");
    fine->add_option("--in", ft_in, "input checkpoint")->required();
    fine->add_option("--task", ft_task, "labeled task file (label sequence per line)")->required();
    fine->add_option("--mode", ft_mode, "full|lora|qlora|loftq");
    fine->add_option("--rank", ft_rank, "LoRA rank");
    fine->add_option("--alpha", ft_alpha, "LoRA alpha");
    fine->add_option("--config", ft_config, "pipeline config JSON (train section)");
    fine->add_option("--vocab", ft_vocab, "vocab JSON")->required();
    fine->add_option("--out", ft_out, "output directory")->required();

    // quantize
    std::string qt_in, qt_bits = "8W/8A", qt_method = "traditional", qt_calib, qt_vocab;
    std::string qt_granularity = "per_tensor", qt_report, qt_out;
    double qt_alpha = 0.5;
    CLI::App* quant = app.add_subcommand("quantize", "simulated post-training quantization");
    quant->add_option("--in", qt_in, "input checkpoint")->required();
    quant->add_option("--bits", qt_bits, "e.g. 8W/8A, 6W/6A, 4W/4A, 16W/16A");
    quant->add_option("--method", qt_method, "traditional|smoothquant");
    quant->add_option("--alpha", qt_alpha, "smoothquant migration strength");
    quant->add_option("--granularity", qt_granularity, "per_tensor|per_channel");
    quant->add_option("--calib", qt_calib, "calibration corpus")->required();
    quant->add_option("--vocab", qt_vocab, "vocab JSON")->required();
    quant->add_option("--report", qt_report, "output report JSON")->required();
    quant->add_option("--out", qt_out, "optional quantized checkpoint");

    // diagnose
    std::string dg_in, dg_sample, dg_vocab, dg_report, dg_csv, dg_attn;
    std::size_t dg_attn_limit = 4;
    CLI::App* diag = app.add_subcommand("diagnose", "outlier metrics report");
    diag->add_option("--in", dg_in, "input checkpoint")->required();
    diag->add_option("--sample", dg_sample, "probe corpus")->required();
    diag->add_option("--vocab", dg_vocab, "vocab JSON")->required();
    diag->add_option("--report", dg_report, "output report JSON")->required();
    diag->add_option("--csv", dg_csv, "optional per-probe CSV");
    diag->add_option("--attn-dump", dg_attn, "optional raw attention CSV");
    diag->add_option("--attn-limit", dg_attn_limit, "sequences to include in the dump");

    // theorem-check
    std::string th_frozen, th_target, th_report, th_adapters;
    std::size_t th_rank = 4, th_trials = 20, th_seq = 3;
    std::uint64_t th_seed = 0;
    CLI::App* theorem = app.add_subcommand("theorem-check",
                                           "construct adapters and verify exact representation");
    theorem->add_option("--frozen", th_frozen, "frozen checkpoint")->required();
    theorem->add_option("--target", th_target, "target checkpoint")->required();
    theorem->add_option("--rank", th_rank, "LoRA rank budget");
    theorem->add_option("--trials", th_trials, "random verification inputs");
    theorem->add_option("--seq-len", th_seq, "verification sequence length");
    theorem->add_option("--seed", th_seed, "verification seed");
    theorem->add_option("--report", th_report, "output report JSON")->required();
    theorem->add_option("--out-adapters", th_adapters, "optional adapter checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "E_USAGE: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_corpus(gc_spec, gc_out, argv_vec);
        if (tok_train->parsed()) return cmd_tokenizer_train(tt_corpus, tt_size, tt_out, argv_vec);
        if (tok_encode->parsed()) return cmd_tokenizer_encode(te_vocab, te_in, te_out, argv_vec);
        if (pre->parsed()) {
            return cmd_pretrain(pt_config, pt_variant, pt_corpus, pt_vocab, pt_out, argv_vec);
        }
        if (surg->parsed()) {
            return cmd_surgery(sg_in, sg_frac, sg_config, sg_corpus, sg_vocab, sg_out,
                               sg_report, argv_vec);
        }
        if (fine->parsed()) {
            return cmd_finetune(ft_in, ft_task, ft_mode, ft_rank, ft_alpha, ft_config,
                                ft_vocab, ft_out, argv_vec);
        }
        if (quant->parsed()) {
            return cmd_quantize(qt_in, qt_bits, qt_method, qt_alpha, qt_calib, qt_vocab,
                                qt_granularity, qt_report, qt_out, argv_vec);
        }
        if (diag->parsed()) {
            return cmd_diagnose(dg_in, dg_sample, dg_vocab, dg_report, dg_csv, dg_attn,
                                dg_attn_limit, argv_vec);
        }
        if (theorem->parsed()) {
            return cmd_theorem_check(th_frozen, th_target, th_rank, th_trials, th_seq,
                                     th_seed, th_report, th_adapters, argv_vec);
        }
    } catch (const germ::IoError& e) {
        std::cerr << "E_IO: " << e.what() << "\n";
        return 1;
    } catch (const germ::Error& e) {
        std::cerr << "E_DOMAIN: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "E_DOMAIN: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "E_USAGE: no subcommand\n";
    return 2;
}
