#include "germ/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace germ {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'G', 'E', 'R', 'M'};

void append_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

json config_to_json_obj(const ModelConfig& cfg) {
    json j;
    j["layers"] = cfg.layers;
    j["heads"] = cfg.heads;
    j["model_dim"] = cfg.model_dim;
    j["ffn_dim"] = cfg.ffn_dim;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["variant"] = to_string(cfg.variant);
    j["block_mode"] = to_string(cfg.block_mode);
    j["alibi"] = cfg.alibi;
    j["output_softmax1"] = cfg.use_output_softmax1();
    return j;
}

ModelConfig config_from_json_obj(const json& j) {
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.model_dim = j.at("model_dim").get<std::size_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    cfg.variant = attention_variant_from_string(j.at("variant").get<std::string>());
    cfg.block_mode = block_mode_from_string(j.at("block_mode").get<std::string>());
    cfg.alibi = j.value("alibi", false);
    if (j.contains("output_softmax1")) {
        cfg.output_softmax1 = j.at("output_softmax1").get<bool>();
    }
    cfg.validate();
    return cfg;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    return config_to_json_obj(cfg).dump();
}

ModelConfig model_config_from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("invalid model config JSON");
    try {
        return config_from_json_obj(j);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid model config: ") + e.what());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path, CheckpointDtype dtype) {
    const std::size_t elem_size = dtype == CheckpointDtype::F32 ? 4 : 8;
    const char* dtype_name = dtype == CheckpointDtype::F32 ? "f32" : "f64";

    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : ckpt.params) {
        json entry;
        entry["name"] = name;
        entry["shape"] = tensor.shape();
        entry["dtype"] = dtype_name;
        entry["offset"] = offset;
        manifest.push_back(entry);
        offset += tensor.size() * elem_size;
    }

    json header;
    header["config"] = json::parse(model_config_to_json(ckpt.config));
    header["kind"] = ckpt.kind;
    header["manifest"] = manifest;
    header["step"] = ckpt.step;
    const std::string header_text = header.dump();

    std::string blob;
    blob.reserve(12 + header_text.size() + offset);
    blob.append(kMagic, 4);
    append_u32(blob, kCheckpointVersion);
    append_u32(blob, static_cast<std::uint32_t>(header_text.size()));
    blob += header_text;
    for (const auto& [name, tensor] : ckpt.params) {
        (void)name;
        for (double v : tensor.raw()) {
            if (dtype == CheckpointDtype::F32) {
                append_u32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            } else {
                append_u64(blob, std::bit_cast<std::uint64_t>(v));
            }
        }
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());

    if (blob.size() < 12) throw CorruptManifest("file shorter than the fixed header");
    if (std::memcmp(blob.data(), kMagic, 4) != 0) throw BadMagic("bad magic in '" + path + "'");
    const std::uint32_t version = read_u32(p + 4);
    if (version != kCheckpointVersion) {
        throw VersionUnsupported("checkpoint format version " + std::to_string(version) +
                                 " is not supported");
    }
    const std::uint32_t header_len = read_u32(p + 8);
    if (blob.size() < 12ull + header_len) throw CorruptManifest("truncated header");

    json header = json::parse(blob.substr(12, header_len), nullptr, false);
    if (header.is_discarded()) throw CorruptManifest("header is not valid JSON");

    Checkpoint ckpt;
    try {
        ckpt.config = config_from_json_obj(header.at("config"));
        ckpt.kind = header.at("kind").get<std::string>();
        ckpt.step = header.at("step").get<std::int64_t>();

        const std::size_t payload_start = 12 + header_len;
        const std::size_t payload_size = blob.size() - payload_start;
        std::uint64_t expected_offset = 0;
        for (const json& entry : header.at("manifest")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
            const std::string dtype = entry.at("dtype").get<std::string>();
            const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
            if (dtype != "f32" && dtype != "f64") {
                throw CorruptManifest("unknown dtype '" + dtype + "'");
            }
            const std::size_t elem_size = dtype == "f32" ? 4 : 8;
            std::size_t count = 1;
            for (std::size_t d : shape) count *= d;
            if (offset != expected_offset) {
                throw CorruptManifest("manifest offsets overlap or leave gaps");
            }
            expected_offset = offset + count * elem_size;
            if (expected_offset > payload_size) {
                throw CorruptManifest("tensor '" + name + "' extends past the payload");
            }
            std::vector<double> data(count);
            const unsigned char* src = p + payload_start + offset;
            for (std::size_t i = 0; i < count; ++i) {
                if (elem_size == 4) {
                    data[i] = static_cast<double>(
                        std::bit_cast<float>(read_u32(src + 4 * i)));
                } else {
                    data[i] = std::bit_cast<double>(read_u64(src + 8 * i));
                }
            }
            try {
                ckpt.params.emplace(name, Tensor(shape, std::move(data)));
            } catch (const Error& e) {
                throw CorruptManifest("tensor '" + name + "': " + e.what());
            }
        }
        if (expected_offset != payload_size) {
            throw CorruptManifest("payload size does not match the manifest");
        }
    } catch (const json::exception& e) {
        throw CorruptManifest(std::string("malformed header: ") + e.what());
    }
    return ckpt;
}

}  // namespace germ
