#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlm/corpus.hpp"
#include "rlm/model.hpp"

namespace rlm {

inline constexpr char kCheckpointMagic[8] = {'R', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<Real> values;
};

// On-disk layout: magic, format version (u32 LE), metadata block
// (u64 LE length + UTF-8 JSON), tensor count (u32 LE), then per tensor:
// name (u32 length + UTF-8), rank (u32), dims (u32 each), dtype code
// (u8: 0 = binary32, 1 = binary64), raw little-endian values.
struct CheckpointManifest {
    std::uint32_t format_version = kCheckpointVersion;
    nlohmann::json metadata;  // config snapshot, vocabulary, train_state
    std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    void take(void* dst, std::size_t n, const char* field) {
        if (pos_ + n > bytes_.size())
            throw IoError("checkpoint " + path_ + ": truncated while reading " + field);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    std::uint32_t u32(const char* field) {
        unsigned char b[4];
        take(b, 4, field);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::uint64_t u64(const char* field) {
        std::uint64_t v = 0;
        unsigned char b[8];
        take(b, 8, field);
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }

    std::string str(std::size_t n, const char* field) {
        std::string s(n, '\0');
        take(s.data(), n, field);
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointManifest& manifest) {
    std::string out;
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(out, manifest.format_version);
    const std::string meta = manifest.metadata.dump();
    detail::put_u64(out, meta.size());
    out.append(meta);
    detail::put_u32(out, static_cast<std::uint32_t>(manifest.tensors.size()));
    for (const auto& t : manifest.tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.append(t.name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        out.push_back(static_cast<char>(1));  // binary64
        for (Real v : t.values) detail::put_f64(out, v);
    }
    // Atomic write: fill a temp file, then rename into place.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open checkpoint file for writing: " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("failed writing checkpoint file: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("failed to move checkpoint into place: " + path);
}

inline CheckpointManifest load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(bytes, path);

    char magic[8];
    r.take(magic, 8, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("checkpoint " + path + ": bad magic");
    CheckpointManifest m;
    m.format_version = r.u32("format version");
    if (m.format_version != kCheckpointVersion)
        throw IoError("checkpoint " + path + ": unsupported format version " +
                      std::to_string(m.format_version));
    const std::uint64_t meta_len = r.u64("metadata length");
    const std::string meta = r.str(meta_len, "metadata");
    try {
        m.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + path + ": bad metadata JSON: " + e.what());
    }
    const std::uint32_t count = r.u32("tensor count");
    m.tensors.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto& t = m.tensors[i];
        const std::uint32_t name_len = r.u32("tensor name length");
        t.name = r.str(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        t.shape.resize(rank);
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape[d] = static_cast<int>(r.u32("tensor dims"));
            if (t.shape[d] <= 0) throw IoError("checkpoint " + path + ": bad tensor dims");
            n *= static_cast<std::size_t>(t.shape[d]);
        }
        std::uint8_t dtype;
        r.take(&dtype, 1, "tensor dtype");
        t.values.resize(n);
        if (dtype == 1) {
            for (std::size_t k = 0; k < n; ++k) {
                std::uint64_t bits = r.u64("tensor data");
                double v;
                std::memcpy(&v, &bits, 8);
                t.values[k] = v;
            }
        } else if (dtype == 0) {
            for (std::size_t k = 0; k < n; ++k) {
                std::uint32_t bits = r.u32("tensor data");
                float v;
                std::memcpy(&v, &bits, 4);
                t.values[k] = static_cast<Real>(v);
            }
        } else {
            throw IoError("checkpoint " + path + ": unknown dtype code " + std::to_string(dtype));
        }
    }
    if (!r.at_end()) throw IoError("checkpoint " + path + ": trailing bytes after tensors");
    return m;
}

// --- JSON converters for the metadata block --------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"cell", cell_name(c.cell)},   {"vocab_size", c.vocab_size},
            {"hidden_size", c.hidden_size}, {"num_layers", c.num_layers},
            {"dp", c.dp},                   {"dp_h", c.dp_h},
            {"tied", c.tied}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.cell = parse_cell(j.at("cell").get<std::string>());
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden_size = j.at("hidden_size").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.dp = j.at("dp").get<double>();
    c.dp_h = j.at("dp_h").get<double>();
    c.tied = j.at("tied").get<bool>();
    return c;
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v) {
    return {{"tokens", v.id_to_token}, {"eos_id", v.eos_id}, {"unk_id", v.unk_id}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
    Vocabulary v;
    for (const auto& tok : j.at("tokens")) v.add(tok.get<std::string>());
    v.eos_id = j.at("eos_id").get<int>();
    v.unk_id = j.at("unk_id").get<int>();
    if (v.eos_id < 0 || v.eos_id >= v.size() || v.unk_id < 0 || v.unk_id >= v.size())
        throw IoError("checkpoint vocabulary: reserved ids out of range");
    return v;
}

inline std::vector<NamedTensor> snapshot_params(LanguageModel& model) {
    std::vector<NamedTensor> out;
    model.for_each_param(
        [&](Param& p) { out.push_back(NamedTensor{p.name, p.shape, p.value}); });
    return out;
}

// Restores parameter tensors by name, validating shapes. The checkpoint must
// carry exactly the model's parameter set.
inline void load_params(LanguageModel& model, const CheckpointManifest& manifest) {
    std::size_t used = 0;
    model.for_each_param([&](Param& p) {
        const NamedTensor* found = nullptr;
        for (const auto& t : manifest.tensors)
            if (t.name == p.name) {
                found = &t;
                break;
            }
        if (!found) throw IoError("checkpoint missing tensor '" + p.name + "'");
        if (found->shape != p.shape)
            throw ShapeError("checkpoint tensor '" + p.name + "': shape " +
                             shape_str(found->shape) + " does not match model shape " +
                             shape_str(p.shape));
        p.value = found->values;
        p.zero_grad();
        ++used;
    });
    if (used != manifest.tensors.size())
        throw IoError("checkpoint carries " + std::to_string(manifest.tensors.size()) +
                      " tensors but the model has " + std::to_string(used) + " parameters");
}

// Field-by-field comparison for loading into an explicitly requested
// configuration; names the first mismatching field.
inline void validate_model_config(const ModelConfig& ckpt, const ModelConfig& requested) {
    auto fail = [](const std::string& field, const std::string& a, const std::string& b) {
        throw IoError("checkpoint field " + field + ": checkpoint has " + a +
                      " but " + b + " was requested");
    };
    if (ckpt.cell != requested.cell)
        fail("cell", cell_name(ckpt.cell), cell_name(requested.cell));
    if (ckpt.vocab_size != requested.vocab_size)
        fail("vocab_size", std::to_string(ckpt.vocab_size), std::to_string(requested.vocab_size));
    if (ckpt.hidden_size != requested.hidden_size)
        fail("hidden_size", std::to_string(ckpt.hidden_size),
             std::to_string(requested.hidden_size));
    if (ckpt.num_layers != requested.num_layers)
        fail("num_layers", std::to_string(ckpt.num_layers), std::to_string(requested.num_layers));
    if (ckpt.tied != requested.tied)
        fail("tied", ckpt.tied ? "true" : "false", requested.tied ? "true" : "false");
}

}  // namespace rlm
