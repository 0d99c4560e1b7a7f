// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/synth.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>

#include "json.hpp"
#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

template <typename U>
void store_le(std::byte* p, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

std::vector<double> draw_matrix(std::uint64_t seed, std::string_view key, std::size_t count, double target) {
    std::mt19937_64 rng(splitmix(seed ^ fnv1a(key)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(count);
    for (auto& x : v) x = normal(rng);
    if (target == 0.0) {
        std::fill(v.begin(), v.end(), 0.0);
        return v;
    }
    const StreamStats s = StreamStats::of(v);
    const double sd = std::sqrt(s.m2 / static_cast<double>(s.count - 1));
    for (auto& x : v) x = (x - s.mean) / sd * target;
    return v;
}

void add_noise(std::vector<double>& v, const SynthSpec& spec, std::string_view key, double target) {
    if (spec.noise_relative <= 0.0 || target == 0.0) return;
    std::mt19937_64 rng(splitmix(spec.noise_seed ^ fnv1a(key) ^ 0x5bd1e995ull));
    std::normal_distribution<double> normal(0.0, spec.noise_relative * target);
    for (auto& x : v) x += normal(rng);
}

constexpr double kMaxSynthElements = 2147483648.0;

struct Builder {
    const SynthSpec& spec;
    const std::map<ProjectionKind, std::vector<double>>& targets;
    std::map<std::size_t, std::vector<TensorData>> by_layer;  // layer -> tensors
    std::vector<TensorData> global;

    std::vector<double> matrix(std::string_view key, std::size_t rows, std::size_t cols, double target) {
        auto v = draw_matrix(spec.seed, key, rows * cols, target);
        add_noise(v, spec, key, target);
        if (spec.scale != 1.0) {
            for (auto& x : v) x *= spec.scale;
        }
        return v;
    }

    void emit(std::size_t layer, std::string name, std::size_t rows, std::size_t cols, std::vector<double> values) {
        by_layer[layer].push_back(TensorData{std::move(name), spec.dtype, {rows, cols}, std::move(values)});
    }
};

std::pair<std::size_t, std::size_t> shape_of(const SynthSpec& spec, ProjectionKind kind) {
    const std::size_t d = spec.resolved_head_dim();
    switch (kind) {
        case ProjectionKind::Q: return {spec.num_heads * d, spec.hidden_size};
        case ProjectionKind::K:
        case ProjectionKind::V: return {spec.num_kv_heads * d, spec.hidden_size};
        case ProjectionKind::O: return {spec.hidden_size, spec.num_heads * d};
        case ProjectionKind::Gate:
        case ProjectionKind::Up: return {spec.intermediate_size, spec.hidden_size};
        case ProjectionKind::Down: return {spec.hidden_size, spec.intermediate_size};
    }
    return {0, 0};
}

std::string_view proj_name(ProjectionKind kind) {
    switch (kind) {
        case ProjectionKind::Q: return "q_proj";
        case ProjectionKind::K: return "k_proj";
        case ProjectionKind::V: return "v_proj";
        case ProjectionKind::O: return "o_proj";
        case ProjectionKind::Gate: return "gate_proj";
        case ProjectionKind::Up: return "up_proj";
        case ProjectionKind::Down: return "down_proj";
    }
    return "?";
}

}  // namespace

std::uint16_t encode_bf16(double value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    if ((x & 0x7FFFFFFFu) > 0x7F800000u) return static_cast<std::uint16_t>((x >> 16) | 0x0040u);
    const std::uint32_t rounded = x + 0x7FFFu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>(rounded >> 16);
}

std::uint16_t encode_f16(double value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t ax = x & 0x7FFFFFFFu;
    if (ax >= 0x7F800000u) return static_cast<std::uint16_t>(sign | (ax > 0x7F800000u ? 0x7E00u : 0x7C00u));
    if (ax >= 0x477FF000u) return static_cast<std::uint16_t>(sign | 0x7C00u);  // rounds past 65504
    if (ax < 0x33000000u) return static_cast<std::uint16_t>(sign);           // below 2^-25
    if (ax < 0x38800000u) {
        // half subnormal, unit 2^-24
        const std::uint32_t e = ax >> 23;
        const std::uint32_t m = (ax & 0x7FFFFFu) | 0x800000u;
        const std::uint32_t shift = 126 - e;
        std::uint32_t h = m >> shift;
        const std::uint32_t rem = m & ((1u << shift) - 1);
        const std::uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (h & 1u))) ++h;
        return static_cast<std::uint16_t>(sign | h);
    }
    const std::uint32_t e = (ax >> 23) - 127 + 15;
    const std::uint32_t m = ax & 0x7FFFFFu;
    std::uint32_t h = (e << 10) | (m >> 13);
    const std::uint32_t rem = m & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
}

std::vector<std::byte> encode_values(std::span<const double> values, DType dtype) {
    std::vector<std::byte> out(values.size() * byte_size(dtype));
    std::byte* p = out.data();
    for (double v : values) {
        switch (dtype) {
            case DType::F64: store_le(p, std::bit_cast<std::uint64_t>(v)); break;
            case DType::F32: store_le(p, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
            case DType::F16: store_le(p, encode_f16(v)); break;
            case DType::BF16: store_le(p, encode_bf16(v)); break;
        }
        p += byte_size(dtype);
    }
    return out;
}

void write_safetensors(const fs::path& file, std::span<const TensorData> tensors) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        std::uint64_t count = 1;
        for (auto d : t.shape) count *= d;
        if (count != t.values.size()) {
            throw Error(ErrorKind::SpecInvalid,
                        fmt::format("tensor '{}' has {} values for shape of {} elements", t.name, t.values.size(), count));
        }
        const std::uint64_t bytes = count * byte_size(t.dtype);
        header[t.name] = {{"dtype", std::string(to_string(t.dtype))},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    header["__metadata__"] = {{"format", "pt"}};
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, fmt::format("cannot write '{}'", file.string()));
    std::byte len[8];
    store_le(len, static_cast<std::uint64_t>(text.size()));
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
        const auto bytes = encode_values(t.values, t.dtype);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw Error(ErrorKind::Io, fmt::format("short write to '{}'", file.string()));
}

SynthSpec parse_synth_spec(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::SpecInvalid, fmt::format("synth spec is not valid JSON: {}", e.what()));
    }
    if (!doc.is_object()) throw Error(ErrorKind::SpecInvalid, "synth spec must be a JSON object");
    static const std::set<std::string> known = {
        "model_id",   "num_layers", "hidden_size",   "num_heads",      "num_kv_heads",  "head_dim",
        "intermediate_size", "num_experts", "shared_expert", "identical_experts", "dtype", "fused_qkv",
        "fused_gate_up", "kinds",  "target_std",    "base_std",       "profile_spread", "seed",
        "noise_relative", "noise_seed", "scale",       "shards",         "extras",        "write_config",
        "config_layer_count"};
    for (const auto& [key, _] : doc.items()) {
        if (!known.contains(key)) throw Error(ErrorKind::SpecInvalid, fmt::format("unknown spec key '{}'", key));
    }
    SynthSpec spec;
    auto size_field = [&](const char* key, std::size_t fallback) -> std::size_t {
        if (!doc.contains(key)) return fallback;
        const auto& v = doc[key];
        if (!v.is_number_unsigned()) {
            throw Error(ErrorKind::SpecInvalid, fmt::format("'{}' must be a non-negative integer", key));
        }
        return v.get<std::size_t>();
    };
    try {
        spec.model_id = doc.value("model_id", spec.model_id);
        spec.num_layers = size_field("num_layers", spec.num_layers);
        spec.hidden_size = size_field("hidden_size", spec.hidden_size);
        spec.num_heads = size_field("num_heads", spec.num_heads);
        spec.num_kv_heads = size_field("num_kv_heads", spec.num_heads);
        if (doc.contains("head_dim")) spec.head_dim = size_field("head_dim", 0);
        spec.intermediate_size = size_field("intermediate_size", spec.intermediate_size);
        spec.num_experts = size_field("num_experts", spec.num_experts);
        spec.shared_expert = doc.value("shared_expert", spec.shared_expert);
        spec.identical_experts = doc.value("identical_experts", spec.identical_experts);
        spec.dtype = parse_dtype(doc.value("dtype", std::string("F32")));
        spec.fused_qkv = doc.value("fused_qkv", spec.fused_qkv);
        spec.fused_gate_up = doc.value("fused_gate_up", spec.fused_gate_up);
        if (doc.contains("kinds")) {
            const auto& k = doc["kinds"];
            if (k.is_string()) {
                spec.kinds = parse_kind_list(k.get<std::string>());
            } else {
                spec.kinds.clear();
                for (const auto& item : k) {
                    auto kind = parse_kind(item.get<std::string>());
                    if (!kind) throw Error(ErrorKind::SpecInvalid, fmt::format("unknown kind {}", item.dump()));
                    spec.kinds.insert(*kind);
                }
            }
        }
        if (doc.contains("target_std")) {
            for (const auto& [name, arr] : doc["target_std"].items()) {
                auto kind = parse_kind(name);
                if (!kind) throw Error(ErrorKind::SpecInvalid, fmt::format("unknown kind '{}' in target_std", name));
                spec.target_std[*kind] = arr.get<std::vector<double>>();
            }
        }
        spec.base_std = doc.value("base_std", spec.base_std);
        spec.profile_spread = doc.value("profile_spread", spec.profile_spread);
        spec.seed = size_field("seed", spec.seed);
        spec.noise_relative = doc.value("noise_relative", spec.noise_relative);
        spec.noise_seed = size_field("noise_seed", spec.noise_seed);
        spec.scale = doc.value("scale", spec.scale);
        spec.shards = size_field("shards", spec.shards);
        spec.extras = doc.value("extras", spec.extras);
        spec.write_config = doc.value("write_config", spec.write_config);
        spec.config_layer_count = doc.value("config_layer_count", spec.config_layer_count);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::SpecInvalid, fmt::format("synth spec field has the wrong type: {}", e.what()));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::SpecInvalid) throw;
        throw Error(ErrorKind::SpecInvalid, e.detail());
    }
    validate(spec);
    return spec;
}

void validate(const SynthSpec& spec) {
    auto fail = [](const std::string& msg) { throw Error(ErrorKind::SpecInvalid, msg); };
    if (spec.model_id.empty()) fail("model_id must not be empty");
    if (spec.num_layers < 1) fail("num_layers must be positive");
    if (spec.hidden_size < 1 || spec.num_heads < 1 || spec.num_kv_heads < 1 || spec.intermediate_size < 1) {
        fail("sizes must be positive");
    }
    if (spec.num_heads % spec.num_kv_heads != 0) fail("num_kv_heads must divide num_heads");
    if (!spec.head_dim && spec.hidden_size % spec.num_heads != 0) fail("hidden_size must be divisible by num_heads");
    if (spec.head_dim && *spec.head_dim == 0) fail("head_dim must be positive");
    if (spec.kinds.empty()) fail("kinds must not be empty");
    if (spec.fused_qkv) {
        for (auto k : {ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V}) {
            if (!spec.kinds.contains(k)) fail("fused_qkv needs q, k and v in kinds");
        }
    }
    if (spec.fused_gate_up && (!spec.kinds.contains(ProjectionKind::Gate) || !spec.kinds.contains(ProjectionKind::Up))) {
        fail("fused_gate_up needs gate and up in kinds");
    }
    if (spec.fused_gate_up && spec.num_experts > 0) fail("fused_gate_up is only supported for dense FFNs");
    if (spec.shared_expert && spec.num_experts == 0) fail("shared_expert needs num_experts > 0");
    if (spec.shards < 1 || spec.shards > spec.num_layers) fail("shards must be in [1, num_layers]");
    if (!(spec.base_std > 0.0) || !std::isfinite(spec.base_std)) fail("base_std must be positive");
    if (!(spec.profile_spread >= 0.0)) fail("profile_spread must be non-negative");
    if (!(spec.noise_relative >= 0.0)) fail("noise_relative must be non-negative");
    if (!(spec.scale > 0.0) || !std::isfinite(spec.scale)) fail("scale must be positive");
    const std::size_t d = spec.resolved_head_dim();
    const double per_layer = 2.0 * (spec.num_heads + spec.num_kv_heads) * d * spec.hidden_size +
                             3.0 * spec.intermediate_size * spec.hidden_size * std::max<std::size_t>(1, spec.num_experts + 1);
    if (per_layer * static_cast<double>(spec.num_layers) > kMaxSynthElements) {
        fail("spec describes more than 2^31 weights; refusing to synthesize");
    }
    for (const auto& [kind, values] : spec.target_std) {
        if (values.size() != spec.num_layers) {
            fail(fmt::format("target_std.{} has {} values for {} layers", to_string(kind), values.size(),
                             spec.num_layers));
        }
        for (double v : values) {
            if (!std::isfinite(v) || v < 0.0) fail(fmt::format("target_std.{} has invalid value {}", to_string(kind), v));
        }
    }
}

std::map<ProjectionKind, std::vector<double>> synth_targets(const SynthSpec& spec) {
    std::map<ProjectionKind, std::vector<double>> out;
    for (auto kind : spec.kinds) {
        if (auto it = spec.target_std.find(kind); it != spec.target_std.end()) {
            out[kind] = it->second;
            continue;
        }
        std::mt19937_64 rng(splitmix(spec.seed ^ fnv1a(fmt::format("profile/{}", to_string(kind)))));
        std::normal_distribution<double> normal(0.0, 1.0);
        auto& values = out[kind];
        for (std::size_t l = 0; l < spec.num_layers; ++l) {
            values.push_back(spec.base_std * std::exp(spec.profile_spread * normal(rng)));
        }
    }
    return out;
}

std::map<ProjectionKind, std::vector<double>> write_synthetic_checkpoint(const SynthSpec& spec,
                                                                         const fs::path& out_dir) {
    validate(spec);
    const auto targets = synth_targets(spec);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorKind::Io, fmt::format("cannot create '{}'", out_dir.string()));

    Builder b{spec, targets, {}, {}};
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const auto prefix = fmt::format("model.layers.{}.", l);
        auto target = [&](ProjectionKind k) { return targets.at(k)[l]; };

        if (spec.fused_qkv) {
            std::vector<double> fused;
            std::size_t rows = 0;
            for (auto k : {ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V}) {
                const auto [r, c] = shape_of(spec, k);
                auto part = b.matrix(prefix + "self_attn." + std::string(proj_name(k)), r, c, target(k));
                fused.insert(fused.end(), part.begin(), part.end());
                rows += r;
            }
            b.emit(l, prefix + "self_attn.qkv_proj.weight", rows, spec.hidden_size, std::move(fused));
        }
        for (auto k : kAttentionKinds) {
            if (!spec.kinds.contains(k) || (spec.fused_qkv && k != ProjectionKind::O)) continue;
            const auto [r, c] = shape_of(spec, k);
            const auto name = prefix + "self_attn." + std::string(proj_name(k)) + ".weight";
            b.emit(l, name, r, c, b.matrix(name, r, c, target(k)));
        }

        if (spec.num_experts == 0) {
            if (spec.fused_gate_up) {
                const auto [r, c] = shape_of(spec, ProjectionKind::Gate);
                auto fused = b.matrix(prefix + "mlp.gate_proj", r, c, target(ProjectionKind::Gate));
                auto up = b.matrix(prefix + "mlp.up_proj", r, c, target(ProjectionKind::Up));
                fused.insert(fused.end(), up.begin(), up.end());
                b.emit(l, prefix + "mlp.gate_up_proj.weight", 2 * r, c, std::move(fused));
            }
            for (auto k : kFfnKinds) {
                if (!spec.kinds.contains(k) || (spec.fused_gate_up && k != ProjectionKind::Down)) continue;
                const auto [r, c] = shape_of(spec, k);
                const auto name = prefix + "mlp." + std::string(proj_name(k)) + ".weight";
                b.emit(l, name, r, c, b.matrix(name, r, c, target(k)));
            }
        } else {
            for (auto k : kFfnKinds) {
                if (!spec.kinds.contains(k)) continue;
                const auto [r, c] = shape_of(spec, k);
                std::vector<double> first;
                for (std::size_t e = 0; e < spec.num_experts; ++e) {
                    const auto name = fmt::format("{}mlp.experts.{}.{}.weight", prefix, e, proj_name(k));
                    if (spec.identical_experts && e > 0) {
                        b.emit(l, name, r, c, first);
                        continue;
                    }
                    auto values = b.matrix(name, r, c, target(k));
                    if (e == 0) first = values;
                    b.emit(l, name, r, c, std::move(values));
                }
                if (spec.shared_expert) {
                    const auto name = prefix + "mlp.shared_expert." + std::string(proj_name(k)) + ".weight";
                    b.emit(l, name, r, c, b.matrix(name, r, c, target(k)));
                }
            }
        }

        if (spec.extras) {
            auto vec = [&](std::string name, std::size_t n, double sd) {
                auto v = draw_matrix(spec.seed, name, n, sd);
                b.by_layer[l].push_back(TensorData{std::move(name), spec.dtype, {n}, std::move(v)});
            };
            vec(prefix + "input_layernorm.weight", spec.hidden_size, 0.1);
            vec(prefix + "post_attention_layernorm.weight", spec.hidden_size, 0.1);
            if (!spec.fused_qkv && spec.kinds.contains(ProjectionKind::Q)) {
                vec(prefix + "self_attn.q_proj.bias", spec.num_heads * spec.resolved_head_dim(), 0.1);
            }
            if (spec.num_experts > 0) {
                const auto name = prefix + "mlp.gate.weight";
                b.emit(l, name, spec.num_experts, spec.hidden_size,
                       draw_matrix(spec.seed, name, spec.num_experts * spec.hidden_size, 0.05));
            }
        }
    }
    if (spec.extras) {
        constexpr std::size_t vocab = 32;
        for (std::string name : {"model.embed_tokens.weight", "lm_head.weight"}) {
            b.global.push_back(TensorData{name, spec.dtype, {vocab, spec.hidden_size},
                                          draw_matrix(spec.seed, name, vocab * spec.hidden_size, 0.05)});
        }
        b.global.push_back(TensorData{"model.norm.weight", spec.dtype, {spec.hidden_size},
                                      draw_matrix(spec.seed, "model.norm.weight", spec.hidden_size, 0.1)});
    }

    // clear stale checkpoint files from a previous run into the same directory
    for (const auto& entry : fs::directory_iterator(out_dir)) {
        const auto name = entry.path().filename().string();
        if (name.ends_with(".safetensors") || name.ends_with(".safetensors.index.json")) fs::remove(entry.path());
    }

    if (spec.shards == 1) {
        std::vector<TensorData> all = std::move(b.global);
        for (auto& [_, tensors] : b.by_layer) {
            for (auto& t : tensors) all.push_back(std::move(t));
        }
        write_safetensors(out_dir / "model.safetensors", all);
    } else {
        json weight_map = json::object();
        std::uint64_t total = 0;
        for (std::size_t s = 0; s < spec.shards; ++s) {
            std::vector<TensorData> part;
            if (s == 0) part = std::move(b.global);
            for (auto& [layer, tensors] : b.by_layer) {
                if (layer * spec.shards / spec.num_layers != s) continue;
                for (auto& t : tensors) part.push_back(std::move(t));
            }
            const auto fname = fmt::format("model-{:05}-of-{:05}.safetensors", s + 1, spec.shards);
            for (const auto& t : part) {
                weight_map[t.name] = fname;
                total += t.values.size() * byte_size(t.dtype);
            }
            write_safetensors(out_dir / fname, part);
        }
        const json index = {{"metadata", {{"total_size", total}}}, {"weight_map", std::move(weight_map)}};
        write_file_atomic(out_dir / "model.safetensors.index.json", canonical_dump(index, 2) + "\n");
    }

    if (spec.write_config) {
        json cfg = {{"_name_or_path", spec.model_id},
                    {"model_type", "synthetic"},
                    {"hidden_size", spec.hidden_size},
                    {"num_attention_heads", spec.num_heads},
                    {"num_key_value_heads", spec.num_kv_heads},
                    {"intermediate_size", spec.intermediate_size},
                    {"torch_dtype", std::string(to_string(spec.dtype))}};
        if (spec.config_layer_count) cfg["num_hidden_layers"] = spec.num_layers;
        if (spec.head_dim) cfg["head_dim"] = *spec.head_dim;
        if (spec.num_experts > 0) cfg["num_experts"] = spec.num_experts;
        write_file_atomic(out_dir / "config.json", canonical_dump(cfg, 2) + "\n");
    } else {
        fs::remove(out_dir / "config.json", ec);
    }
    return targets;
}

}  // namespace tpfp
