// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/fingerprint.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"

namespace tpfp {

using nlohmann::json;

namespace {

json kinds_json(const Fingerprint& fp) {
    json out = json::object();
    for (const auto& [kind, seq] : fp.kinds) {
        json arr = json::array();
        for (double v : seq.values) arr.push_back(v);
        out[std::string(to_string(kind))] = std::move(arr);
    }
    return out;
}

json ref_json(const TensorRef& ref) {
    json j = {{"name", ref.name}};
    if (ref.rows) j["rows"] = json::array({ref.rows->begin, ref.rows->end});
    if (ref.expert) j["expert"] = *ref.expert;
    return j;
}

TensorRef ref_from_json(const json& j) {
    if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) {
        throw Error(ErrorKind::DocumentMalformed, "source entry needs a name");
    }
    TensorRef ref;
    ref.name = j["name"].get<std::string>();
    if (j.contains("rows")) {
        const auto& r = j["rows"];
        if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned()) {
            throw Error(ErrorKind::DocumentMalformed, fmt::format("source '{}' has malformed rows", ref.name));
        }
        ref.rows = RowRange{r[0].get<std::uint64_t>(), r[1].get<std::uint64_t>()};
    }
    if (j.contains("expert")) {
        if (!j["expert"].is_number_unsigned()) {
            throw Error(ErrorKind::DocumentMalformed, fmt::format("source '{}' has malformed expert", ref.name));
        }
        ref.expert = j["expert"].get<std::size_t>();
    }
    return ref;
}

void validate_sequence(ProjectionKind kind, const std::vector<double>& values, std::size_t num_layers) {
    if (values.size() != num_layers) {
        throw Error(ErrorKind::DocumentMalformed,
                    fmt::format("kind {} has {} values for {} layers", to_string(kind), values.size(), num_layers));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]) || values[i] < 0.0) {
            throw Error(ErrorKind::DocumentMalformed,
                        fmt::format("kind {} layer {} has invalid sigma {}", to_string(kind), i, values[i]));
        }
    }
}

template <typename T>
const json& require(const json& doc, const char* key, T check) {
    if (!doc.contains(key) || !check(doc[key])) {
        throw Error(ErrorKind::DocumentMalformed, fmt::format("fingerprint field '{}' missing or malformed", key));
    }
    return doc[key];
}

}  // namespace

std::string_view tool_version() { return "0.3.0"; }

std::string_view to_string(MoeMode mode) {
    return mode == MoeMode::Pooled ? "pooled" : "per-expert-mean";
}

std::optional<MoeMode> parse_moe_mode(std::string_view text) {
    if (text == "pooled" || text == "POOLED") return MoeMode::Pooled;
    if (text == "per-expert-mean" || text == "PER_EXPERT_MEAN") return MoeMode::PerExpertMean;
    return std::nullopt;
}

Fingerprint make_fingerprint(std::string model_id, std::map<ProjectionKind, std::vector<double>> sequences,
                             ExtractionInfo extraction) {
    if (sequences.empty()) throw Error(ErrorKind::DocumentMalformed, "fingerprint has no sequences");
    Fingerprint fp;
    fp.model_id = std::move(model_id);
    fp.num_layers = sequences.begin()->second.size();
    for (auto& [kind, values] : sequences) {
        validate_sequence(kind, values, fp.num_layers);
        fp.kinds.emplace(kind, StdSequence{kind, std::move(values)});
    }
    if (extraction.tool_version.empty()) extraction.tool_version = std::string(tool_version());
    fp.extraction = std::move(extraction);
    fp.content_hash = compute_content_hash(fp);
    return fp;
}

Fingerprint extract_fingerprint(const CheckpointHandle& ckpt, const ModelConfig& cfg, const KindSet& kinds,
                                const ExtractOptions& options, const RuleTable& rules) {
    return extract_fingerprint(ckpt, cfg, resolve_layers(ckpt, cfg, kinds, rules), kinds, options);
}

Fingerprint extract_fingerprint(const CheckpointHandle& ckpt, const ModelConfig& cfg,
                                const LayerTensorMap& map, const KindSet& kinds, const ExtractOptions& options) {
    struct Job {
        const TensorRef* ref;
        StreamStats stats;
        std::exception_ptr error;
    };
    // Flatten every (kind, layer, tensor) so tensors can be reduced in parallel;
    // each tensor's stats are independent of scheduling.
    std::vector<Job> jobs;
    for (auto kind : kinds) {
        for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
            for (const auto& ref : map.at(layer, kind)) jobs.push_back({&ref, {}, nullptr});
        }
    }
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                jobs[i].stats = tensor_stats(ckpt, jobs[i].ref->name, jobs[i].ref->rows, 1);
            } catch (...) {
                jobs[i].error = std::current_exception();
            }
        }
    };
    const std::size_t nworkers = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(1, jobs.size()));
    if (nworkers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < nworkers; ++w) pool.emplace_back(work);
    }

    ExtractionInfo info;
    info.tool_version = std::string(tool_version());
    info.moe_mode = options.moe_mode;
    std::map<ProjectionKind, std::vector<double>> sequences;
    std::size_t j = 0;
    for (auto kind : kinds) {
        auto& values = sequences[kind];
        auto& sources = info.sources[kind];
        for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
            const auto& refs = map.at(layer, kind);
            sources.push_back(refs);
            StreamStats pooled;
            double sigma_sum = 0.0;
            for (std::size_t r = 0; r < refs.size(); ++r, ++j) {
                const auto& job = jobs[j];
                try {
                    if (job.error) std::rethrow_exception(job.error);
                    if (options.moe_mode == MoeMode::Pooled) {
                        pooled = merge_stats(pooled, job.stats);
                    } else {
                        sigma_sum += sample_std(job.stats);
                    }
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::DegenerateTensor) throw;
                    throw Error(ErrorKind::DegenerateLayer,
                                fmt::format("layer {} kind {}: {}", layer, to_string(kind), e.detail()));
                }
            }
            double sigma = 0.0;
            if (options.moe_mode == MoeMode::Pooled) {
                if (pooled.count < 2) {
                    throw Error(ErrorKind::DegenerateLayer,
                                fmt::format("layer {} kind {} has {} elements", layer, to_string(kind), pooled.count));
                }
                sigma = sample_std(pooled);
            } else {
                sigma = sigma_sum / static_cast<double>(refs.size());
            }
            values.push_back(sigma);
        }
    }
    return make_fingerprint(cfg.model_id, std::move(sequences), std::move(info));
}

std::vector<double> normalize_values(std::span<const double> values) {
    if (values.size() < 2) {
        throw Error(ErrorKind::DegenerateSequence,
                    fmt::format("normalization needs at least 2 values, got {}", values.size()));
    }
    const StreamStats s = StreamStats::of(values);
    const double sigma = std::sqrt(s.m2 / static_cast<double>(s.count - 1));
    double scale = 0.0;
    for (double v : values) scale = std::max(scale, std::abs(v));
    if (!(sigma > 1e-12 * scale)) {
        throw Error(ErrorKind::DegenerateSequence,
                    fmt::format("sequence of {} values is constant (std {:g}); it has no shape to compare",
                                values.size(), sigma));
    }
    std::vector<double> out;
    out.reserve(values.size());
    for (double v : values) out.push_back((v - s.mean) / sigma);
    return out;
}

NormalizedSequence normalize(const StdSequence& seq) {
    try {
        return {seq.kind, normalize_values(seq.values)};
    } catch (const Error& e) {
        throw e.with_context(fmt::format("kind {}", to_string(seq.kind)));
    }
}

std::string compute_content_hash(const Fingerprint& fp) { return sha256_hex(canonical_dump(kinds_json(fp))); }

std::string serialize_fingerprint(const Fingerprint& fp) {
    json sources = json::object();
    for (const auto& [kind, layers] : fp.extraction.sources) {
        json per_layer = json::array();
        for (const auto& refs : layers) {
            json arr = json::array();
            for (const auto& r : refs) arr.push_back(ref_json(r));
            per_layer.push_back(std::move(arr));
        }
        sources[std::string(to_string(kind))] = std::move(per_layer);
    }
    json doc = {
        {"schema_version", kFingerprintSchemaVersion},
        {"model_id", fp.model_id},
        {"num_layers", fp.num_layers},
        {"kinds", kinds_json(fp)},
        {"extraction",
         {{"dtype_policy", fp.extraction.dtype_policy},
          {"std_convention", fp.extraction.std_convention},
          {"tool_version", fp.extraction.tool_version},
          {"moe_mode", std::string(to_string(fp.extraction.moe_mode))},
          {"sources", std::move(sources)}}},
        {"content_hash", fp.content_hash},
    };
    return canonical_dump(doc, 1) + "\n";
}

Fingerprint deserialize_fingerprint(std::string_view document) {
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::DocumentMalformed, fmt::format("fingerprint is not valid JSON: {}", e.what()));
    }
    if (!doc.is_object()) throw Error(ErrorKind::DocumentMalformed, "fingerprint is not a JSON object");
    const auto& version = require(doc, "schema_version", [](const json& v) { return v.is_number_integer(); });
    if (version.get<std::int64_t>() > kFingerprintSchemaVersion) {
        throw Error(ErrorKind::SchemaVersionUnsupported,
                    fmt::format("schema_version {} is newer than supported version {}", version.get<std::int64_t>(),
                                kFingerprintSchemaVersion));
    }
    if (version.get<std::int64_t>() < 1) {
        throw Error(ErrorKind::DocumentMalformed, fmt::format("schema_version {} is invalid", version.dump()));
    }
    Fingerprint fp;
    fp.model_id = require(doc, "model_id", [](const json& v) { return v.is_string(); }).get<std::string>();
    fp.num_layers = require(doc, "num_layers", [](const json& v) { return v.is_number_unsigned(); }).get<std::size_t>();
    fp.content_hash = require(doc, "content_hash", [](const json& v) { return v.is_string(); }).get<std::string>();
    const auto& kinds = require(doc, "kinds", [](const json& v) { return v.is_object() && !v.empty(); });
    for (const auto& [name, arr] : kinds.items()) {
        auto kind = parse_kind(name);
        if (!kind || !arr.is_array()) {
            throw Error(ErrorKind::DocumentMalformed, fmt::format("unknown or malformed kind '{}'", name));
        }
        StdSequence seq{*kind, {}};
        for (const auto& v : arr) {
            if (!v.is_number()) throw Error(ErrorKind::DocumentMalformed, fmt::format("kind {} has a non-number", name));
            seq.values.push_back(v.get<double>());
        }
        validate_sequence(*kind, seq.values, fp.num_layers);
        fp.kinds.emplace(*kind, std::move(seq));
    }
    const auto& ex = require(doc, "extraction", [](const json& v) { return v.is_object(); });
    fp.extraction.dtype_policy = ex.value("dtype_policy", std::string{});
    fp.extraction.std_convention = ex.value("std_convention", std::string{});
    fp.extraction.tool_version = ex.value("tool_version", std::string{});
    const auto mode = parse_moe_mode(ex.value("moe_mode", std::string{"pooled"}));
    if (!mode) throw Error(ErrorKind::DocumentMalformed, "unknown moe_mode");
    fp.extraction.moe_mode = *mode;
    if (ex.contains("sources")) {
        for (const auto& [name, layers] : ex["sources"].items()) {
            auto kind = parse_kind(name);
            if (!kind || !layers.is_array()) {
                throw Error(ErrorKind::DocumentMalformed, fmt::format("malformed sources for '{}'", name));
            }
            auto& dst = fp.extraction.sources[*kind];
            for (const auto& refs : layers) {
                if (!refs.is_array()) throw Error(ErrorKind::DocumentMalformed, "sources must be nested arrays");
                std::vector<TensorRef> layer_refs;
                for (const auto& r : refs) layer_refs.push_back(ref_from_json(r));
                dst.push_back(std::move(layer_refs));
            }
        }
    }
    const auto actual = compute_content_hash(fp);
    if (actual != fp.content_hash) {
        throw Error(ErrorKind::HashMismatch,
                    fmt::format("fingerprint '{}' content_hash {} does not match recomputed {}", fp.model_id,
                                fp.content_hash, actual));
    }
    return fp;
}

void save_fingerprint(const Fingerprint& fp, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_fingerprint(fp));
}

Fingerprint load_fingerprint(const std::filesystem::path& path) {
    const auto text = read_file(path);
    try {
        return deserialize_fingerprint(text);
    } catch (const Error& e) {
        throw e.with_context(path.string());
    }
}

std::string fingerprint_filename(std::string_view model_id) {
    std::string out;
    for (char c : model_id) {
        const bool safe = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
        if (c == '/' || c == '\\') out += "__";
        else out.push_back(safe ? c : '_');
    }
    if (out.empty() || out.front() == '.') out.insert(out.begin(), '_');
    return out + std::string(kFingerprintSuffix);
}

}  // namespace tpfp
