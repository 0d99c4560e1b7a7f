// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpfp/arch_map.h"
#include "tpfp/tensor_store.h"

namespace tpfp {

inline constexpr int kFingerprintSchemaVersion = 1;
inline constexpr std::string_view kFingerprintSuffix = ".tpfp.json";

std::string_view tool_version();

// Raw per-layer standard deviations of one projection kind; index = layer.
struct StdSequence {
    ProjectionKind kind = ProjectionKind::Q;
    std::vector<double> values;
    friend bool operator==(const StdSequence&, const StdSequence&) = default;
};

// Zero mean, unit sample standard deviation.
struct NormalizedSequence {
    ProjectionKind kind = ProjectionKind::Q;
    std::vector<double> values;
};

// How the expert matrices of one MoE layer become a single sigma.
enum class MoeMode {
    Pooled,         // all experts form one element population
    PerExpertMean,  // sigma per expert, then the arithmetic mean
};

std::string_view to_string(MoeMode mode);
std::optional<MoeMode> parse_moe_mode(std::string_view text);

struct ExtractionInfo {
    std::string dtype_policy = "f64-accumulate";
    std::string std_convention = "sample-n-minus-1";
    std::string tool_version;
    MoeMode moe_mode = MoeMode::Pooled;
    // kind -> layer -> tensors that fed that sigma
    std::map<ProjectionKind, std::vector<std::vector<TensorRef>>> sources;
    friend bool operator==(const ExtractionInfo&, const ExtractionInfo&) = default;
};

struct Fingerprint {
    std::string model_id;
    std::size_t num_layers = 0;
    std::map<ProjectionKind, StdSequence> kinds;  // raw, never normalized
    ExtractionInfo extraction;
    std::string content_hash;
    friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

// Builds a fingerprint from raw sequences (all of length num_layers) and
// fills in content_hash. Throws DocumentMalformed on invalid values.
Fingerprint make_fingerprint(std::string model_id, std::map<ProjectionKind, std::vector<double>> sequences,
                             ExtractionInfo extraction = {});

struct ExtractOptions {
    MoeMode moe_mode = MoeMode::Pooled;
    unsigned workers = 1;
};

Fingerprint extract_fingerprint(const CheckpointHandle& ckpt, const ModelConfig& cfg, const KindSet& kinds,
                                const ExtractOptions& options = {},
                                const RuleTable& rules = RuleTable::builtin());

// Same, over an already resolved map.
Fingerprint extract_fingerprint(const CheckpointHandle& ckpt, const ModelConfig& cfg,
                                const LayerTensorMap& map, const KindSet& kinds,
                                const ExtractOptions& options = {});

// Throws DegenerateSequence for fewer than 2 values or a (numerically) constant input.
std::vector<double> normalize_values(std::span<const double> values);
NormalizedSequence normalize(const StdSequence& seq);

std::string compute_content_hash(const Fingerprint& fp);

std::string serialize_fingerprint(const Fingerprint& fp);
// Verifies schema_version and content_hash.
Fingerprint deserialize_fingerprint(std::string_view document);

void save_fingerprint(const Fingerprint& fp, const std::filesystem::path& path);
Fingerprint load_fingerprint(const std::filesystem::path& path);

// "<model_id>.tpfp.json" with path separators and other unsafe characters replaced.
std::string fingerprint_filename(std::string_view model_id);

}  // namespace tpfp
