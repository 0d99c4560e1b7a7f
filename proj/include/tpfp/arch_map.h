// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tpfp/tensor_store.h"

namespace tpfp {

enum class ProjectionKind { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<ProjectionKind, 4> kAttentionKinds = {
    ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::O};
inline constexpr std::array<ProjectionKind, 3> kFfnKinds = {
    ProjectionKind::Gate, ProjectionKind::Up, ProjectionKind::Down};

using KindSet = std::set<ProjectionKind>;

// Lower-case wire names: q k v o gate up down.
std::string_view to_string(ProjectionKind kind);
std::optional<ProjectionKind> parse_kind(std::string_view text);
// Comma separated list; also accepts "attn", "ffn" and "all". Throws Usage.
KindSet parse_kind_list(std::string_view text);
bool is_attention(ProjectionKind kind);

struct ModelConfig {
    std::string model_id;
    std::size_t num_layers = 0;
    std::size_t hidden_size = 0;
    std::size_t num_heads = 0;
    std::size_t num_kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t num_experts = 0;  // 0 = dense
    std::string architecture_tag;
    std::vector<std::string> warnings;
};

// Reads config.json from the checkpoint directory. When the layer count (or
// hidden size) is absent it is inferred from tensor names, with a warning.
ModelConfig load_config(const std::filesystem::path& ckpt_dir);

// `ckpt` is only consulted for fallbacks; pass nullptr to disable them.
ModelConfig parse_config(std::string_view json_text, std::string default_model_id,
                         const CheckpointHandle* ckpt);

struct TensorRef {
    std::string name;
    std::optional<RowRange> rows;  // set for slices of fused tensors
    std::optional<std::size_t> expert;

    friend bool operator==(const TensorRef&, const TensorRef&) = default;
};

struct LayerTensorMap {
    std::size_t num_layers = 0;
    std::map<std::pair<std::size_t, ProjectionKind>, std::vector<TensorRef>> entries;

    const std::vector<TensorRef>& at(std::size_t layer, ProjectionKind kind) const;
    friend bool operator==(const LayerTensorMap&, const LayerTensorMap&) = default;
};

// One name rule. A single kind maps the whole tensor; several kinds mean a
// fused tensor whose row blocks appear in that order.
struct NameRule {
    std::string pattern;  // literal text with {layer} and optional {expert}
    std::vector<ProjectionKind> kinds;
    std::string family;
};

class RuleTable {
public:
    explicit RuleTable(std::vector<NameRule> rules);

    static const RuleTable& builtin();
    // Throws RuleFileInvalid.
    static RuleTable from_json(std::string_view text);
    static RuleTable load(const std::filesystem::path& path);

    const std::vector<NameRule>& rules() const { return rules_; }

    struct Match {
        std::size_t rule = 0;
        std::size_t layer = 0;
        std::optional<std::size_t> expert;
    };
    // All rules matching `name`, in table order.
    std::vector<Match> match(std::string_view name) const;

private:
    struct Segment {
        std::string literal;
        enum class Slot { None, Layer, Expert } slot = Slot::None;
    };
    std::vector<NameRule> rules_;
    std::vector<std::vector<Segment>> compiled_;
};

std::string_view builtin_rules_json();

LayerTensorMap resolve_layers(const CheckpointHandle& ckpt, const ModelConfig& cfg,
                              const KindSet& kinds, const RuleTable& rules = RuleTable::builtin());

}  // namespace tpfp
