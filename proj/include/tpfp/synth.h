// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
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

std::uint16_t encode_f16(double value);   // round to nearest even
std::uint16_t encode_bf16(double value);  // round to nearest even
std::vector<std::byte> encode_values(std::span<const double> values, DType dtype);

struct TensorData {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::vector<double> values;  // row-major, rounded to dtype on write
};

// Single safetensors file; tensors are laid out in the given order.
void write_safetensors(const std::filesystem::path& file, std::span<const TensorData> tensors);

// Fixture description. Every matrix is drawn i.i.d. normal and then shifted
// and scaled so its sample std equals the layer's target exactly (before
// dtype rounding).
struct SynthSpec {
    std::string model_id = "synthetic";
    std::size_t num_layers = 4;
    std::size_t hidden_size = 64;
    std::size_t num_heads = 4;
    std::size_t num_kv_heads = 4;
    std::optional<std::size_t> head_dim;
    std::size_t intermediate_size = 128;
    std::size_t num_experts = 0;
    bool shared_expert = false;
    bool identical_experts = false;
    DType dtype = DType::F32;
    bool fused_qkv = false;
    bool fused_gate_up = false;
    KindSet kinds = {ProjectionKind::Q,    ProjectionKind::K,  ProjectionKind::V,   ProjectionKind::O,
                     ProjectionKind::Gate, ProjectionKind::Up, ProjectionKind::Down};
    // Explicit per-layer targets; kinds without one get a seeded log-normal profile.
    std::map<ProjectionKind, std::vector<double>> target_std;
    double base_std = 0.02;
    double profile_spread = 0.3;
    std::uint64_t seed = 0;
    // Additive gaussian noise with std noise_relative * target, drawn after standardizing.
    double noise_relative = 0.0;
    std::uint64_t noise_seed = 1;
    double scale = 1.0;  // multiplies every weight at the end
    std::size_t shards = 1;
    bool extras = true;  // embeddings, norms, biases, router
    bool write_config = true;
    bool config_layer_count = true;

    std::size_t resolved_head_dim() const { return head_dim.value_or(hidden_size / num_heads); }
};

// Throws SpecInvalid, including for unknown keys.
SynthSpec parse_synth_spec(std::string_view json_text);
void validate(const SynthSpec& spec);

// The per-layer targets the generator will realize (before noise and scale).
std::map<ProjectionKind, std::vector<double>> synth_targets(const SynthSpec& spec);

// Writes config.json and one safetensors file (or shards plus index).
// Returns the realized targets.
std::map<ProjectionKind, std::vector<double>> write_synthetic_checkpoint(const SynthSpec& spec,
                                                                         const std::filesystem::path& out_dir);

}  // namespace tpfp
