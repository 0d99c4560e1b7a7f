// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <functional>
#include <random>

#include <fmt/format.h>

#include "test_support.h"
#include "tpfp/arch_map.h"
#include "tpfp/errors.h"
#include "tpfp/synth.h"

using namespace tpfp;
using tpfp_test::TempDir;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorKind::Usage;
}

TensorData filled(std::string name, std::uint64_t rows, std::uint64_t cols) {
    std::vector<double> v(rows * cols);
    std::mt19937_64 rng(std::hash<std::string>{}(name));
    std::normal_distribution<double> d(0.0, 0.02);
    for (auto& x : v) x = d(rng);
    return {std::move(name), DType::F32, {rows, cols}, std::move(v)};
}

ModelConfig small_config(std::size_t layers, std::size_t hidden = 16, std::size_t heads = 4, std::size_t kv = 4) {
    ModelConfig cfg;
    cfg.model_id = "m";
    cfg.num_layers = layers;
    cfg.hidden_size = hidden;
    cfg.num_heads = heads;
    cfg.num_kv_heads = kv;
    cfg.head_dim = hidden / heads;
    return cfg;
}

const KindSet kAll = parse_kind_list("all");
const KindSet kAttn = parse_kind_list("attn");

}  // namespace

TEST(KindList, ParsesAliasesAndRejectsUnknown) {
    EXPECT_EQ(parse_kind_list("attn").size(), 4u);
    EXPECT_EQ(parse_kind_list("ffn"), (KindSet{ProjectionKind::Gate, ProjectionKind::Up, ProjectionKind::Down}));
    EXPECT_EQ(parse_kind_list("all").size(), 7u);
    EXPECT_EQ(parse_kind_list("q, k"), (KindSet{ProjectionKind::Q, ProjectionKind::K}));
    EXPECT_EQ(kind_of([] { parse_kind_list("q,x"); }), ErrorKind::Usage);
    EXPECT_EQ(to_string(ProjectionKind::Gate), "gate");
    EXPECT_TRUE(is_attention(ProjectionKind::O));
    EXPECT_FALSE(is_attention(ProjectionKind::Down));
}

TEST(ConfigParse, LlamaStyle) {
    const auto cfg = parse_config(R"({"_name_or_path":"org/llama","model_type":"llama","num_hidden_layers":32,
        "hidden_size":4096,"num_attention_heads":32,"num_key_value_heads":8})",
                                  "fallback", nullptr);
    EXPECT_EQ(cfg.model_id, "org/llama");
    EXPECT_EQ(cfg.num_layers, 32u);
    EXPECT_EQ(cfg.hidden_size, 4096u);
    EXPECT_EQ(cfg.num_heads, 32u);
    EXPECT_EQ(cfg.num_kv_heads, 8u);
    EXPECT_EQ(cfg.head_dim, 128u);
    EXPECT_EQ(cfg.num_experts, 0u);
    EXPECT_EQ(cfg.architecture_tag, "llama");
}

TEST(ConfigParse, GptStyleAliasesAndDefaults) {
    const auto cfg = parse_config(R"({"n_layer":6,"n_embd":64,"n_head":8})", "dir-name", nullptr);
    EXPECT_EQ(cfg.model_id, "dir-name");
    EXPECT_EQ(cfg.num_layers, 6u);
    EXPECT_EQ(cfg.num_kv_heads, 8u);
    EXPECT_EQ(cfg.head_dim, 8u);
}

TEST(ConfigParse, TextConfigAndExperts) {
    const auto cfg = parse_config(R"({"model_type":"wrapper","text_config":{"num_hidden_layers":4,"hidden_size":32,
        "num_attention_heads":4,"head_dim":16,"num_local_experts":8}})",
                                  "x", nullptr);
    EXPECT_EQ(cfg.num_layers, 4u);
    EXPECT_EQ(cfg.head_dim, 16u);
    EXPECT_EQ(cfg.num_experts, 8u);
}

TEST(ConfigParse, Errors) {
    EXPECT_EQ(kind_of([] { parse_config(R"({"hidden_size":8,"num_attention_heads":2})", "x", nullptr); }),
              ErrorKind::ConfigFieldMissing);
    EXPECT_EQ(kind_of([] {
                  parse_config(R"({"num_hidden_layers":2,"hidden_size":8,"num_attention_heads":4,
                      "num_key_value_heads":3})",
                               "x", nullptr);
              }),
              ErrorKind::ConfigFieldMissing);
    EXPECT_EQ(kind_of([] { parse_config("[1,2]", "x", nullptr); }), ErrorKind::ConfigMissing);
}

TEST(ConfigLoad, MissingFile) {
    TempDir dir;
    EXPECT_EQ(kind_of([&] { load_config(dir.path()); }), ErrorKind::ConfigMissing);
}

TEST(ConfigLoad, InfersLayerCountWithWarning) {
    TempDir dir;
    SynthSpec spec;
    spec.num_layers = 5;
    spec.config_layer_count = false;
    write_synthetic_checkpoint(spec, dir.path());
    const auto cfg = load_config(dir.path());
    EXPECT_EQ(cfg.num_layers, 5u);
    ASSERT_EQ(cfg.warnings.size(), 1u);
    EXPECT_NE(cfg.warnings[0].find("inferred 5"), std::string::npos);
}

TEST(RuleMatching, LayerAndExpertSlots) {
    const auto& rules = RuleTable::builtin();
    auto m = rules.match("model.layers.17.self_attn.k_proj.weight");
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0].layer, 17u);
    EXPECT_FALSE(m[0].expert);
    m = rules.match("model.layers.3.mlp.experts.12.down_proj.weight");
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0].layer, 3u);
    EXPECT_EQ(*m[0].expert, 12u);
    EXPECT_TRUE(rules.match("model.layers.3.self_attn.q_proj.bias").empty());
    EXPECT_TRUE(rules.match("model.layers.x.self_attn.q_proj.weight").empty());
    EXPECT_TRUE(rules.match("model.embed_tokens.weight").empty());
}

TEST(Resolve, DenseLlama) {
    TempDir dir;
    SynthSpec spec;
    spec.num_layers = 3;
    write_synthetic_checkpoint(spec, dir.path());
    const auto ckpt = open_checkpoint(dir.path());
    const auto cfg = load_config(dir.path());
    const auto map = resolve_layers(ckpt, cfg, kAll);
    EXPECT_EQ(map.num_layers, 3u);
    EXPECT_EQ(map.entries.size(), 3u * 7u);
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& q = map.at(l, ProjectionKind::Q);
        ASSERT_EQ(q.size(), 1u);
        EXPECT_EQ(q[0].name, fmt::format("model.layers.{}.self_attn.q_proj.weight", l));
        EXPECT_FALSE(q[0].rows);
        EXPECT_EQ(map.at(l, ProjectionKind::Down)[0].name, fmt::format("model.layers.{}.mlp.down_proj.weight", l));
    }
}

TEST(Resolve, FusedQkvWithGqaSplitsRows) {
    TempDir dir;
    SynthSpec spec;
    spec.num_layers = 2;
    spec.hidden_size = 64;
    spec.num_heads = 8;
    spec.num_kv_heads = 2;
    spec.fused_qkv = true;
    spec.fused_gate_up = true;
    write_synthetic_checkpoint(spec, dir.path());
    const auto ckpt = open_checkpoint(dir.path());
    const auto cfg = load_config(dir.path());
    const auto map = resolve_layers(ckpt, cfg, kAll);
    const std::uint64_t d = 8;
    const auto& q = map.at(1, ProjectionKind::Q)[0];
    const auto& k = map.at(1, ProjectionKind::K)[0];
    const auto& v = map.at(1, ProjectionKind::V)[0];
    EXPECT_EQ(q.name, "model.layers.1.self_attn.qkv_proj.weight");
    EXPECT_EQ(*q.rows, (RowRange{0, 8 * d}));
    EXPECT_EQ(*k.rows, (RowRange{8 * d, 10 * d}));
    EXPECT_EQ(*v.rows, (RowRange{10 * d, 12 * d}));
    EXPECT_FALSE(map.at(1, ProjectionKind::O)[0].rows);
    EXPECT_EQ(*map.at(0, ProjectionKind::Gate)[0].rows, (RowRange{0, 128}));
    EXPECT_EQ(*map.at(0, ProjectionKind::Up)[0].rows, (RowRange{128, 256}));
}

TEST(Resolve, MoeExpertListsAndSharedExpert) {
    TempDir dir;
    SynthSpec spec;
    spec.num_layers = 2;
    spec.num_experts = 8;
    spec.shared_expert = true;
    spec.intermediate_size = 32;
    write_synthetic_checkpoint(spec, dir.path());
    const auto ckpt = open_checkpoint(dir.path());
    const auto cfg = load_config(dir.path());
    EXPECT_EQ(cfg.num_experts, 8u);
    const auto map = resolve_layers(ckpt, cfg, kAll);
    for (auto kind : {ProjectionKind::Gate, ProjectionKind::Up, ProjectionKind::Down}) {
        const auto& refs = map.at(1, kind);
        ASSERT_EQ(refs.size(), 9u);
        for (std::size_t e = 0; e < 8; ++e) EXPECT_EQ(*refs[e].expert, e);
        EXPECT_NE(refs.back().name.find("shared_expert"), std::string::npos);
        EXPECT_FALSE(refs.back().expert);
    }
    // the router weight is not a projection
    for (const auto& [key, refs] : map.entries) {
        for (const auto& r : refs) EXPECT_EQ(r.name.find("mlp.gate.weight"), std::string::npos);
    }
}

TEST(Resolve, MixtralNames) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 2; ++l) {
        for (int e = 0; e < 4; ++e) {
            ts.push_back(filled(fmt::format("model.layers.{}.block_sparse_moe.experts.{}.w1.weight", l, e), 24, 16));
            ts.push_back(filled(fmt::format("model.layers.{}.block_sparse_moe.experts.{}.w3.weight", l, e), 24, 16));
            ts.push_back(filled(fmt::format("model.layers.{}.block_sparse_moe.experts.{}.w2.weight", l, e), 16, 24));
        }
    }
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    auto cfg = small_config(2);
    cfg.num_experts = 4;
    const auto map = resolve_layers(ckpt, cfg, parse_kind_list("ffn"));
    EXPECT_EQ(map.at(1, ProjectionKind::Gate).size(), 4u);
    EXPECT_EQ(map.at(1, ProjectionKind::Up)[2].name, "model.layers.1.block_sparse_moe.experts.2.w3.weight");
    EXPECT_EQ(map.at(0, ProjectionKind::Down)[3].name, "model.layers.0.block_sparse_moe.experts.3.w2.weight");
}

TEST(Resolve, GptjNames) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 2; ++l) {
        for (auto p : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
            ts.push_back(filled(fmt::format("transformer.h.{}.attn.{}.weight", l, p), 16, 16));
        }
        ts.push_back(filled(fmt::format("transformer.h.{}.mlp.fc_in.weight", l), 64, 16));
        ts.push_back(filled(fmt::format("transformer.h.{}.mlp.fc_out.weight", l), 16, 64));
    }
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    const auto map = resolve_layers(ckpt, small_config(2), kAttn);
    EXPECT_EQ(map.at(1, ProjectionKind::O)[0].name, "transformer.h.1.attn.out_proj.weight");
    const auto up = resolve_layers(ckpt, small_config(2), KindSet{ProjectionKind::Up});
    EXPECT_EQ(up.at(0, ProjectionKind::Up)[0].name, "transformer.h.0.mlp.fc_in.weight");
    EXPECT_EQ(kind_of([&] { resolve_layers(ckpt, small_config(2), KindSet{ProjectionKind::Gate}); }),
              ErrorKind::UnresolvedLayer);
}

TEST(Resolve, MissingLayerIsUnresolved) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l : {0, 1, 3}) ts.push_back(filled(fmt::format("model.layers.{}.self_attn.q_proj.weight", l), 16, 16));
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    try {
        resolve_layers(ckpt, small_config(4), KindSet{ProjectionKind::Q});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::UnresolvedLayer);
        EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
    }
}

TEST(Resolve, LayerBeyondConfigIsContradiction) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 3; ++l) ts.push_back(filled(fmt::format("model.layers.{}.self_attn.q_proj.weight", l), 16, 16));
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    EXPECT_EQ(kind_of([&] { resolve_layers(ckpt, small_config(2), KindSet{ProjectionKind::Q}); }),
              ErrorKind::ShapeContradiction);
}

TEST(Resolve, HeadShapeContradiction) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 2; ++l) ts.push_back(filled(fmt::format("model.layers.{}.self_attn.k_proj.weight", l), 16, 16));
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    // two kv heads of width 4 would need 8 rows
    EXPECT_EQ(kind_of([&] { resolve_layers(ckpt, small_config(2, 16, 4, 2), KindSet{ProjectionKind::K}); }),
              ErrorKind::ShapeContradiction);
    EXPECT_NO_THROW(resolve_layers(ckpt, small_config(2, 16, 4, 4), KindSet{ProjectionKind::K}));
}

TEST(Resolve, AmbiguousRules) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 2; ++l) ts.push_back(filled(fmt::format("blk.{}.wq.weight", l), 16, 16));
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    const auto rules = RuleTable::from_json(R"({"rules":[
        {"pattern":"blk.{layer}.wq.weight","kind":"q"},
        {"pattern":"blk.{layer}.wq.weight","kind":"k"}]})");
    EXPECT_EQ(kind_of([&] { resolve_layers(ckpt, small_config(2), kAttn, rules); }), ErrorKind::AmbiguousPattern);
}

TEST(Resolve, CustomMappingFile) {
    TempDir dir;
    std::vector<TensorData> ts;
    for (int l = 0; l < 3; ++l) {
        for (auto p : {"wq", "wk", "wv", "wo"}) ts.push_back(filled(fmt::format("blocks.{}.attn.{}", l, p), 16, 16));
    }
    write_safetensors(dir / "model.safetensors", ts);
    tpfp_test::spit(dir / "rules.json", R"({"rules":[
        {"family":"custom","pattern":"blocks.{layer}.attn.wq","kind":"q"},
        {"family":"custom","pattern":"blocks.{layer}.attn.wk","kind":"k"},
        {"family":"custom","pattern":"blocks.{layer}.attn.wv","kind":"v"},
        {"family":"custom","pattern":"blocks.{layer}.attn.wo","kind":"o"}]})");
    const auto ckpt = open_checkpoint(dir.path());
    EXPECT_EQ(kind_of([&] { resolve_layers(ckpt, small_config(3), kAttn); }), ErrorKind::UnresolvedLayer);
    const auto rules = RuleTable::load(dir / "rules.json");
    const auto map = resolve_layers(ckpt, small_config(3), kAttn, rules);
    EXPECT_EQ(map.at(2, ProjectionKind::V)[0].name, "blocks.2.attn.wv");
}

TEST(Resolve, RuleFileValidation) {
    EXPECT_EQ(kind_of([] { RuleTable::from_json("{"); }), ErrorKind::RuleFileInvalid);
    EXPECT_EQ(kind_of([] { RuleTable::from_json(R"({"rules":[]})"); }), ErrorKind::RuleFileInvalid);
    EXPECT_EQ(kind_of([] { RuleTable::from_json(R"({"rules":[{"pattern":"a.{layer}.b","kind":"zz"}]})"); }),
              ErrorKind::RuleFileInvalid);
    EXPECT_EQ(kind_of([] { RuleTable::from_json(R"({"rules":[{"pattern":"no-slot","kind":"q"}]})"); }),
              ErrorKind::RuleFileInvalid);
}

TEST(Resolve, BuiltinRulesParse) {
    const auto table = RuleTable::from_json(builtin_rules_json());
    EXPECT_EQ(table.rules().size(), RuleTable::builtin().rules().size());
    EXPECT_GE(table.rules().size(), 20u);
}
