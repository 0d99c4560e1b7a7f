// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/arch_map.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "json.hpp"
#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Families: Llama / Qwen2 / Qwen3 / Mistral / OLMoE / Pangu (separate
// projections), Qwen-MoE and DeepSeek shared experts, Mixtral w1/w2/w3,
// Phi-3 fused qkv and gate_up, GPT-J style attn.*_proj.
constexpr std::string_view kBuiltinRules = R"json({
  "rules": [
    {"family": "llama", "pattern": "model.layers.{layer}.self_attn.q_proj.weight", "kind": "q"},
    {"family": "llama", "pattern": "model.layers.{layer}.self_attn.k_proj.weight", "kind": "k"},
    {"family": "llama", "pattern": "model.layers.{layer}.self_attn.v_proj.weight", "kind": "v"},
    {"family": "llama", "pattern": "model.layers.{layer}.self_attn.o_proj.weight", "kind": "o"},
    {"family": "llama", "pattern": "model.layers.{layer}.mlp.gate_proj.weight", "kind": "gate"},
    {"family": "llama", "pattern": "model.layers.{layer}.mlp.up_proj.weight", "kind": "up"},
    {"family": "llama", "pattern": "model.layers.{layer}.mlp.down_proj.weight", "kind": "down"},
    {"family": "moe", "pattern": "model.layers.{layer}.mlp.experts.{expert}.gate_proj.weight", "kind": "gate"},
    {"family": "moe", "pattern": "model.layers.{layer}.mlp.experts.{expert}.up_proj.weight", "kind": "up"},
    {"family": "moe", "pattern": "model.layers.{layer}.mlp.experts.{expert}.down_proj.weight", "kind": "down"},
    {"family": "qwen-moe", "pattern": "model.layers.{layer}.mlp.shared_expert.gate_proj.weight", "kind": "gate"},
    {"family": "qwen-moe", "pattern": "model.layers.{layer}.mlp.shared_expert.up_proj.weight", "kind": "up"},
    {"family": "qwen-moe", "pattern": "model.layers.{layer}.mlp.shared_expert.down_proj.weight", "kind": "down"},
    {"family": "deepseek", "pattern": "model.layers.{layer}.mlp.shared_experts.gate_proj.weight", "kind": "gate"},
    {"family": "deepseek", "pattern": "model.layers.{layer}.mlp.shared_experts.up_proj.weight", "kind": "up"},
    {"family": "deepseek", "pattern": "model.layers.{layer}.mlp.shared_experts.down_proj.weight", "kind": "down"},
    {"family": "mixtral", "pattern": "model.layers.{layer}.block_sparse_moe.experts.{expert}.w1.weight", "kind": "gate"},
    {"family": "mixtral", "pattern": "model.layers.{layer}.block_sparse_moe.experts.{expert}.w3.weight", "kind": "up"},
    {"family": "mixtral", "pattern": "model.layers.{layer}.block_sparse_moe.experts.{expert}.w2.weight", "kind": "down"},
    {"family": "phi3", "pattern": "model.layers.{layer}.self_attn.qkv_proj.weight", "fused_order": ["q", "k", "v"]},
    {"family": "phi3", "pattern": "model.layers.{layer}.mlp.gate_up_proj.weight", "fused_order": ["gate", "up"]},
    {"family": "gptj", "pattern": "transformer.h.{layer}.attn.q_proj.weight", "kind": "q"},
    {"family": "gptj", "pattern": "transformer.h.{layer}.attn.k_proj.weight", "kind": "k"},
    {"family": "gptj", "pattern": "transformer.h.{layer}.attn.v_proj.weight", "kind": "v"},
    {"family": "gptj", "pattern": "transformer.h.{layer}.attn.out_proj.weight", "kind": "o"},
    {"family": "gptj", "pattern": "transformer.h.{layer}.mlp.fc_in.weight", "kind": "up"},
    {"family": "gptj", "pattern": "transformer.h.{layer}.mlp.fc_out.weight", "kind": "down"}
  ]
})json";

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::optional<std::size_t> json_size(const json& doc, std::initializer_list<const char*> keys) {
    for (const char* k : keys) {
        if (doc.contains(k) && doc[k].is_number_integer() && doc[k].get<std::int64_t>() >= 0) {
            return doc[k].get<std::size_t>();
        }
    }
    return std::nullopt;
}

// Largest N in "...layers.N." / "...h.N." / "...blocks.N." plus one.
std::optional<std::size_t> infer_layer_count(const CheckpointHandle& ckpt) {
    std::optional<std::size_t> max_layer;
    for (const auto& [name, _] : ckpt.tensors()) {
        for (std::string_view marker : {"layers.", "h.", "blocks."}) {
            std::size_t pos = 0;
            while ((pos = name.find(marker, pos)) != std::string::npos) {
                const bool boundary = pos == 0 || name[pos - 1] == '.';
                std::size_t p = pos + marker.size();
                std::size_t value = 0;
                auto [ptr, ec] = std::from_chars(name.data() + p, name.data() + name.size(), value);
                const std::size_t end = static_cast<std::size_t>(ptr - name.data());
                if (boundary && ec == std::errc() && end > p && end < name.size() && name[end] == '.') {
                    max_layer = std::max(max_layer.value_or(0), value);
                }
                pos = p;
            }
        }
    }
    if (!max_layer) return std::nullopt;
    return *max_layer + 1;
}

std::optional<std::size_t> infer_hidden_size(const CheckpointHandle& ckpt) {
    for (const auto& [name, t] : ckpt.tensors()) {
        if (t.shape.size() == 2 && (name.ends_with("embed_tokens.weight") || name.ends_with("wte.weight"))) {
            return t.shape[1];
        }
    }
    for (const auto& [name, t] : ckpt.tensors()) {
        if (t.shape.size() == 2 && name.ends_with("q_proj.weight")) return t.shape[1];
    }
    return std::nullopt;
}

std::string join_layers(const std::vector<std::size_t>& layers) {
    return fmt::format("{}", fmt::join(layers, ", "));
}

}  // namespace

std::string_view to_string(ProjectionKind kind) {
    switch (kind) {
        case ProjectionKind::Q: return "q";
        case ProjectionKind::K: return "k";
        case ProjectionKind::V: return "v";
        case ProjectionKind::O: return "o";
        case ProjectionKind::Gate: return "gate";
        case ProjectionKind::Up: return "up";
        case ProjectionKind::Down: return "down";
    }
    return "?";
}

std::optional<ProjectionKind> parse_kind(std::string_view text) {
    const auto s = lower(text);
    if (s == "q") return ProjectionKind::Q;
    if (s == "k") return ProjectionKind::K;
    if (s == "v") return ProjectionKind::V;
    if (s == "o") return ProjectionKind::O;
    if (s == "gate") return ProjectionKind::Gate;
    if (s == "up") return ProjectionKind::Up;
    if (s == "down") return ProjectionKind::Down;
    return std::nullopt;
}

KindSet parse_kind_list(std::string_view text) {
    KindSet out;
    std::stringstream ss{std::string(text)};
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
                   item.end());
        if (item.empty()) continue;
        const auto l = lower(item);
        if (l == "attn" || l == "all") out.insert(kAttentionKinds.begin(), kAttentionKinds.end());
        if (l == "ffn" || l == "all") out.insert(kFfnKinds.begin(), kFfnKinds.end());
        if (l == "attn" || l == "ffn" || l == "all") continue;
        auto k = parse_kind(item);
        if (!k) throw Error(ErrorKind::Usage, fmt::format("unknown projection kind '{}'", item));
        out.insert(*k);
    }
    if (out.empty()) throw Error(ErrorKind::Usage, "kind list is empty");
    return out;
}

bool is_attention(ProjectionKind kind) {
    return kind == ProjectionKind::Q || kind == ProjectionKind::K || kind == ProjectionKind::V ||
           kind == ProjectionKind::O;
}

ModelConfig parse_config(std::string_view json_text, std::string default_model_id,
                         const CheckpointHandle* ckpt) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::ConfigMissing, fmt::format("config is not valid JSON: {}", e.what()));
    }
    if (!root.is_object()) throw Error(ErrorKind::ConfigMissing, "config is not a JSON object");
    // multimodal wrappers keep the language model under text_config
    const json& doc = (!json_size(root, {"num_hidden_layers", "n_layer", "num_layers", "n_layers"}) &&
                       root.contains("text_config") && root["text_config"].is_object())
                          ? root["text_config"]
                          : root;

    ModelConfig cfg;
    cfg.model_id = std::move(default_model_id);
    if (root.contains("_name_or_path") && root["_name_or_path"].is_string() &&
        !root["_name_or_path"].get<std::string>().empty()) {
        cfg.model_id = root["_name_or_path"].get<std::string>();
    }
    if (root.contains("model_type") && root["model_type"].is_string()) {
        cfg.architecture_tag = root["model_type"].get<std::string>();
    } else if (root.contains("architectures") && root["architectures"].is_array() &&
               !root["architectures"].empty() && root["architectures"][0].is_string()) {
        cfg.architecture_tag = root["architectures"][0].get<std::string>();
    }

    if (auto l = json_size(doc, {"num_hidden_layers", "n_layer", "num_layers", "n_layers"}); l && *l > 0) {
        cfg.num_layers = *l;
    } else if (ckpt) {
        auto inferred = infer_layer_count(*ckpt);
        if (!inferred) {
            throw Error(ErrorKind::ConfigFieldMissing,
                        "config has no layer count and none can be inferred from tensor names");
        }
        cfg.num_layers = *inferred;
        cfg.warnings.push_back(
            fmt::format("layer count missing from config; inferred {} from tensor names", cfg.num_layers));
    } else {
        throw Error(ErrorKind::ConfigFieldMissing, "config has no layer count");
    }

    const auto heads = json_size(doc, {"num_attention_heads", "n_head", "n_heads"});
    if (!heads || *heads == 0) throw Error(ErrorKind::ConfigFieldMissing, "config has no attention head count");
    cfg.num_heads = *heads;
    cfg.num_kv_heads = json_size(doc, {"num_key_value_heads", "num_kv_heads", "n_kv_heads",
                                       "multi_query_group_num"})
                           .value_or(cfg.num_heads);
    if (cfg.num_kv_heads == 0 || cfg.num_heads % cfg.num_kv_heads != 0) {
        throw Error(ErrorKind::ConfigFieldMissing,
                    fmt::format("num_key_value_heads {} does not divide num_attention_heads {}",
                                cfg.num_kv_heads, cfg.num_heads));
    }

    if (auto h = json_size(doc, {"hidden_size", "n_embd", "d_model", "dim"}); h && *h > 0) {
        cfg.hidden_size = *h;
    } else if (auto inferred = ckpt ? infer_hidden_size(*ckpt) : std::nullopt) {
        cfg.hidden_size = *inferred;
        cfg.warnings.push_back(
            fmt::format("hidden size missing from config; inferred {} from tensor shapes", cfg.hidden_size));
    } else {
        throw Error(ErrorKind::ConfigFieldMissing, "config has no hidden size");
    }

    if (auto d = json_size(doc, {"head_dim"}); d && *d > 0) {
        cfg.head_dim = *d;
    } else {
        if (cfg.hidden_size % cfg.num_heads != 0) {
            throw Error(ErrorKind::ConfigFieldMissing,
                        fmt::format("head_dim absent and hidden size {} is not divisible by {} heads",
                                    cfg.hidden_size, cfg.num_heads));
        }
        cfg.head_dim = cfg.hidden_size / cfg.num_heads;
    }
    cfg.num_experts =
        json_size(doc, {"num_experts", "num_local_experts", "n_routed_experts", "moe_num_experts"}).value_or(0);
    return cfg;
}

ModelConfig load_config(const fs::path& ckpt_dir) {
    const fs::path path = ckpt_dir / "config.json";
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::ConfigMissing, fmt::format("no readable config at '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();

    // Only open the checkpoint when a fallback is actually needed.
    try {
        return parse_config(text, ckpt_dir.filename().string(), nullptr);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::ConfigFieldMissing) throw;
    }
    const CheckpointHandle ckpt = open_checkpoint(ckpt_dir);
    return parse_config(text, ckpt_dir.filename().string(), &ckpt);
}

const std::vector<TensorRef>& LayerTensorMap::at(std::size_t layer, ProjectionKind kind) const {
    auto it = entries.find({layer, kind});
    if (it == entries.end()) {
        throw Error(ErrorKind::UnresolvedLayer,
                    fmt::format("no tensors resolved for layer {} kind {}", layer, to_string(kind)));
    }
    return it->second;
}

RuleTable::RuleTable(std::vector<NameRule> rules) : rules_(std::move(rules)) {
    for (const auto& rule : rules_) {
        if (rule.kinds.empty()) {
            throw Error(ErrorKind::RuleFileInvalid, fmt::format("rule '{}' has no kind", rule.pattern));
        }
        std::vector<Segment> segs;
        Segment cur;
        int layer_slots = 0;
        int expert_slots = 0;
        std::size_t i = 0;
        const auto& p = rule.pattern;
        while (i < p.size()) {
            if (p[i] == '{') {
                const auto close = p.find('}', i);
                if (close == std::string::npos) {
                    throw Error(ErrorKind::RuleFileInvalid, fmt::format("unclosed '{{' in '{}'", p));
                }
                const auto slot = p.substr(i + 1, close - i - 1);
                if (slot == "layer") {
                    cur.slot = Segment::Slot::Layer;
                    ++layer_slots;
                } else if (slot == "expert") {
                    cur.slot = Segment::Slot::Expert;
                    ++expert_slots;
                } else {
                    throw Error(ErrorKind::RuleFileInvalid,
                                fmt::format("unknown placeholder '{{{}}}' in '{}'", slot, p));
                }
                segs.push_back(std::move(cur));
                cur = Segment{};
                i = close + 1;
                if (i < p.size() && (std::isdigit(static_cast<unsigned char>(p[i])) || p[i] == '{')) {
                    throw Error(ErrorKind::RuleFileInvalid,
                                fmt::format("placeholder in '{}' must be followed by a non-digit literal", p));
                }
            } else {
                cur.literal.push_back(p[i++]);
            }
        }
        if (!cur.literal.empty()) segs.push_back(std::move(cur));
        if (layer_slots != 1 || expert_slots > 1) {
            throw Error(ErrorKind::RuleFileInvalid,
                        fmt::format("pattern '{}' needs exactly one {{layer}} and at most one {{expert}}", p));
        }
        std::set<ProjectionKind> seen(rule.kinds.begin(), rule.kinds.end());
        if (seen.size() != rule.kinds.size()) {
            throw Error(ErrorKind::RuleFileInvalid, fmt::format("fused_order of '{}' repeats a kind", p));
        }
        compiled_.push_back(std::move(segs));
    }
}

std::vector<RuleTable::Match> RuleTable::match(std::string_view name) const {
    std::vector<Match> out;
    for (std::size_t r = 0; r < compiled_.size(); ++r) {
        Match m;
        m.rule = r;
        std::size_t pos = 0;
        bool ok = true;
        for (const auto& seg : compiled_[r]) {
            if (name.substr(pos, seg.literal.size()) != seg.literal) {
                ok = false;
                break;
            }
            pos += seg.literal.size();
            if (seg.slot == Segment::Slot::None) continue;
            std::size_t value = 0;
            auto [ptr, ec] = std::from_chars(name.data() + pos, name.data() + name.size(), value);
            if (ec != std::errc() || ptr == name.data() + pos) {
                ok = false;
                break;
            }
            pos = static_cast<std::size_t>(ptr - name.data());
            if (seg.slot == Segment::Slot::Layer) m.layer = value;
            else m.expert = value;
        }
        if (ok && pos == name.size()) out.push_back(m);
    }
    return out;
}

const RuleTable& RuleTable::builtin() {
    static const RuleTable table = from_json(kBuiltinRules);
    return table;
}

RuleTable RuleTable::from_json(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::RuleFileInvalid, fmt::format("mapping file is not valid JSON: {}", e.what()));
    }
    const json* list = &doc;
    if (doc.is_object() && doc.contains("rules")) list = &doc["rules"];
    if (!list->is_array() || list->empty()) {
        throw Error(ErrorKind::RuleFileInvalid, "mapping file needs a non-empty \"rules\" array");
    }
    std::vector<NameRule> rules;
    for (const auto& item : *list) {
        if (!item.is_object() || !item.contains("pattern") || !item["pattern"].is_string()) {
            throw Error(ErrorKind::RuleFileInvalid, "every rule needs a string \"pattern\"");
        }
        NameRule rule;
        rule.pattern = item["pattern"].get<std::string>();
        rule.family = item.value("family", std::string{});
        auto kind_of = [&](const json& v) {
            if (!v.is_string()) throw Error(ErrorKind::RuleFileInvalid, "kind must be a string");
            auto k = parse_kind(v.get<std::string>());
            if (!k) {
                throw Error(ErrorKind::RuleFileInvalid,
                            fmt::format("unknown kind '{}' in rule '{}'", v.get<std::string>(), rule.pattern));
            }
            return *k;
        };
        const bool has_kind = item.contains("kind");
        const bool has_fused = item.contains("fused_order");
        if (has_kind == has_fused) {
            throw Error(ErrorKind::RuleFileInvalid,
                        fmt::format("rule '{}' needs exactly one of \"kind\" or \"fused_order\"", rule.pattern));
        }
        if (has_kind) {
            rule.kinds.push_back(kind_of(item["kind"]));
        } else {
            if (!item["fused_order"].is_array() || item["fused_order"].size() < 2) {
                throw Error(ErrorKind::RuleFileInvalid,
                            fmt::format("fused_order of '{}' must list at least two kinds", rule.pattern));
            }
            for (const auto& k : item["fused_order"]) rule.kinds.push_back(kind_of(k));
        }
        rules.push_back(std::move(rule));
    }
    return RuleTable(std::move(rules));
}

RuleTable RuleTable::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, fmt::format("cannot read mapping file '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string_view builtin_rules_json() { return kBuiltinRules; }

LayerTensorMap resolve_layers(const CheckpointHandle& ckpt, const ModelConfig& cfg, const KindSet& kinds,
                              const RuleTable& rules) {
    if (kinds.empty()) throw Error(ErrorKind::Usage, "no projection kinds requested");
    const std::size_t q_rows = cfg.num_heads * cfg.head_dim;
    const std::size_t kv_rows = cfg.num_kv_heads * cfg.head_dim;

    struct Found {
        TensorRef ref;
        std::string rule;
    };
    std::map<std::pair<std::size_t, ProjectionKind>, std::vector<Found>> found;

    for (const auto& [name, t] : ckpt.tensors()) {
        const auto matches = rules.match(name);
        if (matches.empty()) continue;
        if (matches.size() > 1) {
            throw Error(ErrorKind::AmbiguousPattern,
                        fmt::format("tensor '{}' matches rules '{}' and '{}'", name,
                                    rules.rules()[matches[0].rule].pattern,
                                    rules.rules()[matches[1].rule].pattern));
        }
        const auto& m = matches.front();
        const auto& rule = rules.rules()[m.rule];
        const bool wanted = std::any_of(rule.kinds.begin(), rule.kinds.end(),
                                        [&](ProjectionKind k) { return kinds.contains(k); });
        if (!wanted) continue;
        if (t.shape.size() != 2) {
            throw Error(ErrorKind::ShapeContradiction,
                        fmt::format("tensor '{}' is {}-D; only matrices are fingerprinted", name, t.shape.size()));
        }
        if (m.layer >= cfg.num_layers) {
            throw Error(ErrorKind::ShapeContradiction,
                        fmt::format("tensor '{}' names layer {} but the config has {} layers", name, m.layer,
                                    cfg.num_layers));
        }
        const std::uint64_t rows = t.shape[0];
        const std::uint64_t cols = t.shape[1];

        if (rule.kinds.size() == 1) {
            const auto kind = rule.kinds.front();
            std::optional<std::uint64_t> want_rows;
            if (kind == ProjectionKind::Q) want_rows = q_rows;
            if (kind == ProjectionKind::K || kind == ProjectionKind::V) want_rows = kv_rows;
            if (want_rows && rows != *want_rows) {
                throw Error(ErrorKind::ShapeContradiction,
                            fmt::format("'{}' has {} rows; config implies {}", name, rows, *want_rows));
            }
            if (kind == ProjectionKind::O && cols != q_rows) {
                throw Error(ErrorKind::ShapeContradiction,
                            fmt::format("'{}' has {} columns; config implies {}", name, cols, q_rows));
            }
            found[{m.layer, kind}].push_back({TensorRef{name, std::nullopt, m.expert}, rule.pattern});
            continue;
        }

        // Fused: attention blocks take their head-derived sizes, FFN blocks
        // share the remaining rows equally.
        std::uint64_t attn_total = 0;
        std::size_t ffn_count = 0;
        for (auto k : rule.kinds) {
            if (k == ProjectionKind::Q) attn_total += q_rows;
            else if (k == ProjectionKind::K || k == ProjectionKind::V) attn_total += kv_rows;
            else if (k == ProjectionKind::O) {
                throw Error(ErrorKind::RuleFileInvalid,
                            fmt::format("rule '{}' fuses the output projection, which is not row-fused",
                                        rule.pattern));
            } else ++ffn_count;
        }
        if (attn_total > rows || (ffn_count > 0 && (rows - attn_total) % ffn_count != 0) ||
            (ffn_count == 0 && attn_total != rows)) {
            throw Error(ErrorKind::ShapeContradiction,
                        fmt::format("fused tensor '{}' has {} rows, which cannot split into {}", name, rows,
                                    rule.pattern));
        }
        const std::uint64_t ffn_rows = ffn_count ? (rows - attn_total) / ffn_count : 0;
        std::uint64_t begin = 0;
        for (auto k : rule.kinds) {
            const std::uint64_t n = k == ProjectionKind::Q   ? q_rows
                                    : is_attention(k)        ? kv_rows
                                                             : ffn_rows;
            if (kinds.contains(k)) {
                found[{m.layer, k}].push_back({TensorRef{name, RowRange{begin, begin + n}, m.expert}, rule.pattern});
            }
            begin += n;
        }
    }

    LayerTensorMap out;
    out.num_layers = cfg.num_layers;
    std::map<ProjectionKind, std::vector<std::size_t>> missing;
    for (auto kind : kinds) {
        for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
            auto it = found.find({layer, kind});
            if (it == found.end()) {
                missing[kind].push_back(layer);
                continue;
            }
            auto& refs = it->second;
            std::vector<Found> experts;
            std::vector<Found> plain;
            for (auto& f : refs) (f.ref.expert ? experts : plain).push_back(std::move(f));
            std::sort(experts.begin(), experts.end(),
                      [](const Found& a, const Found& b) { return *a.ref.expert < *b.ref.expert; });

            const auto describe = [&](const std::vector<Found>& v) {
                std::vector<std::string> names;
                for (const auto& f : v) names.push_back(f.ref.name);
                return fmt::format("{}", fmt::join(names, ", "));
            };
            if (is_attention(kind) && (refs.size() != 1 || !experts.empty())) {
                std::vector<Found> all = plain;
                all.insert(all.end(), experts.begin(), experts.end());
                throw Error(ErrorKind::AmbiguousPattern,
                            fmt::format("layer {} kind {} resolves to several tensors: {}", layer,
                                        to_string(kind), describe(all)));
            }
            if (plain.size() > 1) {
                throw Error(ErrorKind::AmbiguousPattern,
                            fmt::format("layer {} kind {} resolves to several non-expert tensors: {}", layer,
                                        to_string(kind), describe(plain)));
            }
            if (!experts.empty()) {
                for (std::size_t e = 0; e < experts.size(); ++e) {
                    if (*experts[e].ref.expert != e) {
                        throw Error(ErrorKind::ShapeContradiction,
                                    fmt::format("layer {} kind {}: expert indices are not 0..{} ({})", layer,
                                                to_string(kind), experts.size() - 1, describe(experts)));
                    }
                }
                if (experts.size() != cfg.num_experts) {
                    throw Error(ErrorKind::ShapeContradiction,
                                fmt::format("layer {} kind {} has {} experts but the config declares {}",
                                            layer, to_string(kind), experts.size(), cfg.num_experts));
                }
            }
            auto& dst = out.entries[{layer, kind}];
            for (auto& f : experts) dst.push_back(std::move(f.ref));
            for (auto& f : plain) dst.push_back(std::move(f.ref));
        }
    }
    if (!missing.empty()) {
        std::vector<std::string> parts;
        for (const auto& [kind, layers] : missing) {
            parts.push_back(fmt::format("{}: layers {}", to_string(kind), join_layers(layers)));
        }
        throw Error(ErrorKind::UnresolvedLayer,
                    fmt::format("no tensor matched for {}", fmt::join(parts, "; ")));
    }
    return out;
}

}  // namespace tpfp
