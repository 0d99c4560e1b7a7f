// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/report.h"

#include <fmt/format.h>

#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"

namespace tpfp {

using nlohmann::json;

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json grid_json(const Grid& grid) {
    json rows = json::array();
    for (const auto& row : grid) {
        json r = json::array();
        for (const auto& cell : row) r.push_back(optional_number(cell));
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace

std::string csv_field(const std::string& text) {
    if (text.find_first_of(",\"\n\r") == std::string::npos) return text;
    std::string out = "\"";
    for (char c : text) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    return out + "\"";
}

json report_to_json(const ComparisonReport& report) {
    json per_kind = json::array();
    for (const auto& k : report.per_kind) {
        per_kind.push_back({{"kind", std::string(to_string(k.kind))}, {"r", k.r}, {"p_value", k.p_value}, {"n", k.n}});
    }
    return {
        {"model_a", report.model_a},
        {"model_b", report.model_b},
        {"layers_a", report.layers_a},
        {"layers_b", report.layers_b},
        {"interpolated_side", std::string(to_string(report.interpolated_side))},
        {"per_kind", std::move(per_kind)},
        {"aggregate", optional_number(report.aggregate)},
        {"verdict", std::string(to_string(report.verdict))},
        {"thresholds", {{"t_high", report.thresholds.high}, {"t_low", report.thresholds.low}}},
    };
}

std::string render_report_json(const ComparisonReport& report) {
    return canonical_dump(report_to_json(report), 2) + "\n";
}

std::string render_report_csv(const ComparisonReport& report) {
    std::string out = "model_a,model_b,kind,r,p_value,n,verdict\n";
    const auto a = csv_field(report.model_a);
    const auto b = csv_field(report.model_b);
    for (const auto& k : report.per_kind) {
        out += fmt::format("{},{},{},{},{},{},\n", a, b, to_string(k.kind), format_double(k.r),
                           format_double(k.p_value), k.n);
    }
    out += fmt::format("{},{},aggregate,{},,,{}\n", a, b,
                       report.aggregate ? format_double(*report.aggregate) : std::string{},
                       to_string(report.verdict));
    return out;
}

std::string render_report_text(const ComparisonReport& report) {
    std::string out;
    out += fmt::format("A: {} ({} layers)\nB: {} ({} layers)\n", report.model_a, report.layers_a, report.model_b,
                       report.layers_b);
    if (report.interpolated_side != InterpolatedSide::None) {
        out += fmt::format("interpolated: {} -> {} layers\n", to_string(report.interpolated_side),
                           std::max(report.layers_a, report.layers_b));
    }
    out += fmt::format("{:<6} {:>9} {:>12} {:>5}\n", "kind", "r", "p", "n");
    for (const auto& k : report.per_kind) {
        out += fmt::format("{:<6} {:>9.4f} {:>12.3e} {:>5}\n", to_string(k.kind), k.r, k.p_value, k.n);
    }
    if (report.aggregate) {
        out += fmt::format("aggregate (attention mean): {:.4f}\n", *report.aggregate);
    } else {
        out += "aggregate (attention mean): n/a (no attention kinds compared)\n";
    }
    out += fmt::format("verdict: {} (t_high {}, t_low {})\n", to_string(report.verdict), report.thresholds.high,
                       report.thresholds.low);
    return out;
}

std::string render_matrix_json(const CorrelationMatrix& matrix) {
    json kinds = json::object();
    for (const auto& [kind, grid] : matrix.per_kind) kinds[std::string(to_string(kind))] = grid_json(grid);
    json doc = {
        {"model_ids", matrix.model_ids},
        {"kinds", std::move(kinds)},
        {"overall", grid_json(matrix.overall)},
        {"errors", matrix.errors},
    };
    return canonical_dump(doc, 2) + "\n";
}

std::string render_grid_csv(const std::vector<std::string>& model_ids, const Grid& grid) {
    std::string out = "model_id";
    for (const auto& id : model_ids) out += "," + csv_field(id);
    out += "\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        out += csv_field(model_ids[i]);
        for (const auto& cell : grid[i]) out += "," + (cell ? format_double(*cell) : std::string{});
        out += "\n";
    }
    return out;
}

std::string render_curves_csv(std::span<const Fingerprint> fps, const KindSet& kinds, bool normalized) {
    std::string out = "model_id,kind,layer,value\n";
    for (const auto& fp : fps) {
        const auto id = csv_field(fp.model_id);
        for (auto kind : kinds) {
            auto it = fp.kinds.find(kind);
            if (it == fp.kinds.end()) {
                throw Error(ErrorKind::KindMissing,
                            fmt::format("fingerprint '{}' has no {} sequence", fp.model_id, to_string(kind)));
            }
            std::vector<double> values = it->second.values;
            if (normalized) {
                try {
                    values = normalize(it->second).values;
                } catch (const Error& e) {
                    throw e.with_context(fmt::format("model '{}'", fp.model_id));
                }
            }
            for (std::size_t l = 0; l < values.size(); ++l) {
                out += fmt::format("{},{},{},{}\n", id, to_string(kind), l, format_double(values[l]));
            }
        }
    }
    return out;
}

}  // namespace tpfp
