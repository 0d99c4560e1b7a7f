// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpfp/fingerprint.h"
#include "tpfp/lineage.h"

namespace tpfp {

nlohmann::json report_to_json(const ComparisonReport& report);

// Machine formats are canonical: sorted keys, 17 significant digits.
std::string render_report_json(const ComparisonReport& report);
std::string render_report_csv(const ComparisonReport& report);
std::string render_report_text(const ComparisonReport& report);

std::string render_matrix_json(const CorrelationMatrix& matrix);
// Header row and first column carry model ids; empty cells stay empty.
std::string render_grid_csv(const std::vector<std::string>& model_ids, const Grid& grid);

// Long format: model_id,kind,layer,value. Throws DegenerateSequence when
// normalizing a constant sequence.
std::string render_curves_csv(std::span<const Fingerprint> fps, const KindSet& kinds, bool normalized);

std::string csv_field(const std::string& text);

}  // namespace tpfp
