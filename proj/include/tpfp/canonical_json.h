// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

namespace tpfp {

// 17 significant digits; round-trips every finite double exactly.
std::string format_double(double value);

// Sorted keys, doubles via format_double. indent < 0 gives the compact form.
std::string canonical_dump(const nlohmann::json& value, int indent = -1);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Writes to a sibling temporary and renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace tpfp
