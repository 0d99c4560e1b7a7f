// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/manifest.h"

#include <chrono>
#include <ctime>
#include <fstream>

#include <fmt/format.h>

#include "json.hpp"
#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;

std::string render_manifest(const RunManifest& m) {
    nlohmann::json doc = {
        {"command", m.command},
        {"arguments", m.arguments},
        {"tool_version", m.tool_version},
        {"input_hashes", m.input_hashes},
        {"wall_time_seconds", m.wall_time_seconds},
        {"started_at", m.started_at},
        {"outputs", m.outputs},
    };
    return canonical_dump(doc, 2) + "\n";
}

fs::path manifest_path_for(const fs::path& output) {
    std::error_code ec;
    if (fs::is_directory(output, ec)) return output / "tpfp.manifest.json";
    fs::path p = output;
    p += ".manifest.json";
    return p;
}

std::map<std::string, std::string> checkpoint_input_hashes(const CheckpointHandle& ckpt) {
    std::map<std::string, std::string> out;
    const auto& root = ckpt.root_path();
    std::error_code ec;
    if (fs::is_regular_file(root / "config.json", ec)) {
        out[(root / "config.json").string()] = sha256_file(root / "config.json");
    }
    for (const auto& entry : fs::directory_iterator(root, ec)) {
        if (entry.path().filename().string().ends_with(".safetensors.index.json")) {
            out[entry.path().string()] = sha256_file(entry.path());
        }
    }
    for (const auto& shard : ckpt.shards()) {
        std::ifstream in(shard.path, std::ios::binary);
        std::string header(static_cast<std::size_t>(shard.data_offset), '\0');
        in.read(header.data(), static_cast<std::streamsize>(header.size()));
        if (!in) throw Error(ErrorKind::Io, fmt::format("cannot reread header of '{}'", shard.path.string()));
        out[shard.path.string()] = fmt::format("header-sha256:{};bytes:{}", sha256_hex(header), shard.file_size);
    }
    return out;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace tpfp
