// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tpfp/tensor_store.h"

namespace tpfp {

// Provenance record written next to every output of a CLI run. Timestamps
// live only here, never in fingerprints or reports.
struct RunManifest {
    std::string command;
    std::vector<std::string> arguments;
    std::string tool_version;
    std::map<std::string, std::string> input_hashes;  // path -> sha256
    double wall_time_seconds = 0.0;
    std::string started_at;  // UTC, ISO 8601
    std::vector<std::string> outputs;
};

std::string render_manifest(const RunManifest& manifest);

// <file>.manifest.json for a file output; <dir>/tpfp.manifest.json for a directory.
std::filesystem::path manifest_path_for(const std::filesystem::path& output);

// config.json and the shard index are hashed whole. Shards are identified by
// the sha256 of their header bytes plus their size, so multi-GB payloads are
// not rehashed on every run.
std::map<std::string, std::string> checkpoint_input_hashes(const CheckpointHandle& ckpt);

std::string utc_timestamp();

}  // namespace tpfp
