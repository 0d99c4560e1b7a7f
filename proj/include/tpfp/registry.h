// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tpfp/fingerprint.h"

namespace tpfp {

inline constexpr std::string_view kRegistryEnvVar = "TPFP_REGISTRY";

// $TPFP_REGISTRY, else ~/.tpfp/registry, else ./tpfp-registry.
std::filesystem::path default_registry_path();

struct RegistryEntry {
    std::string model_id;
    std::filesystem::path file;
    std::string content_hash;
    std::size_t num_layers = 0;
    std::vector<ProjectionKind> kinds;
};

// Directory of <model_id>.tpfp.json files plus a derived index.json. The
// directory contents are authoritative: every listing rescans and rewrites a
// stale index. Mutations hold an exclusive lock file.
class Registry {
public:
    explicit Registry(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path index_path() const { return root_ / "index.json"; }

    // Throws DuplicateModelId. Returns the stored entry.
    RegistryEntry add(const Fingerprint& fp);

    // Entries sorted by model_id; repairs the index if it disagrees.
    std::vector<RegistryEntry> list() const;

    // Recomputes every content hash; HashMismatch names the offending file.
    std::vector<RegistryEntry> verify() const;

    // Loads (and thereby verifies) one fingerprint. Throws Io when absent.
    Fingerprint get(std::string_view model_id) const;
    bool contains(std::string_view model_id) const;

private:
    std::vector<RegistryEntry> scan(bool verify_hashes) const;
    void write_index(const std::vector<RegistryEntry>& entries) const;

    std::filesystem::path root_;
};

// RAII exclusive lock file; throws RegistryLocked after the timeout.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir, double timeout_seconds = 10.0);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

}  // namespace tpfp
