// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/registry.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cerrno>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "tpfp/canonical_json.h"
#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json entry_json(const RegistryEntry& e) {
    json kinds = json::array();
    for (auto k : e.kinds) kinds.push_back(std::string(to_string(k)));
    return {{"model_id", e.model_id},
            {"file", e.file.filename().string()},
            {"content_hash", e.content_hash},
            {"num_layers", e.num_layers},
            {"kinds", std::move(kinds)}};
}

// Reads the declared fields without recomputing the hash.
RegistryEntry peek_entry(const fs::path& file) {
    json doc;
    try {
        doc = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::DocumentMalformed, fmt::format("{}: not valid JSON", file.string()));
    }
    RegistryEntry e;
    e.file = file;
    try {
        e.model_id = doc.at("model_id").get<std::string>();
        e.content_hash = doc.at("content_hash").get<std::string>();
        e.num_layers = doc.at("num_layers").get<std::size_t>();
        for (const auto& [name, _] : doc.at("kinds").items()) {
            if (auto k = parse_kind(name)) e.kinds.push_back(*k);
        }
    } catch (const json::exception&) {
        throw Error(ErrorKind::DocumentMalformed, fmt::format("{}: missing fingerprint fields", file.string()));
    }
    std::sort(e.kinds.begin(), e.kinds.end());
    return e;
}

}  // namespace

fs::path default_registry_path() {
    if (const char* env = std::getenv(std::string(kRegistryEnvVar).c_str()); env && *env) return env;
    if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".tpfp" / "registry";
    return "tpfp-registry";
}

DirectoryLock::DirectoryLock(const fs::path& dir, double timeout_seconds) : path_(dir / ".lock") {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
    while (true) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const auto pid = fmt::format("{}\n", ::getpid());
            [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
            ::close(fd);
            return;
        }
        if (errno != EEXIST) {
            throw Error(ErrorKind::Io, fmt::format("cannot create lock '{}'", path_.string()));
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            throw Error(ErrorKind::RegistryLocked,
                        fmt::format("registry lock '{}' is held; remove it if no other tpfp is running",
                                    path_.string()));
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

Registry::Registry(fs::path root) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec || !fs::is_directory(root_)) {
        throw Error(ErrorKind::Io, fmt::format("cannot create registry directory '{}'", root_.string()));
    }
}

std::vector<RegistryEntry> Registry::scan(bool verify_hashes) const {
    std::vector<RegistryEntry> entries;
    for (const auto& item : fs::directory_iterator(root_)) {
        const auto name = item.path().filename().string();
        if (!item.is_regular_file() || !name.ends_with(kFingerprintSuffix)) continue;
        if (verify_hashes) {
            const Fingerprint fp = load_fingerprint(item.path());
            RegistryEntry e;
            e.model_id = fp.model_id;
            e.file = item.path();
            e.content_hash = fp.content_hash;
            e.num_layers = fp.num_layers;
            for (const auto& [k, _] : fp.kinds) e.kinds.push_back(k);
            entries.push_back(std::move(e));
        } else {
            entries.push_back(peek_entry(item.path()));
        }
    }
    std::sort(entries.begin(), entries.end(),
              [](const RegistryEntry& a, const RegistryEntry& b) { return a.model_id < b.model_id; });
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].model_id == entries[i - 1].model_id) {
            throw Error(ErrorKind::DuplicateModelId,
                        fmt::format("model_id '{}' stored in both '{}' and '{}'", entries[i].model_id,
                                    entries[i - 1].file.string(), entries[i].file.string()));
        }
    }
    return entries;
}

void Registry::write_index(const std::vector<RegistryEntry>& entries) const {
    json list = json::array();
    for (const auto& e : entries) list.push_back(entry_json(e));
    const auto text = canonical_dump(json{{"entries", std::move(list)}}, 2) + "\n";
    std::error_code ec;
    if (fs::exists(index_path(), ec)) {
        try {
            if (read_file(index_path()) == text) return;
        } catch (const Error&) {
        }
    }
    write_file_atomic(index_path(), text);
}

RegistryEntry Registry::add(const Fingerprint& fp) {
    DirectoryLock lock(root_);
    auto entries = scan(false);
    for (const auto& e : entries) {
        if (e.model_id == fp.model_id) {
            throw Error(ErrorKind::DuplicateModelId,
                        fmt::format("registry '{}' already holds model_id '{}' ({})", root_.string(), fp.model_id,
                                    e.file.string()));
        }
    }
    const fs::path file = root_ / fingerprint_filename(fp.model_id);
    if (fs::exists(file)) {
        throw Error(ErrorKind::DuplicateModelId,
                    fmt::format("file '{}' already exists for a different model_id", file.string()));
    }
    save_fingerprint(fp, file);
    RegistryEntry added = peek_entry(file);
    entries.push_back(added);
    std::sort(entries.begin(), entries.end(),
              [](const RegistryEntry& a, const RegistryEntry& b) { return a.model_id < b.model_id; });
    write_index(entries);
    return added;
}

std::vector<RegistryEntry> Registry::list() const {
    auto entries = scan(false);
    DirectoryLock lock(root_);
    write_index(entries);
    return entries;
}

std::vector<RegistryEntry> Registry::verify() const {
    auto entries = scan(true);
    DirectoryLock lock(root_);
    write_index(entries);
    return entries;
}

Fingerprint Registry::get(std::string_view model_id) const {
    for (const auto& e : scan(false)) {
        if (e.model_id == model_id) return load_fingerprint(e.file);
    }
    throw Error(ErrorKind::Io, fmt::format("model_id '{}' is not in registry '{}'", model_id, root_.string()));
}

bool Registry::contains(std::string_view model_id) const {
    const auto entries = scan(false);
    return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.model_id == model_id; });
}

}  // namespace tpfp
