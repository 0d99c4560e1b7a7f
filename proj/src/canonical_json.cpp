// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/canonical_json.h"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;

namespace {

void dump_into(std::string& out, const nlohmann::json& v, int indent, int depth) {
    const auto newline = [&](int d) {
        if (indent < 0) return;
        out.push_back('\n');
        out.append(static_cast<std::size_t>(indent * d), ' ');
    };
    switch (v.type()) {
        case nlohmann::json::value_t::object: {
            if (v.empty()) {
                out += "{}";
                return;
            }
            out.push_back('{');
            bool first = true;
            // object_t is an ordered std::map, so iteration is sorted by key
            for (const auto& [key, item] : v.items()) {
                if (!first) out.push_back(',');
                first = false;
                newline(depth + 1);
                out += nlohmann::json(key).dump();
                out += indent < 0 ? ":" : ": ";
                dump_into(out, item, indent, depth + 1);
            }
            newline(depth);
            out.push_back('}');
            return;
        }
        case nlohmann::json::value_t::array: {
            if (v.empty()) {
                out += "[]";
                return;
            }
            out.push_back('[');
            bool first = true;
            for (const auto& item : v) {
                if (!first) out.push_back(',');
                first = false;
                newline(depth + 1);
                dump_into(out, item, indent, depth + 1);
            }
            newline(depth);
            out.push_back(']');
            return;
        }
        case nlohmann::json::value_t::number_float:
            out += format_double(v.get<double>());
            return;
        default:
            out += v.dump();
            return;
    }
}

}  // namespace

std::string format_double(double value) {
    if (!std::isfinite(value)) {
        throw Error(ErrorKind::DocumentMalformed, "non-finite number cannot be serialized");
    }
    if (value == 0.0) return "0.0";  // also folds -0.0
    auto s = fmt::format("{:.17g}", value);
    // keep the token a float so readers do not round-trip it as an integer
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string canonical_dump(const nlohmann::json& value, int indent) {
    std::string out;
    dump_into(out, value, indent, 0);
    return out;
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorKind::Io, "sha256 digest failed");
    }
    std::string hex;
    hex.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
    return hex;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, fmt::format("cannot read '{}'", path.string()));
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md.data(), &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
    return hex;
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, fmt::format("cannot write '{}'", tmp.string()));
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw Error(ErrorKind::Io, fmt::format("short write to '{}'", tmp.string()));
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error(ErrorKind::Io, fmt::format("cannot move output into '{}'", path.string()));
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, fmt::format("cannot read '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace tpfp
