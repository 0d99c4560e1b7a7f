// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/tensor_store.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "tpfp/errors.h"

namespace tpfp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = std::uint64_t{100} << 20;

template <typename U>
U load_le(const std::byte* p) {
    U v;
    std::memcpy(&v, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
        U swapped = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            swapped = static_cast<U>((swapped << 8) | ((v >> (8 * i)) & 0xFF));
        }
        v = swapped;
    }
    return v;
}

template <DType D>
double decode_at(const std::byte* p) {
    if constexpr (D == DType::F64) {
        return std::bit_cast<double>(load_le<std::uint64_t>(p));
    } else if constexpr (D == DType::F32) {
        return static_cast<double>(std::bit_cast<float>(load_le<std::uint32_t>(p)));
    } else if constexpr (D == DType::F16) {
        return decode_f16(load_le<std::uint16_t>(p));
    } else {
        return decode_bf16(load_le<std::uint16_t>(p));
    }
}

struct ChunkResult {
    StreamStats stats;
    std::exception_ptr error;
};

template <DType D>
StreamStats chunk_stats(const std::byte* data, std::size_t count, std::string_view name,
                        std::uint64_t first_index) {
    constexpr std::size_t stride = sizeof(std::uint64_t) >> (D == DType::F64 ? 0 : D == DType::F32 ? 1 : 2);
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double x = decode_at<D>(data + i * stride);
        if (!std::isfinite(x)) {
            throw Error(ErrorKind::NonFiniteEncountered,
                        fmt::format("tensor '{}' has non-finite value {} at flat index {}", name, x,
                                    first_index + i));
        }
        sum += x;
    }
    StreamStats s;
    s.count = count;
    s.mean = sum / static_cast<double>(count);
    double m2 = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = decode_at<D>(data + i * stride) - s.mean;
        m2 += d * d;
    }
    s.m2 = m2;
    return s;
}

StreamStats dispatch_chunk(DType dtype, const std::byte* data, std::size_t count,
                           std::string_view name, std::uint64_t first_index) {
    switch (dtype) {
        case DType::F64: return chunk_stats<DType::F64>(data, count, name, first_index);
        case DType::F32: return chunk_stats<DType::F32>(data, count, name, first_index);
        case DType::F16: return chunk_stats<DType::F16>(data, count, name, first_index);
        case DType::BF16: return chunk_stats<DType::BF16>(data, count, name, first_index);
    }
    return {};
}

std::uint64_t json_uint(const json& v, std::string_view what, std::string_view tensor) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw Error(ErrorKind::HeaderMalformed,
                    fmt::format("tensor '{}': {} must be a non-negative integer", tensor, what));
    }
    if (v.is_number_integer() && v.get<std::int64_t>() < 0) {
        throw Error(ErrorKind::HeaderMalformed,
                    fmt::format("tensor '{}': {} must be non-negative", tensor, what));
    }
    return v.get<std::uint64_t>();
}

ShardInfo read_shard_header(const fs::path& path, std::vector<std::byte>& prefix) {
    std::error_code ec;
    const auto file_size = fs::file_size(path, ec);
    if (ec) {
        throw Error(ErrorKind::Io, fmt::format("cannot stat '{}': {}", path.string(), ec.message()));
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, fmt::format("cannot open '{}'", path.string()));
    if (file_size < 8) {
        throw Error(ErrorKind::HeaderMalformed,
                    fmt::format("'{}' is shorter than the 8-byte length prefix", path.string()));
    }
    prefix.resize(8);
    in.read(reinterpret_cast<char*>(prefix.data()), 8);
    const std::uint64_t h = read_header_length(prefix);
    if (h > kMaxHeaderBytes || h > file_size - 8) {
        throw Error(ErrorKind::HeaderMalformed,
                    fmt::format("'{}' declares header length {} but file has {} bytes", path.string(),
                                h, file_size));
    }
    prefix.resize(8 + h);
    in.read(reinterpret_cast<char*>(prefix.data() + 8), static_cast<std::streamsize>(h));
    if (!in) throw Error(ErrorKind::Io, fmt::format("short read on header of '{}'", path.string()));
    return ShardInfo{path, 8 + h, file_size, h};
}

}  // namespace

std::size_t byte_size(DType dtype) {
    switch (dtype) {
        case DType::F64: return 8;
        case DType::F32: return 4;
        case DType::F16:
        case DType::BF16: return 2;
    }
    return 0;
}

std::string_view to_string(DType dtype) {
    switch (dtype) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

DType parse_dtype(std::string_view text) {
    if (text == "F64") return DType::F64;
    if (text == "F32") return DType::F32;
    if (text == "F16") return DType::F16;
    if (text == "BF16") return DType::BF16;
    throw Error(ErrorKind::UnsupportedDType, fmt::format("dtype '{}' is not supported", text));
}

std::uint64_t TensorHandle::element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

CheckpointHandle::CheckpointHandle(fs::path root, std::vector<ShardInfo> shards,
                                   std::map<std::string, TensorHandle> tensors)
    : root_(std::move(root)), shards_(std::move(shards)), tensors_(std::move(tensors)) {
    for (const auto& s : shards_) total_bytes_ += s.file_size;
}

const TensorHandle* CheckpointHandle::find(std::string_view name) const {
    auto it = tensors_.find(std::string(name));
    return it == tensors_.end() ? nullptr : &it->second;
}

const TensorHandle& CheckpointHandle::tensor(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw Error(ErrorKind::TensorNotFound,
                fmt::format("tensor '{}' not found in checkpoint '{}'", name, root_.string()));
}

std::uint64_t read_header_length(std::span<const std::byte> prefix) {
    if (prefix.size() < 8) {
        throw Error(ErrorKind::HeaderMalformed, "need at least 8 bytes for the header length");
    }
    return load_le<std::uint64_t>(prefix.data());
}

std::map<std::string, TensorHandle> parse_header(std::span<const std::byte> prefix_bytes,
                                                 std::size_t shard_id) {
    const std::uint64_t h = read_header_length(prefix_bytes);
    if (h > prefix_bytes.size() - 8) {
        throw Error(ErrorKind::HeaderMalformed,
                    fmt::format("header length {} exceeds the {} bytes available", h,
                                prefix_bytes.size() - 8));
    }
    const auto* text = reinterpret_cast<const char*>(prefix_bytes.data() + 8);
    json doc;
    try {
        doc = json::parse(text, text + h);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::HeaderMalformed, fmt::format("header JSON: {}", e.what()));
    }
    if (!doc.is_object()) throw Error(ErrorKind::HeaderMalformed, "header is not a JSON object");

    std::map<std::string, TensorHandle> out;
    for (const auto& [name, entry] : doc.items()) {
        if (name == "__metadata__") continue;
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw Error(ErrorKind::HeaderMalformed,
                        fmt::format("tensor '{}' needs dtype, shape and data_offsets", name));
        }
        const auto& dt = entry["dtype"];
        const auto& shape = entry["shape"];
        const auto& offsets = entry["data_offsets"];
        if (!dt.is_string() || !shape.is_array() || !offsets.is_array() || offsets.size() != 2) {
            throw Error(ErrorKind::HeaderMalformed, fmt::format("tensor '{}' entry is malformed", name));
        }
        TensorHandle t;
        t.name = name;
        t.dtype = parse_dtype(dt.get<std::string>());
        t.shard_id = shard_id;
        std::uint64_t count = 1;
        for (const auto& d : shape) {
            const auto dim = json_uint(d, "shape entry", name);
            if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim) {
                throw Error(ErrorKind::HeaderMalformed, fmt::format("tensor '{}' shape overflows", name));
            }
            count *= dim;
            t.shape.push_back(dim);
        }
        t.byte_range.start = json_uint(offsets[0], "data_offsets[0]", name);
        t.byte_range.end = json_uint(offsets[1], "data_offsets[1]", name);
        if (t.byte_range.end < t.byte_range.start) {
            throw Error(ErrorKind::HeaderMalformed, fmt::format("tensor '{}' has end < start", name));
        }
        const std::uint64_t expected = count * byte_size(t.dtype);
        if (t.byte_range.size() != expected) {
            throw Error(ErrorKind::SizeMismatch,
                        fmt::format("tensor '{}' spans {} bytes but {} x {} needs {}", name,
                                    t.byte_range.size(), count, to_string(t.dtype), expected));
        }
        out.emplace(name, std::move(t));
    }

    std::vector<const TensorHandle*> by_start;
    for (const auto& [_, t] : out) {
        if (t.byte_range.size() > 0) by_start.push_back(&t);
    }
    std::sort(by_start.begin(), by_start.end(), [](const auto* a, const auto* b) {
        return a->byte_range.start < b->byte_range.start;
    });
    for (std::size_t i = 1; i < by_start.size(); ++i) {
        if (by_start[i]->byte_range.start < by_start[i - 1]->byte_range.end) {
            throw Error(ErrorKind::HeaderMalformed,
                        fmt::format("tensors '{}' and '{}' overlap", by_start[i - 1]->name,
                                    by_start[i]->name));
        }
    }
    return out;
}

CheckpointHandle open_checkpoint(const fs::path& path) {
    std::error_code ec;
    const auto status = fs::status(path, ec);
    if (ec || !fs::exists(status)) {
        throw Error(ErrorKind::Io, fmt::format("checkpoint path '{}' is not readable", path.string()));
    }

    std::vector<fs::path> shard_paths;
    std::optional<std::map<std::string, std::string>> weight_map;

    if (fs::is_regular_file(status)) {
        shard_paths.push_back(path);
    } else if (fs::is_directory(status)) {
        std::vector<fs::path> indexes;
        std::vector<fs::path> singles;
        fs::directory_iterator it(path, ec);
        if (ec) {
            throw Error(ErrorKind::Io,
                        fmt::format("cannot list '{}': {}", path.string(), ec.message()));
        }
        for (const auto& entry : it) {
            if (!entry.is_regular_file()) continue;
            const auto fname = entry.path().filename().string();
            if (fname.ends_with(".safetensors.index.json")) indexes.push_back(entry.path());
            else if (fname.ends_with(".safetensors")) singles.push_back(entry.path());
        }
        std::sort(indexes.begin(), indexes.end());
        std::sort(singles.begin(), singles.end());
        if (indexes.size() > 1) {
            throw Error(ErrorKind::MissingIndex,
                        fmt::format("'{}' holds {} index files; expected one", path.string(),
                                    indexes.size()));
        }
        if (indexes.size() == 1) {
            std::ifstream in(indexes.front());
            if (!in) throw Error(ErrorKind::Io, fmt::format("cannot open '{}'", indexes.front().string()));
            json doc;
            try {
                doc = json::parse(in);
            } catch (const json::parse_error& e) {
                throw Error(ErrorKind::HeaderMalformed,
                            fmt::format("index '{}': {}", indexes.front().string(), e.what()));
            }
            if (!doc.is_object() || !doc.contains("weight_map") || !doc["weight_map"].is_object()) {
                throw Error(ErrorKind::HeaderMalformed,
                            fmt::format("index '{}' lacks a weight_map object", indexes.front().string()));
            }
            weight_map.emplace();
            std::vector<std::string> files;
            for (const auto& [tensor, file] : doc["weight_map"].items()) {
                if (!file.is_string()) {
                    throw Error(ErrorKind::HeaderMalformed,
                                fmt::format("weight_map entry '{}' is not a file name", tensor));
                }
                (*weight_map)[tensor] = file.get<std::string>();
                files.push_back(file.get<std::string>());
            }
            std::sort(files.begin(), files.end());
            files.erase(std::unique(files.begin(), files.end()), files.end());
            for (const auto& f : files) {
                const auto p = path / f;
                if (!fs::is_regular_file(p)) {
                    throw Error(ErrorKind::MissingIndex,
                                fmt::format("index references missing shard '{}'", p.string()));
                }
                shard_paths.push_back(p);
            }
        } else if (singles.size() == 1) {
            shard_paths.push_back(singles.front());
        } else if (singles.empty()) {
            throw Error(ErrorKind::MissingIndex,
                        fmt::format("'{}' has no .safetensors file or shard index", path.string()));
        } else {
            throw Error(ErrorKind::MissingIndex,
                        fmt::format("'{}' has {} .safetensors files but no shard index",
                                    path.string(), singles.size()));
        }
    } else {
        throw Error(ErrorKind::Io, fmt::format("'{}' is neither a file nor a directory", path.string()));
    }

    std::vector<ShardInfo> shards;
    std::map<std::string, TensorHandle> tensors;
    std::vector<std::byte> prefix;
    for (std::size_t id = 0; id < shard_paths.size(); ++id) {
        ShardInfo info = read_shard_header(shard_paths[id], prefix);
        auto parsed = parse_header(prefix, id);
        const std::uint64_t data_bytes = info.file_size - info.data_offset;
        for (auto& [name, t] : parsed) {
            if (t.byte_range.end > data_bytes) {
                throw Error(ErrorKind::SizeMismatch,
                            fmt::format("tensor '{}' ends at {} past the {}-byte data region of '{}'",
                                        name, t.byte_range.end, data_bytes, info.path.string()));
            }
            if (tensors.contains(name)) {
                throw Error(ErrorKind::DuplicateTensor,
                            fmt::format("tensor '{}' appears in '{}' and '{}'", name,
                                        shards[tensors[name].shard_id].path.string(),
                                        info.path.string()));
            }
            if (weight_map) {
                auto wm = weight_map->find(name);
                if (wm != weight_map->end() && wm->second != info.path.filename().string()) {
                    throw Error(ErrorKind::HeaderMalformed,
                                fmt::format("index places '{}' in '{}' but it was found in '{}'", name,
                                            wm->second, info.path.filename().string()));
                }
            }
            tensors.emplace(name, std::move(t));
        }
        shards.push_back(std::move(info));
    }
    if (weight_map) {
        for (const auto& [name, file] : *weight_map) {
            if (!tensors.contains(name)) {
                throw Error(ErrorKind::HeaderMalformed,
                            fmt::format("index lists '{}' in '{}' but the shard does not contain it",
                                        name, file));
            }
        }
    }
    const fs::path root = fs::is_directory(status) ? path : path.parent_path();
    return CheckpointHandle(root, std::move(shards), std::move(tensors));
}

double decode_f16(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits >> 15) << 31;
    std::uint32_t exp = (bits >> 10) & 0x1F;
    std::uint32_t mant = bits & 0x3FF;
    std::uint32_t out;
    if (exp == 0x1F) {
        out = sign | 0x7F800000u | (mant << 13);
    } else if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {
            // subnormal: shift until the implicit bit appears
            int shift = -1;
            do {
                mant <<= 1;
                ++shift;
            } while ((mant & 0x400) == 0);
            mant &= 0x3FF;
            out = sign | (static_cast<std::uint32_t>(112 - shift) << 23) | (mant << 13);
        }
    } else {
        out = sign | ((exp + 112) << 23) | (mant << 13);
    }
    return static_cast<double>(std::bit_cast<float>(out));
}

double decode_bf16(std::uint16_t bits) {
    return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16));
}

double decode_element(std::span<const std::byte> raw, DType dtype) {
    switch (dtype) {
        case DType::F64: return decode_at<DType::F64>(raw.data());
        case DType::F32: return decode_at<DType::F32>(raw.data());
        case DType::F16: return decode_at<DType::F16>(raw.data());
        case DType::BF16: return decode_at<DType::BF16>(raw.data());
    }
    return 0.0;
}

StreamStats StreamStats::of(std::span<const double> values) {
    StreamStats s;
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.count = values.size();
    s.mean = sum / static_cast<double>(s.count);
    for (double v : values) s.m2 += (v - s.mean) * (v - s.mean);
    return s;
}

StreamStats merge_stats(const StreamStats& a, const StreamStats& b) {
    if (a.count == 0) return b;
    if (b.count == 0) return a;
    const double na = static_cast<double>(a.count);
    const double nb = static_cast<double>(b.count);
    const double n = na + nb;
    const double delta = b.mean - a.mean;
    StreamStats out;
    out.count = a.count + b.count;
    out.mean = a.mean + delta * (nb / n);
    out.m2 = a.m2 + b.m2 + delta * delta * (na * nb / n);
    return out;
}

double sample_std(const StreamStats& stats) {
    if (stats.count < 2) {
        throw Error(ErrorKind::DegenerateTensor,
                    fmt::format("standard deviation needs at least 2 elements, got {}", stats.count));
    }
    return std::sqrt(std::max(0.0, stats.m2) / static_cast<double>(stats.count - 1));
}

StreamStats tensor_stats(const CheckpointHandle& ckpt, std::string_view name,
                         std::optional<RowRange> region, unsigned workers) {
    const TensorHandle& t = ckpt.tensor(name);
    const std::size_t esize = byte_size(t.dtype);
    std::uint64_t begin = t.byte_range.start;
    std::uint64_t end = t.byte_range.end;
    if (region) {
        if (t.shape.size() != 2) {
            throw Error(ErrorKind::ShapeContradiction,
                        fmt::format("row range requested on '{}' which is {}-D", name, t.shape.size()));
        }
        if (region->begin > region->end || region->end > t.shape[0]) {
            throw Error(ErrorKind::ShapeContradiction,
                        fmt::format("rows [{}, {}) out of bounds for '{}' with {} rows", region->begin,
                                    region->end, name, t.shape[0]));
        }
        const std::uint64_t row_bytes = t.shape[1] * esize;
        begin = t.byte_range.start + region->begin * row_bytes;
        end = t.byte_range.start + region->end * row_bytes;
    }
    const std::uint64_t total = end - begin;
    if (total / esize < 2) {
        throw Error(ErrorKind::DegenerateTensor,
                    fmt::format("tensor '{}' selection has {} elements; need at least 2", name,
                                total / esize));
    }

    const ShardInfo& shard = ckpt.shards()[t.shard_id];
    const std::size_t nchunks = static_cast<std::size_t>((total + kChunkBytes - 1) / kChunkBytes);
    std::vector<ChunkResult> results(nchunks);
    const std::uint64_t first_element = (begin - t.byte_range.start) / esize;

    auto work = [&](std::size_t worker, std::size_t stride) {
        std::ifstream in(shard.path, std::ios::binary);
        std::vector<std::byte> buf;
        for (std::size_t c = worker; c < nchunks; c += stride) {
            try {
                if (!in) throw Error(ErrorKind::Io, fmt::format("cannot open '{}'", shard.path.string()));
                const std::uint64_t off = static_cast<std::uint64_t>(c) * kChunkBytes;
                const std::size_t len = static_cast<std::size_t>(std::min<std::uint64_t>(kChunkBytes, total - off));
                buf.resize(len);
                in.seekg(static_cast<std::streamoff>(shard.data_offset + begin + off));
                in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
                if (!in) {
                    throw Error(ErrorKind::Io,
                                fmt::format("short read of '{}' in '{}'", name, shard.path.string()));
                }
                results[c].stats = dispatch_chunk(t.dtype, buf.data(), len / esize, name,
                                                  first_element + off / esize);
            } catch (...) {
                results[c].error = std::current_exception();
                in.clear();
            }
        }
    };

    const std::size_t nworkers = std::clamp<std::size_t>(workers, 1, nchunks);
    if (nworkers == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(nworkers);
        for (std::size_t w = 0; w < nworkers; ++w) pool.emplace_back(work, w, nworkers);
    }

    StreamStats acc;
    for (const auto& r : results) {
        if (r.error) std::rethrow_exception(r.error);
        acc = merge_stats(acc, r.stats);
    }
    return acc;
}

double tensor_std(const CheckpointHandle& ckpt, std::string_view name,
                  std::optional<RowRange> region, unsigned workers) {
    return sample_std(tensor_stats(ckpt, name, region, workers));
}

}  // namespace tpfp
