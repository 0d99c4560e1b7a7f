// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tpfp {

enum class DType { F64, F32, F16, BF16 };

std::size_t byte_size(DType dtype);
std::string_view to_string(DType dtype);
// Throws UnsupportedDType for anything but F64/F32/F16/BF16.
DType parse_dtype(std::string_view text);

// Offsets are relative to the start of the shard's data region; end is exclusive.
struct ByteRange {
    std::uint64_t start = 0;
    std::uint64_t end = 0;

    std::uint64_t size() const { return end - start; }
    friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

struct TensorHandle {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    ByteRange byte_range;
    std::size_t shard_id = 0;

    std::uint64_t element_count() const;
};

struct ShardInfo {
    std::filesystem::path path;
    std::uint64_t data_offset = 0;  // 8 + header length
    std::uint64_t file_size = 0;
    std::uint64_t header_length = 0;
};

// Parsed headers of a safetensors checkpoint. Immutable after open_checkpoint.
class CheckpointHandle {
public:
    CheckpointHandle(std::filesystem::path root, std::vector<ShardInfo> shards,
                     std::map<std::string, TensorHandle> tensors);

    const std::filesystem::path& root_path() const { return root_; }
    const std::vector<ShardInfo>& shards() const { return shards_; }
    const std::map<std::string, TensorHandle>& tensors() const { return tensors_; }
    std::uint64_t total_bytes() const { return total_bytes_; }

    const TensorHandle* find(std::string_view name) const;
    // Throws TensorNotFound.
    const TensorHandle& tensor(std::string_view name) const;

private:
    std::filesystem::path root_;
    std::vector<ShardInfo> shards_;
    std::map<std::string, TensorHandle> tensors_;
    std::uint64_t total_bytes_ = 0;
};

// Reads the little-endian u64 header length from the first 8 bytes.
std::uint64_t read_header_length(std::span<const std::byte> prefix);

// Parses the 8-byte length prefix plus JSON header. Entries are validated
// against shape x dtype size and checked for overlap; "__metadata__" is ignored.
std::map<std::string, TensorHandle> parse_header(std::span<const std::byte> prefix_bytes,
                                                 std::size_t shard_id = 0);

// Accepts a directory holding one .safetensors file or a
// *.safetensors.index.json plus its shards. A path to a single
// .safetensors file is accepted as well. Only headers are read.
CheckpointHandle open_checkpoint(const std::filesystem::path& path);

double decode_f16(std::uint16_t bits);
double decode_bf16(std::uint16_t bits);
// raw must hold exactly byte_size(dtype) little-endian bytes.
double decode_element(std::span<const std::byte> raw, DType dtype);

// Count, mean and sum of squared deviations of a sample.
struct StreamStats {
    std::uint64_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    static StreamStats of(std::span<const double> values);
};

StreamStats merge_stats(const StreamStats& a, const StreamStats& b);

// Bessel-corrected standard deviation. Throws DegenerateTensor when count < 2.
double sample_std(const StreamStats& stats);

// Half-open row slice of a 2-D tensor.
struct RowRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    friend bool operator==(const RowRange&, const RowRange&) = default;
};

inline constexpr std::size_t kChunkBytes = std::size_t{8} << 20;

// Streams the selected elements in kChunkBytes chunks. Chunks may be decoded
// by several workers, but the per-chunk stats are always folded left in
// ascending chunk order, so the result does not depend on `workers`.
StreamStats tensor_stats(const CheckpointHandle& ckpt, std::string_view name,
                         std::optional<RowRange> region = std::nullopt, unsigned workers = 1);

double tensor_std(const CheckpointHandle& ckpt, std::string_view name,
                  std::optional<RowRange> region = std::nullopt, unsigned workers = 1);

}  // namespace tpfp
