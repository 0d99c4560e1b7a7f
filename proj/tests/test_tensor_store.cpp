// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <functional>
#include <random>

#include "test_support.h"
#include "tpfp/errors.h"
#include "tpfp/synth.h"
#include "tpfp/tensor_store.h"

using namespace tpfp;
using tpfp_test::TempDir;
namespace fs = std::filesystem;

namespace {

void write_raw(const fs::path& p, const std::string& header, std::size_t data_bytes, std::uint64_t claimed_len = 0) {
    std::ofstream out(p, std::ios::binary);
    std::uint64_t len = claimed_len ? claimed_len : header.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xFF));
    out << header;
    for (std::size_t i = 0; i < data_bytes; ++i) out.put('\0');
}

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorKind::Usage;
}

std::vector<double> normal_values(std::size_t n, std::uint64_t seed, double sd = 1.0, double mean = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(mean, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

}  // namespace

TEST(TensorStoreHeader, RecoversNamesShapesDtypes) {
    TempDir dir;
    std::vector<TensorData> ts = {
        {"a.weight", DType::F32, {3, 4}, normal_values(12, 1)},
        {"b", DType::F16, {5}, normal_values(5, 2)},
        {"c.bias", DType::BF16, {2, 2, 2}, normal_values(8, 3)},
        {"d", DType::F64, {7, 1}, normal_values(7, 4)},
    };
    write_safetensors(dir / "model.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    ASSERT_EQ(ckpt.tensors().size(), 4u);
    std::uint64_t offset = 0;
    for (const auto& t : ts) {
        const auto& h = ckpt.tensor(t.name);
        EXPECT_EQ(h.dtype, t.dtype);
        EXPECT_EQ(h.shape, t.shape);
        EXPECT_EQ(h.byte_range.start, offset);
        offset += t.values.size() * byte_size(t.dtype);
        EXPECT_EQ(h.byte_range.end, offset);
    }
    EXPECT_EQ(ckpt.shards().front().data_offset + offset, fs::file_size(dir / "model.safetensors"));
    EXPECT_EQ(ckpt.total_bytes(), fs::file_size(dir / "model.safetensors"));
    EXPECT_EQ(kind_of([&] { ckpt.tensor("missing"); }), ErrorKind::TensorNotFound);
}

TEST(TensorStoreHeader, SingleFilePathAccepted) {
    TempDir dir;
    std::vector<TensorData> ts = {{"x", DType::F32, {4}, {1, 2, 3, 4}}};
    write_safetensors(dir / "weights.safetensors", ts);
    const auto ckpt = open_checkpoint(dir / "weights.safetensors");
    EXPECT_EQ(ckpt.tensors().size(), 1u);
}

TEST(TensorStoreHeader, MetadataIsIgnored) {
    TempDir dir;
    write_raw(dir / "m.safetensors",
              R"({"__metadata__":{"format":"pt"},"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", 8);
    const auto ckpt = open_checkpoint(dir.path());
    EXPECT_EQ(ckpt.tensors().size(), 1u);
    EXPECT_NE(ckpt.find("w"), nullptr);
}

TEST(TensorStoreHeader, SizeMismatchRejected) {
    TempDir dir;
    write_raw(dir / "m.safetensors", R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", 8);
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::SizeMismatch);
}

TEST(TensorStoreHeader, OverlapRejected) {
    TempDir dir;
    write_raw(dir / "m.safetensors",
              R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
              12);
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::HeaderMalformed);
}

TEST(TensorStoreHeader, BadJsonAndLengthRejected) {
    TempDir dir;
    write_raw(dir / "m.safetensors", "{not json", 0);
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::HeaderMalformed);
    TempDir dir2;
    write_raw(dir2 / "m.safetensors", "{}", 0, 1u << 30);
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir2.path()); }), ErrorKind::HeaderMalformed);
}

TEST(TensorStoreHeader, UnsupportedDtype) {
    TempDir dir;
    write_raw(dir / "m.safetensors", R"({"w":{"dtype":"I8","shape":[2],"data_offsets":[0,2]}})", 2);
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::UnsupportedDType);
}

TEST(TensorStoreHeader, DataBeyondFileRejected) {
    TempDir dir;
    write_raw(dir / "m.safetensors", R"({"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})", 8);
    const auto k = kind_of([&] { open_checkpoint(dir.path()); });
    EXPECT_TRUE(k == ErrorKind::HeaderMalformed || k == ErrorKind::SizeMismatch) << to_string(k);
}

TEST(TensorStoreShards, IndexedShardsMerge) {
    TempDir dir;
    SynthSpec spec;
    spec.num_layers = 4;
    spec.shards = 2;
    write_synthetic_checkpoint(spec, dir.path());
    const auto ckpt = open_checkpoint(dir.path());
    EXPECT_EQ(ckpt.shards().size(), 2u);
    const auto& h0 = ckpt.tensor("model.layers.0.self_attn.q_proj.weight");
    const auto& h3 = ckpt.tensor("model.layers.3.self_attn.q_proj.weight");
    EXPECT_EQ(h0.shard_id, 0u);
    EXPECT_EQ(h3.shard_id, 1u);
}

TEST(TensorStoreShards, MissingShardIsMissingIndex) {
    TempDir dir;
    SynthSpec spec;
    spec.shards = 2;
    write_synthetic_checkpoint(spec, dir.path());
    fs::remove(dir / "model-00002-of-00002.safetensors");
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::MissingIndex);
}

TEST(TensorStoreShards, SeveralFilesWithoutIndex) {
    TempDir dir;
    SynthSpec spec;
    spec.shards = 2;
    write_synthetic_checkpoint(spec, dir.path());
    fs::remove(dir / "model.safetensors.index.json");
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::MissingIndex);
}

TEST(TensorStoreShards, EmptyDirectory) {
    TempDir dir;
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::MissingIndex);
    EXPECT_EQ(family_of(ErrorKind::MissingIndex), ErrorFamily::Io);
}

TEST(TensorStoreShards, DuplicateAcrossShards) {
    TempDir dir;
    std::vector<TensorData> a = {{"w", DType::F32, {2}, {1, 2}}};
    std::vector<TensorData> b = {{"w", DType::F32, {2}, {1, 2}}, {"z", DType::F32, {2}, {3, 4}}};
    write_safetensors(dir / "s1.safetensors", a);
    write_safetensors(dir / "s2.safetensors", b);
    tpfp_test::spit(dir / "model.safetensors.index.json",
                    R"({"weight_map":{"w":"s1.safetensors","z":"s2.safetensors"}})");
    EXPECT_EQ(kind_of([&] { open_checkpoint(dir.path()); }), ErrorKind::DuplicateTensor);
}

TEST(TensorStoreDecode, F16AllBitPatterns) {
    for (std::uint32_t b = 0; b < 65536; ++b) {
        const auto h = static_cast<std::uint16_t>(b);
        const double ref = tpfp_test::oracle_f16(h);
        const double got = decode_f16(h);
        if (std::isnan(ref)) {
            ASSERT_TRUE(std::isnan(got)) << b;
        } else {
            ASSERT_EQ(got, ref) << b;
            ASSERT_EQ(std::signbit(got), std::signbit(ref)) << b;
        }
    }
}

TEST(TensorStoreDecode, Bf16AllBitPatterns) {
    for (std::uint32_t b = 0; b < 65536; ++b) {
        const auto h = static_cast<std::uint16_t>(b);
        const double ref = tpfp_test::oracle_bf16(h);
        const double got = decode_bf16(h);
        if (std::isnan(ref)) {
            ASSERT_TRUE(std::isnan(got)) << b;
        } else {
            ASSERT_EQ(got, ref) << b;
        }
    }
}

TEST(TensorStoreDecode, HalfEncodersRoundTrip) {
    for (std::uint32_t b = 0; b < 65536; ++b) {
        const auto h = static_cast<std::uint16_t>(b);
        const double v16 = tpfp_test::oracle_f16(h);
        if (!std::isnan(v16)) ASSERT_EQ(encode_f16(v16), h) << b;
        const double vb = tpfp_test::oracle_bf16(h);
        if (!std::isnan(vb)) ASSERT_EQ(encode_bf16(vb), h) << b;
    }
}

TEST(TensorStoreDecode, F16RoundsToNearestEven) {
    // 1 + 2^-11 sits halfway between 1 and the next half; ties go to even.
    EXPECT_EQ(encode_f16(1.0 + std::ldexp(1.0, -11)), 0x3C00);
    EXPECT_EQ(encode_f16(1.0 + 3 * std::ldexp(1.0, -11)), 0x3C02);
    EXPECT_EQ(encode_f16(70000.0), 0x7C00);
    EXPECT_EQ(encode_f16(std::ldexp(1.0, -26)), 0x0000);
}

TEST(TensorStoreDecode, ElementLittleEndian) {
    const double x = -3.25;
    std::byte raw[8];
    const auto bits = std::bit_cast<std::uint64_t>(x);
    for (int i = 0; i < 8; ++i) raw[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xFF);
    EXPECT_EQ(decode_element(raw, DType::F64), x);
}

TEST(StreamStatsTest, MergeMatchesWholeSample) {
    const auto v = normal_values(1001, 11, 3.0, 50.0);
    const std::span<const double> all(v);
    const auto whole = StreamStats::of(all);
    const auto merged = merge_stats(StreamStats::of(all.subspan(0, 400)), StreamStats::of(all.subspan(400)));
    EXPECT_EQ(merged.count, whole.count);
    EXPECT_NEAR(merged.mean, whole.mean, 1e-12 * std::abs(whole.mean));
    EXPECT_NEAR(merged.m2, whole.m2, 1e-11 * whole.m2);
    EXPECT_NEAR(sample_std(merged), tpfp_test::oracle_std(v), 1e-12 * tpfp_test::oracle_std(v));
}

TEST(StreamStatsTest, MergeCommutativeAssociativeWithIdentity) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<int> len(1, 60);
        const auto a = StreamStats::of(normal_values(len(rng), rng(), 2.0, 1.0));
        const auto b = StreamStats::of(normal_values(len(rng), rng(), 0.5, -4.0));
        const auto c = StreamStats::of(normal_values(len(rng), rng(), 9.0, 0.0));
        const auto ab = merge_stats(a, b);
        const auto ba = merge_stats(b, a);
        EXPECT_EQ(ab.count, ba.count);
        EXPECT_NEAR(ab.mean, ba.mean, 1e-13);
        EXPECT_NEAR(ab.m2, ba.m2, 1e-12 * ab.m2);
        const auto l = merge_stats(merge_stats(a, b), c);
        const auto r = merge_stats(a, merge_stats(b, c));
        EXPECT_NEAR(l.mean, r.mean, 1e-13);
        EXPECT_NEAR(l.m2, r.m2, 1e-12 * l.m2);
        const auto id = merge_stats(a, StreamStats{});
        EXPECT_EQ(id.count, a.count);
        EXPECT_EQ(id.mean, a.mean);
        EXPECT_EQ(id.m2, a.m2);
    }
}

TEST(StreamStatsTest, SampleStdNeedsTwo) {
    EXPECT_EQ(kind_of([] { sample_std(StreamStats::of(std::vector<double>{1.0})); }), ErrorKind::DegenerateTensor);
}

TEST(TensorStdTest, MatchesOracleAcrossDtypes) {
    TempDir dir;
    std::vector<TensorData> ts;
    std::mt19937_64 rng(21);
    const DType dtypes[] = {DType::F64, DType::F32, DType::F16, DType::BF16};
    for (int i = 0; i < 40; ++i) {
        const DType dt = dtypes[i % 4];
        const std::size_t n = 2 + rng() % 5000;
        ts.push_back({"t" + std::to_string(i), dt, {n}, normal_values(n, rng(), 0.02, 0.001)});
    }
    write_safetensors(dir / "m.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    for (const auto& t : ts) {
        std::vector<double> stored;
        for (double v : t.values) {
            switch (t.dtype) {
                case DType::F64: stored.push_back(v); break;
                case DType::F32: stored.push_back(static_cast<float>(v)); break;
                case DType::F16: stored.push_back(tpfp_test::oracle_f16(encode_f16(v))); break;
                case DType::BF16: stored.push_back(tpfp_test::oracle_bf16(encode_bf16(v))); break;
            }
        }
        const double ref = tpfp_test::oracle_std(stored);
        EXPECT_NEAR(tensor_std(ckpt, t.name), ref, 1e-12 * ref) << t.name;
    }
}

TEST(TensorStdTest, RowRangeAndWorkerDeterminism) {
    TempDir dir;
    // 1.2M f64 elements span two read chunks.
    const std::size_t rows = 1200, cols = 1000;
    auto v = normal_values(rows * cols, 77, 1.5, 0.25);
    std::vector<TensorData> ts = {{"big", DType::F64, {rows, cols}, v}};
    write_safetensors(dir / "m.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());

    const auto s1 = tensor_stats(ckpt, "big", std::nullopt, 1);
    const auto s4 = tensor_stats(ckpt, "big", std::nullopt, 4);
    EXPECT_EQ(s1.count, rows * cols);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(s1.mean), std::bit_cast<std::uint64_t>(s4.mean));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(s1.m2), std::bit_cast<std::uint64_t>(s4.m2));
    const double ref = tpfp_test::oracle_std(v);
    EXPECT_NEAR(sample_std(s1), ref, 1e-12 * ref);

    std::vector<double> slice(v.begin() + 100 * cols, v.begin() + 700 * cols);
    const double sref = tpfp_test::oracle_std(slice);
    EXPECT_NEAR(tensor_std(ckpt, "big", RowRange{100, 700}, 3), sref, 1e-12 * sref);
}

TEST(TensorStdTest, PermutationInvariant) {
    TempDir dir;
    auto v = normal_values(4096, 8, 0.03, 0.0);
    auto p = v;
    std::shuffle(p.begin(), p.end(), std::mt19937_64(9));
    std::vector<TensorData> ts = {{"a", DType::F64, {64, 64}, v}, {"b", DType::F64, {64, 64}, p}};
    write_safetensors(dir / "m.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    const double a = tensor_std(ckpt, "a");
    EXPECT_NEAR(tensor_std(ckpt, "b"), a, 1e-12 * a);
}

TEST(TensorStdTest, NonFiniteNamesTensorAndIndex) {
    TempDir dir;
    std::vector<double> v = {1, 2, 3, NAN, 5};
    std::vector<TensorData> ts = {{"bad.weight", DType::F32, {5}, v}};
    write_safetensors(dir / "m.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    try {
        tensor_std(ckpt, "bad.weight");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonFiniteEncountered);
        EXPECT_NE(std::string(e.what()).find("bad.weight"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find('3'), std::string::npos);
    }
}

TEST(TensorStdTest, SingleElementDegenerate) {
    TempDir dir;
    std::vector<TensorData> ts = {{"one", DType::F32, {1}, {2.0}}, {"vec", DType::F32, {4}, {1, 2, 3, 4}}};
    write_safetensors(dir / "m.safetensors", ts);
    const auto ckpt = open_checkpoint(dir.path());
    EXPECT_EQ(kind_of([&] { tensor_std(ckpt, "one"); }), ErrorKind::DegenerateTensor);
    EXPECT_EQ(kind_of([&] { tensor_std(ckpt, "vec", RowRange{0, 2}); }), ErrorKind::ShapeContradiction);
}
