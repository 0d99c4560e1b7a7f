// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpfp/arch_map.h"
#include "tpfp/fingerprint.h"

namespace tpfp {

enum class InterpolatedSide { None, A, B };
std::string_view to_string(InterpolatedSide side);

// Resamples `source` onto linspace(0, len-1, target_len) with piecewise-linear
// interpolation. Endpoints are copied exactly; target_len == size is a copy.
// Throws TargetShorterThanSource, DegenerateSequence (size < 2).
std::vector<double> interp_align(std::span<const double> source, std::size_t target_len);
NormalizedSequence interp_align(const NormalizedSequence& source, std::size_t target_len);

struct AlignedPair {
    ProjectionKind kind = ProjectionKind::Q;
    NormalizedSequence a;
    NormalizedSequence b;
    std::size_t common_length = 0;
    InterpolatedSide interpolated_side = InterpolatedSide::None;
};

// The shorter side is always stretched to the longer one.
AlignedPair align(const NormalizedSequence& a, const NormalizedSequence& b);

// Centered two-pass Pearson r in f64, clamped to [-1, 1].
// Throws LengthMismatch, ConstantInput, TooFewSamples (n < 2).
double pearson(std::span<const double> a, std::span<const double> b);

// I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

// Two-tailed p for H0: rho = 0 using Student's t with n-2 degrees of freedom.
// Throws TooFewSamples for n < 3.
double p_value(double r, std::size_t n);

struct KindResult {
    ProjectionKind kind = ProjectionKind::Q;
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

enum class Verdict { LikelyLineage, Inconclusive, LikelyIndependent };
std::string_view to_string(Verdict verdict);

struct Thresholds {
    double high = 0.9;
    double low = 0.7;
};

// Throws Usage unless -1 <= low < high <= 1.
void validate(const Thresholds& t);

// Mean r over the attention kinds present; nullopt when there are none.
std::optional<double> aggregate_attention(std::span<const KindResult> results);
Verdict verdict_for(std::optional<double> aggregate, const Thresholds& thresholds);

struct ComparisonReport {
    std::string model_a;
    std::string model_b;
    std::size_t layers_a = 0;
    std::size_t layers_b = 0;
    InterpolatedSide interpolated_side = InterpolatedSide::None;
    std::vector<KindResult> per_kind;  // ascending kind order
    std::optional<double> aggregate;
    Verdict verdict = Verdict::Inconclusive;
    Thresholds thresholds;
};

// Throws KindMissing, DegenerateSequence.
ComparisonReport compare_fingerprints(const Fingerprint& a, const Fingerprint& b, const KindSet& kinds,
                                      const Thresholds& thresholds = {});

using Grid = std::vector<std::vector<std::optional<double>>>;

struct CorrelationMatrix {
    std::vector<std::string> model_ids;
    std::map<ProjectionKind, Grid> per_kind;
    Grid overall;  // per-cell aggregate over attention kinds
    std::vector<std::string> errors;  // only populated with skip_errors
};

// Throws DuplicateModelId before computing anything. A failing pair is
// rethrown with the pair named unless skip_errors, which leaves its cells empty.
CorrelationMatrix pairwise_matrix(std::span<const Fingerprint> fps, const KindSet& kinds,
                                  bool skip_errors = false, unsigned workers = 1);

}  // namespace tpfp
