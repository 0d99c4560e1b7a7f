// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tpfp/lineage.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "tpfp/errors.h"

namespace tpfp {

namespace {

double continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace

std::string_view to_string(InterpolatedSide side) {
    switch (side) {
        case InterpolatedSide::None: return "none";
        case InterpolatedSide::A: return "a";
        case InterpolatedSide::B: return "b";
    }
    return "?";
}

std::vector<double> interp_align(std::span<const double> source, std::size_t target_len) {
    const std::size_t len = source.size();
    if (len < 2) {
        throw Error(ErrorKind::DegenerateSequence, fmt::format("cannot interpolate {} values", len));
    }
    if (target_len < len) {
        throw Error(ErrorKind::TargetShorterThanSource,
                    fmt::format("target length {} is shorter than source length {}", target_len, len));
    }
    if (target_len == len) return {source.begin(), source.end()};

    const double step = static_cast<double>(len - 1) / static_cast<double>(target_len - 1);
    std::vector<double> out(target_len);
    out.front() = source.front();
    out.back() = source.back();
    for (std::size_t j = 1; j + 1 < target_len; ++j) {
        const double x = static_cast<double>(j) * step;
        const std::size_t k = std::min(static_cast<std::size_t>(x), len - 2);
        const double frac = x - static_cast<double>(k);
        out[j] = source[k] + frac * (source[k + 1] - source[k]);
    }
    return out;
}

NormalizedSequence interp_align(const NormalizedSequence& source, std::size_t target_len) {
    return {source.kind, interp_align(source.values, target_len)};
}

AlignedPair align(const NormalizedSequence& a, const NormalizedSequence& b) {
    AlignedPair out;
    out.kind = a.kind;
    out.common_length = std::max(a.values.size(), b.values.size());
    if (a.values.size() < b.values.size()) {
        out.a = interp_align(a, out.common_length);
        out.b = b;
        out.interpolated_side = InterpolatedSide::A;
    } else if (b.values.size() < a.values.size()) {
        out.a = a;
        out.b = interp_align(b, out.common_length);
        out.interpolated_side = InterpolatedSide::B;
    } else {
        out.a = a;
        out.b = b;
    }
    return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::LengthMismatch, fmt::format("lengths {} and {} differ", a.size(), b.size()));
    }
    const std::size_t n = a.size();
    if (n < 2) throw Error(ErrorKind::TooFewSamples, fmt::format("pearson needs 2 samples, got {}", n));
    double ma = 0.0;
    double mb = 0.0;
    double scale_a = 0.0;
    double scale_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
        scale_a = std::max(scale_a, std::abs(a[i]));
        scale_b = std::max(scale_b, std::abs(b[i]));
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    const double rms_a = std::sqrt(sxx / static_cast<double>(n));
    const double rms_b = std::sqrt(syy / static_cast<double>(n));
    if (!(rms_a > 1e-12 * scale_a) || !(rms_b > 1e-12 * scale_b)) {
        throw Error(ErrorKind::ConstantInput, "pearson input is constant");
    }
    const double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
    return std::clamp(r, -1.0, 1.0);
}

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0) || !(x >= 0.0 && x <= 1.0)) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * continued_fraction(a, b, x) / a;
    return 1.0 - front * continued_fraction(b, a, 1.0 - x) / b;
}

double p_value(double r, std::size_t n) {
    if (n < 3) throw Error(ErrorKind::TooFewSamples, fmt::format("p-value needs n >= 3, got {}", n));
    if (std::isnan(r)) throw Error(ErrorKind::ConstantInput, "p-value of NaN correlation");
    const double ar = std::min(std::abs(r), 1.0);
    if (ar == 1.0) return 0.0;
    if (ar == 0.0) return 1.0;
    const double dof = static_cast<double>(n - 2);
    const double t = ar * std::sqrt(dof) / std::sqrt((1.0 - ar) * (1.0 + ar));
    // 2 * (1 - CDF_t(|t|)) == I_{dof/(dof+t^2)}(dof/2, 1/2)
    const double x = dof / (dof + t * t);
    return std::clamp(regularized_incomplete_beta(dof / 2.0, 0.5, x), 0.0, 1.0);
}

std::string_view to_string(Verdict verdict) {
    switch (verdict) {
        case Verdict::LikelyLineage: return "LIKELY_LINEAGE";
        case Verdict::Inconclusive: return "INCONCLUSIVE";
        case Verdict::LikelyIndependent: return "LIKELY_INDEPENDENT";
    }
    return "?";
}

void validate(const Thresholds& t) {
    if (!(t.low >= -1.0 && t.high <= 1.0 && t.low < t.high)) {
        throw Error(ErrorKind::Usage,
                    fmt::format("thresholds need -1 <= t_low < t_high <= 1 (got t_low {}, t_high {})", t.low, t.high));
    }
}

std::optional<double> aggregate_attention(std::span<const KindResult> results) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : results) {
        if (!is_attention(r.kind)) continue;
        sum += r.r;
        ++count;
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
}

Verdict verdict_for(std::optional<double> aggregate, const Thresholds& thresholds) {
    if (!aggregate) return Verdict::Inconclusive;
    if (*aggregate >= thresholds.high) return Verdict::LikelyLineage;
    if (*aggregate <= thresholds.low) return Verdict::LikelyIndependent;
    return Verdict::Inconclusive;
}

ComparisonReport compare_fingerprints(const Fingerprint& a, const Fingerprint& b, const KindSet& kinds,
                                      const Thresholds& thresholds) {
    validate(thresholds);
    if (kinds.empty()) throw Error(ErrorKind::Usage, "no projection kinds requested");
    ComparisonReport report;
    report.model_a = a.model_id;
    report.model_b = b.model_id;
    report.layers_a = a.num_layers;
    report.layers_b = b.num_layers;
    report.thresholds = thresholds;
    report.interpolated_side = a.num_layers < b.num_layers   ? InterpolatedSide::A
                               : b.num_layers < a.num_layers ? InterpolatedSide::B
                                                             : InterpolatedSide::None;
    for (auto kind : kinds) {
        auto ia = a.kinds.find(kind);
        auto ib = b.kinds.find(kind);
        if (ia == a.kinds.end() || ib == b.kinds.end()) {
            throw Error(ErrorKind::KindMissing,
                        fmt::format("fingerprint '{}' has no {} sequence",
                                    ia == a.kinds.end() ? a.model_id : b.model_id, to_string(kind)));
        }
        NormalizedSequence na;
        NormalizedSequence nb;
        try {
            na = normalize(ia->second);
        } catch (const Error& e) {
            throw e.with_context(fmt::format("model '{}'", a.model_id));
        }
        try {
            nb = normalize(ib->second);
        } catch (const Error& e) {
            throw e.with_context(fmt::format("model '{}'", b.model_id));
        }
        const AlignedPair pair = align(na, nb);
        KindResult res;
        res.kind = kind;
        res.n = pair.common_length;
        res.r = pearson(pair.a.values, pair.b.values);
        res.p_value = p_value(res.r, res.n);
        report.per_kind.push_back(res);
    }
    report.aggregate = aggregate_attention(report.per_kind);
    report.verdict = verdict_for(report.aggregate, thresholds);
    return report;
}

CorrelationMatrix pairwise_matrix(std::span<const Fingerprint> fps, const KindSet& kinds, bool skip_errors,
                                  unsigned workers) {
    if (fps.size() < 2) throw Error(ErrorKind::Usage, "a correlation matrix needs at least 2 fingerprints");
    if (kinds.empty()) throw Error(ErrorKind::Usage, "no projection kinds requested");
    std::set<std::string> seen;
    for (const auto& fp : fps) {
        if (!seen.insert(fp.model_id).second) {
            throw Error(ErrorKind::DuplicateModelId, fmt::format("model_id '{}' appears more than once", fp.model_id));
        }
    }

    const std::size_t n = fps.size();
    CorrelationMatrix out;
    for (const auto& fp : fps) out.model_ids.push_back(fp.model_id);
    const Grid empty(n, std::vector<std::optional<double>>(n));
    for (auto kind : kinds) out.per_kind[kind] = empty;
    out.overall = empty;

    struct Cell {
        std::size_t i, j;
        std::optional<ComparisonReport> report;
        std::exception_ptr error;
    };
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) cells.push_back({i, j, std::nullopt, nullptr});
    }
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t c = next++; c < cells.size(); c = next++) {
            try {
                cells[c].report = compare_fingerprints(fps[cells[c].i], fps[cells[c].j], kinds);
            } catch (...) {
                cells[c].error = std::current_exception();
            }
        }
    };
    const std::size_t nworkers = std::clamp<std::size_t>(workers, 1, cells.size());
    if (nworkers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < nworkers; ++w) pool.emplace_back(work);
    }

    for (const auto& cell : cells) {
        if (cell.error) {
            try {
                std::rethrow_exception(cell.error);
            } catch (const Error& e) {
                auto annotated = e.with_context(fmt::format("pair ('{}', '{}')", fps[cell.i].model_id,
                                                            fps[cell.j].model_id));
                if (!skip_errors) throw annotated;
                out.errors.push_back(annotated.what());
            }
            continue;
        }
        for (const auto& kr : cell.report->per_kind) {
            out.per_kind[kr.kind][cell.i][cell.j] = kr.r;
            out.per_kind[kr.kind][cell.j][cell.i] = kr.r;
        }
        out.overall[cell.i][cell.j] = cell.report->aggregate;
        out.overall[cell.j][cell.i] = cell.report->aggregate;
    }
    return out;
}

}  // namespace tpfp
