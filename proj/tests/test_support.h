// Copyright 2026 The tpfp Authors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures and independent reference implementations for the tests.
// Nothing here calls into the library's numeric code.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>
#include <sys/wait.h>

namespace tpfp_test {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "tpfp-test-XXXXXX").string();
        char* made = ::mkdtemp(tmpl.data());
        if (made == nullptr) throw std::runtime_error("mkdtemp failed");
        path_ = made;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

// Runs the CLI binary through the shell, capturing stdout and stderr.
inline RunResult run_tool(const std::string& exe, const std::string& args, const fs::path& scratch) {
    const fs::path o = scratch / ".stdout";
    const fs::path e = scratch / ".stderr";
    const std::string cmd = "'" + exe + "' " + args + " > '" + o.string() + "' 2> '" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
}

// Two-pass sample standard deviation in long double.
inline double oracle_std(const std::vector<double>& x) {
    long double sum = 0;
    for (double v : x) sum += v;
    const long double mean = sum / static_cast<long double>(x.size());
    long double ss = 0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return static_cast<double>(std::sqrt(ss / static_cast<long double>(x.size() - 1)));
}

// Arithmetic decode of IEEE binary16.
inline double oracle_f16(std::uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 10) & 0x1F;
    const int mant = h & 0x3FF;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -24);
    } else if (exp == 31) {
        v = mant == 0 ? INFINITY : NAN;
    } else {
        v = std::ldexp(1.0 + mant / 1024.0, exp - 15);
    }
    return sign ? -v : v;
}

// Arithmetic decode of bfloat16.
inline double oracle_bf16(std::uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 7) & 0xFF;
    const int mant = h & 0x7F;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -133);
    } else if (exp == 255) {
        v = mant == 0 ? INFINITY : NAN;
    } else {
        v = std::ldexp(1.0 + mant / 128.0, exp - 127);
    }
    return sign ? -v : v;
}

// Pointwise piecewise-linear resampling onto target evenly spaced positions.
inline std::vector<double> oracle_interp(const std::vector<double>& src, std::size_t target) {
    const std::size_t n = src.size();
    std::vector<double> out(target);
    for (std::size_t i = 0; i < target; ++i) {
        const double x = static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(target - 1);
        std::size_t j = static_cast<std::size_t>(std::floor(x));
        if (j >= n - 1) j = n - 2;
        const double t = x - static_cast<double>(j);
        out[i] = src[j] * (1.0 - t) + src[j + 1] * t;
    }
    return out;
}

// Pearson r straight from the definition, in long double.
inline double oracle_pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    long double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    long double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return static_cast<double>(sab / std::sqrt(saa * sbb));
}

// Two-sided p for r with n samples: 1 - 2 * integral_0^|t| of the Student t
// density with n - 2 degrees of freedom, by composite Simpson.
inline double oracle_p_value(double r, std::size_t n, int intervals = 200000) {
    const double nu = static_cast<double>(n) - 2.0;
    const double t = std::abs(r) * std::sqrt(nu / (1.0 - r * r));
    const double logc = std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2) - 0.5 * std::log(nu * M_PI);
    auto f = [&](double x) { return std::exp(logc - (nu + 1) / 2 * std::log1p(x * x / nu)); };
    const double h = t / intervals;
    double s = f(0) + f(t);
    for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(i * h);
    const double half_mass = s * h / 3.0;
    return std::clamp(1.0 - 2.0 * half_mass, 0.0, 1.0);
}

}  // namespace tpfp_test
