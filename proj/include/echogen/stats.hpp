#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "echogen/error.hpp"

namespace echogen {

namespace detail {

// Continued-fraction kernel for the incomplete beta function (modified
// Lentz iteration). Converges in a handful of terms for the x ranges the
// t-test produces.
inline double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; m++) {
        const int m2 = 2 * m;
        double num = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + num * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + num * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < kEps) return h;
    }
    throw ValueError("incomplete beta: continued fraction failed to converge");
}

}  // namespace detail

// Regularized incomplete beta function I_x(a, b) for a, b > 0 and x in [0,1].
inline double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw ValueError("incomplete beta: parameters must be positive");
    if (x < 0.0 || x > 1.0) throw ValueError("incomplete beta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Two-sided paired t-test result. When the paired differences have zero
// variance the statistic is undefined; rather than emitting an infinity the
// result is flagged degenerate (with t = 0, p = 1 as inert placeholders).
struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool degenerate = false;
};

inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ShapeError("paired t-test: sample lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
    const std::size_t n = a.size();
    if (n < 2) throw ValueError("paired t-test: need at least two pairs");

    double mean = 0.0;
    for (std::size_t i = 0; i < n; i++) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; i++) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(n - 1);

    TTestResult r;
    if (var == 0.0) {
        r.degenerate = true;
        return r;
    }
    const double df = static_cast<double>(n - 1);
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    r.p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + r.t * r.t));
    return r;
}

}  // namespace echogen
