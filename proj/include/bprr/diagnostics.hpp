#pragma once

// Point estimates, classification and error metrics, and single-chain
// convergence diagnostics (Geweke; Heidelberger-Welch stationarity and
// half-width) over sampler output.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bprr/linalg.hpp"
#include "bprr/sampler.hpp"

namespace bprr {

// ---------------------------------------------------------------------------
// Point estimates
// ---------------------------------------------------------------------------

struct ChainSummary {
    Gamma map_gamma;
    double map_gamma_freq = 0.0;
    bool gamma_tie = false;
    std::vector<std::pair<std::string, double>> gamma_posterior;  // first-seen order
    int map_r = 0;
    double map_r_freq = 0.0;
    bool r_tie = false;
    std::map<int, double> r_posterior;
    Matrix C_mean;
    std::size_t draws = 0;
};

/// Modal gamma and r (ties go to the value seen first) and the posterior mean of C.
inline ChainSummary map_estimates(const ChainOutput& chain) {
    if (chain.draws.empty()) throw DataError("map_estimates: chain has no draws");
    ChainSummary s;
    s.draws = chain.draws.size();
    const double total = static_cast<double>(chain.draws.size());

    std::vector<std::pair<std::string, long>> gamma_counts;
    std::map<std::string, std::size_t> gamma_index;
    std::vector<std::pair<int, long>> r_counts;
    std::map<int, std::size_t> r_index;
    s.C_mean = Matrix::Zero(chain.draws.front().C.rows(), chain.draws.front().C.cols());
    for (const auto& d : chain.draws) {
        const auto bits = gamma_bits(d.gamma);
        auto [git, gnew] = gamma_index.try_emplace(bits, gamma_counts.size());
        if (gnew) gamma_counts.emplace_back(bits, 0);
        ++gamma_counts[git->second].second;
        auto [rit, rnew] = r_index.try_emplace(d.r, r_counts.size());
        if (rnew) r_counts.emplace_back(d.r, 0);
        ++r_counts[rit->second].second;
        s.C_mean += d.C;
    }
    s.C_mean /= total;

    std::size_t best = 0;
    for (std::size_t i = 1; i < gamma_counts.size(); ++i) {
        if (gamma_counts[i].second > gamma_counts[best].second) best = i;
    }
    for (std::size_t i = 0; i < gamma_counts.size(); ++i) {
        if (i != best && gamma_counts[i].second == gamma_counts[best].second) s.gamma_tie = true;
        s.gamma_posterior.emplace_back(gamma_counts[i].first, gamma_counts[i].second / total);
    }
    s.map_gamma = gamma_from_bits(gamma_counts[best].first);
    s.map_gamma_freq = gamma_counts[best].second / total;

    std::size_t rbest = 0;
    for (std::size_t i = 1; i < r_counts.size(); ++i) {
        if (r_counts[i].second > r_counts[rbest].second) rbest = i;
    }
    for (std::size_t i = 0; i < r_counts.size(); ++i) {
        if (i != rbest && r_counts[i].second == r_counts[rbest].second) s.r_tie = true;
        s.r_posterior[r_counts[i].first] = r_counts[i].second / total;
    }
    s.map_r = r_counts[rbest].first;
    s.map_r_freq = r_counts[rbest].second / total;
    return s;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ClassificationMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
};

/// Accuracy and F1 with low-rank membership (gamma = 1) as the positive class.
inline ClassificationMetrics classification_metrics(const Gamma& gamma_hat, const Gamma& gamma_true) {
    if (gamma_hat.size() != gamma_true.size() || gamma_hat.empty()) {
        throw DimensionError("classification_metrics: allocations differ in length");
    }
    int tp = 0, fp = 0, fn = 0, agree = 0;
    for (std::size_t j = 0; j < gamma_hat.size(); ++j) {
        agree += gamma_hat[j] == gamma_true[j];
        tp += gamma_hat[j] == 1 && gamma_true[j] == 1;
        fp += gamma_hat[j] == 1 && gamma_true[j] == 0;
        fn += gamma_hat[j] == 0 && gamma_true[j] == 1;
    }
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(agree) / static_cast<double>(gamma_hat.size());
    m.f1 = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    return m;
}

/// ||C_hat - C0||_F^2 / (pq).
inline double mse_C(const Matrix& C_hat, const Matrix& C0) {
    if (C_hat.rows() != C0.rows() || C_hat.cols() != C0.cols()) {
        throw DimensionError("mse_C: coefficient matrices differ in shape");
    }
    return (C_hat - C0).squaredNorm() / static_cast<double>(C0.size());
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

/// Spectral density at frequency zero: Bartlett-windowed autocovariance sum
/// with lag window floor(sqrt(length)).
inline double spectral_density_zero(const Vector& x) {
    const Eigen::Index n = x.size();
    if (n < 2) return 0.0;
    const Vector c = x.array() - x.mean();
    const Eigen::Index lags = static_cast<Eigen::Index>(std::floor(std::sqrt(static_cast<double>(n))));
    double s = c.squaredNorm() / static_cast<double>(n);
    for (Eigen::Index h = 1; h <= lags && h < n; ++h) {
        const double gamma_h = c.head(n - h).dot(c.tail(n - h)) / static_cast<double>(n);
        s += 2.0 * (1.0 - static_cast<double>(h) / static_cast<double>(lags + 1)) * gamma_h;
    }
    return std::max(s, 0.0);
}

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

struct GewekeResult {
    double z = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
    bool degenerate = false;
    bool pass(double alpha = 0.05) const { return !degenerate && p_value > alpha; }
};

inline GewekeResult geweke_test(const Vector& series, double frac_a = 0.1, double frac_b = 0.5) {
    const Eigen::Index n = series.size();
    if (n < 100) throw DataError("geweke_test: series needs at least 100 values");
    if (!(frac_a > 0 && frac_b > 0 && frac_a + frac_b <= 1)) throw ConfigError("geweke_test: invalid fractions");
    const auto na = static_cast<Eigen::Index>(std::floor(frac_a * static_cast<double>(n)));
    const auto nb = static_cast<Eigen::Index>(std::floor(frac_b * static_cast<double>(n)));
    const Vector a = series.head(na);
    const Vector b = series.tail(nb);
    const double var = spectral_density_zero(a) / static_cast<double>(na) +
                       spectral_density_zero(b) / static_cast<double>(nb);
    GewekeResult res;
    if (!(var > 0.0) || !std::isfinite(var)) {
        res.degenerate = true;
        return res;
    }
    res.z = (a.mean() - b.mean()) / std::sqrt(var);
    res.p_value = normal_two_sided_p(res.z);
    return res;
}

/// Limiting distribution function of the Cramer-von Mises statistic: the
/// series in modified Bessel functions of order 1/4, summed until the terms
/// vanish. A fixed four-term cut decreases for large x and would let strongly
/// non-stationary series pass.
inline double cramer_von_mises_cdf(double x) {
    if (!(x > 0.0)) return 0.0;
    if (x > 50.0) return 1.0;  // upper tail below 1e-100
    constexpr double pi = 3.14159265358979323846;
    const double cutoff = -std::log(1e-16);
    double total = 0.0;
    for (int k = 0;; ++k) {
        const double u = (4.0 * k + 1.0) * (4.0 * k + 1.0) / (16.0 * x);
        if (u > cutoff) break;
        const double coef = std::exp(std::lgamma(k + 0.5) - std::lgamma(k + 1.0));
        const double z = coef * std::sqrt(4.0 * k + 1.0) / (std::pow(pi, 1.5) * std::sqrt(x));
        total += z * std::exp(-u) * std::cyl_bessel_k(0.25, u);
    }
    return std::min(total, 1.0);
}

struct HeidelbergerWelchResult {
    double stationarity_p = std::numeric_limits<double>::quiet_NaN();
    double initial_p = std::numeric_limits<double>::quiet_NaN();  // test on the whole series
    bool stationarity_pass = false;
    Eigen::Index start = 0;  // first retained index
    double mean = std::numeric_limits<double>::quiet_NaN();
    double halfwidth = std::numeric_limits<double>::quiet_NaN();
    double halfwidth_ratio = std::numeric_limits<double>::quiet_NaN();
    bool ratio_defined = false;
    bool halfwidth_pass = false;
    bool degenerate = false;
};

/// Heidelberger-Welch: Cramer-von Mises test on the scaled Brownian bridge of
/// partial sums, discarding 10% more of the start (up to half) until it passes;
/// then the half-width of the 95% interval for the mean relative to |mean|.
inline HeidelbergerWelchResult hw_tests(const Vector& series, double alpha = 0.05, double eps = 0.10) {
    const Eigen::Index n = series.size();
    if (n < 100) throw DataError("hw_tests: series needs at least 100 values");
    HeidelbergerWelchResult res;
    const double s0 = spectral_density_zero(series.tail(n - n / 2));
    if (!(s0 > 0.0)) {
        res.degenerate = true;
        return res;
    }
    const Eigen::Index step = n / 10;
    Vector kept;
    for (Eigen::Index start = 0; start <= n / 2; start += step) {
        kept = series.tail(n - start);
        const Eigen::Index m = kept.size();
        const double ybar = kept.mean();
        double partial = 0.0;
        double stat = 0.0;
        for (Eigen::Index t = 0; t < m; ++t) {
            partial += kept(t);
            const double bridge = partial - ybar * static_cast<double>(t + 1);
            stat += bridge * bridge;
        }
        stat /= static_cast<double>(m) * static_cast<double>(m) * s0;
        res.start = start;
        res.stationarity_p = 1.0 - cramer_von_mises_cdf(stat);
        if (start == 0) res.initial_p = res.stationarity_p;
        if (res.stationarity_p > alpha) {
            res.stationarity_pass = true;
            break;
        }
    }
    res.mean = kept.mean();
    res.halfwidth = 1.96 * std::sqrt(spectral_density_zero(kept) / static_cast<double>(kept.size()));
    // Relative precision is meaningless when the interval for the mean covers zero.
    res.ratio_defined = std::abs(res.mean) > res.halfwidth;
    if (res.ratio_defined) {
        res.halfwidth_ratio = res.halfwidth / std::abs(res.mean);
        res.halfwidth_pass = res.halfwidth_ratio < eps;
    }
    return res;
}

struct ParameterDiagnostics {
    std::string name;
    GewekeResult geweke;
    HeidelbergerWelchResult hw;
};

struct CodaReport {
    ParameterDiagnostics rank;
    std::vector<ParameterDiagnostics> entries;  // C(i, j), column-major
    double share_geweke = 0.0;
    double share_stationarity = 0.0;
    double share_halfwidth = 0.0;
};

inline ParameterDiagnostics diagnose_series(std::string name, const Vector& series) {
    ParameterDiagnostics d;
    d.name = std::move(name);
    d.geweke = geweke_test(series);
    d.hw = hw_tests(series);
    return d;
}

/// Geweke and Heidelberger-Welch results for r and for every entry of C,
/// with the share of C entries passing each test (p > 0.05, ratio < 0.10).
inline CodaReport coda_report(const ChainOutput& chain) {
    if (chain.draws.empty()) throw DataError("coda_report: chain has no draws");
    const auto m = static_cast<Eigen::Index>(chain.draws.size());
    const auto p = chain.draws.front().C.rows();
    const auto q = chain.draws.front().C.cols();
    CodaReport rep;
    Vector rs(m);
    for (Eigen::Index t = 0; t < m; ++t) rs(t) = chain.draws[t].r;
    rep.rank = diagnose_series("r", rs);

    int pass_g = 0, pass_s = 0, pass_h = 0;
    for (Eigen::Index j = 0; j < q; ++j) {
        for (Eigen::Index i = 0; i < p; ++i) {
            Vector s(m);
            for (Eigen::Index t = 0; t < m; ++t) s(t) = chain.draws[t].C(i, j);
            auto d = diagnose_series("C[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]", s);
            pass_g += d.geweke.pass();
            pass_s += d.hw.stationarity_pass;
            pass_h += d.hw.halfwidth_pass;
            rep.entries.push_back(std::move(d));
        }
    }
    const double total = static_cast<double>(p * q);
    rep.share_geweke = pass_g / total;
    rep.share_stationarity = pass_s / total;
    rep.share_halfwidth = pass_h / total;
    return rep;
}

}  // namespace bprr
