#pragma once

// Seeded random number streams and the distribution families used by the
// sampler: multivariate normal, inverse Wishart, beta, Bernoulli, categorical.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "bprr/errors.hpp"
#include "bprr/linalg.hpp"

namespace bprr {

/// A reproducible random stream identified by (seed, stream_id).
///
/// Distinct stream ids give statistically independent streams: the engine
/// state is expanded from both words through std::seed_seq, so parallel
/// replicates can each own a stream without coordination.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream_id = 0)
        : seed_(seed), stream_id_(stream_id) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream_id),
                          static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
        engine_.seed(seq);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    /// Child stream sharing the seed; used to hand out per-task streams.
    Rng substream(std::uint64_t id) const { return Rng(seed_, stream_id_ * 0x100000001b3ULL + id + 1); }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double normal() { return normal_(engine_); }
    double gamma(double shape, double scale = 1.0) {
        return std::gamma_distribution<double>(shape, scale)(engine_);
    }
    double chi_squared(double dof) { return gamma(0.5 * dof, 2.0); }
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

    Vector normal_vector(Eigen::Index k) {
        Vector z(k);
        for (Eigen::Index i = 0; i < k; ++i) z(i) = normal();
        return z;
    }
    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix z(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j) {
            for (Eigen::Index i = 0; i < rows; ++i) z(i, j) = normal();
        }
        return z;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

inline Vector mvn_sample(const Vector& mean, const Matrix& cov, Rng& rng) {
    if (cov.rows() != mean.size()) throw DimensionError("mvn_sample: mean/cov size mismatch");
    const auto llt = checked_llt(cov, "mvn_sample: covariance");
    return mean + llt.matrixL() * rng.normal_vector(mean.size());
}

struct GaussianDraw {
    Vector mean;
    Vector draw;
};

/// Draws from N(P^{-1} h, P^{-1}) given the precision P and the linear term h.
inline GaussianDraw mvn_sample_canonical(const Vector& h, const Matrix& precision, Rng& rng,
                                         const char* what = "posterior precision") {
    if (precision.rows() != h.size()) throw DimensionError("mvn_sample_canonical: size mismatch");
    const auto llt = checked_llt(precision, what);
    GaussianDraw out;
    out.mean = llt.solve(h);
    out.draw = out.mean + llt.matrixU().solve(rng.normal_vector(h.size()));
    return out;
}

inline double mvn_logpdf(const Vector& x, const Vector& mean, const Matrix& cov) {
    const auto llt = checked_llt(cov, "mvn_logpdf: covariance");
    const Vector z = llt.matrixL().solve(x - mean);
    return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + log_det_from_llt(llt) + z.squaredNorm());
}

/// Draw from IW_q(nu, Psi): Bartlett decomposition of W ~ Wishart(nu, Psi^{-1}),
/// returning W^{-1} through triangular solves.
inline Matrix inv_wishart_sample(double nu, const Matrix& psi, Rng& rng) {
    const Eigen::Index q = psi.rows();
    if (psi.cols() != q || q == 0) throw DimensionError("inv_wishart_sample: Psi must be square");
    if (!(nu > static_cast<double>(q) - 1.0)) {
        throw ConfigError("inv_wishart_sample: degrees of freedom must exceed q - 1");
    }
    const auto psi_llt = checked_llt(psi, "inv_wishart_sample: Psi");
    const Matrix psi_inv = psi_llt.solve(Matrix::Identity(q, q));
    const auto inv_llt = checked_llt(0.5 * (psi_inv + psi_inv.transpose()), "inv_wishart_sample: Psi^-1");

    Matrix bartlett = Matrix::Zero(q, q);
    for (Eigen::Index i = 0; i < q; ++i) {
        bartlett(i, i) = std::sqrt(rng.chi_squared(nu - static_cast<double>(i)));
        for (Eigen::Index j = 0; j < i; ++j) bartlett(i, j) = rng.normal();
    }
    // W = (L A)(L A)'; W^{-1} = T' T with T = (L A)^{-1}.
    const Matrix la = inv_llt.matrixL() * bartlett;
    const Matrix t = la.triangularView<Eigen::Lower>().solve(Matrix::Identity(q, q));
    Matrix out = t.transpose() * t;
    return 0.5 * (out + out.transpose());
}

inline double beta_sample(double a, double b, Rng& rng) {
    if (!(a > 0 && b > 0)) throw ConfigError("beta_sample: shape parameters must be positive");
    for (;;) {
        const double x = rng.gamma(a);
        const double y = rng.gamma(b);
        const double v = x / (x + y);
        if (v > 0.0 && v < 1.0) return v;
    }
}

inline int bernoulli(double p, Rng& rng) { return rng.uniform() < p ? 1 : 0; }

/// Index j drawn with probability exp(lw_j - logsumexp(lw)).
inline int categorical(const Vector& log_weights, Rng& rng) {
    if (log_weights.size() == 0) throw ConfigError("categorical: empty weight vector");
    const double mx = log_weights.maxCoeff();
    if (!(mx > -std::numeric_limits<double>::infinity()) || std::isnan(mx)) {
        throw NumericalError("categorical: all weights are zero");
    }
    const Vector w = (log_weights.array() - mx).exp().matrix();
    const double u = rng.uniform() * w.sum();
    double acc = 0.0;
    int last_positive = 0;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
        if (w(j) <= 0.0) continue;
        acc += w(j);
        last_positive = static_cast<int>(j);
        if (u < acc) return last_positive;
    }
    return last_positive;
}

}  // namespace bprr
