#pragma once

// Laplace-approximated marginal evidence of an allocation and rank.
//
// The full-rank block C2 is integrated out analytically, which leaves
//   vec(Y_perm) ~ N(U1 vec(C1), Sigma (x) I_n + d (V2'V2) (x) XX').
// Rotating the rows by the eigenvectors W of XX' = W diag(lambda) W'
// block-diagonalizes this covariance: row k of W'Y_perm is independent
// q-variate normal with covariance S_k = Sigma_perm + d lambda_k V2'V2.
// Every solve, log-determinant and GLS normal equation below works on those
// n small blocks instead of the nq x nq matrix.

#include <Eigen/Eigenvalues>

#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bprr/distributions.hpp"
#include "bprr/linalg.hpp"

namespace bprr {

struct GrrrConfig {
    double tol = 1e-6;  // relative log-likelihood change that ends the alternation
    int max_iter = 500;
    int n_restarts = 3;
};

// ---------------------------------------------------------------------------
// Restriction vec(V1' A) = G psi + g
// ---------------------------------------------------------------------------

struct GrrrRestriction {
    Matrix G;  // qr x r(q_gamma - r), one unit entry per column
    Vector g;  // qr, ones at the identity-block entries
    int q = 0;
    int q_gamma = 0;
    int r = 0;
};

/// psi = vec(F) (column-stacked). Column j of V1'A is (e_j; F(:, j); 0).
inline GrrrRestriction build_restriction(const Allocation& alloc, int r) {
    const int q = alloc.q();
    const int qg = alloc.q_gamma();
    if (r < 1 || r > qg - 1) throw ConfigError("build_restriction: rank out of range");
    const int m = qg - r;
    GrrrRestriction out;
    out.q = q;
    out.q_gamma = qg;
    out.r = r;
    out.G = Matrix::Zero(q * r, r * m);
    out.g = Vector::Zero(q * r);
    for (int j = 0; j < r; ++j) {
        out.g(j * q + j) = 1.0;
        for (int i = 0; i < m; ++i) out.G(j * q + r + i, j * m + i) = 1.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row rotation shared by every allocation of one dataset
// ---------------------------------------------------------------------------

struct RotatedData {
    Vector lambda;  // eigenvalues of XX' (clamped at zero)
    Matrix W;       // n x n orthonormal eigenvectors
    Matrix X;       // W' X
    Matrix Y;       // W' Y, original response order
    int n = 0;

    static RotatedData from(const Dataset& data) {
        RotatedData out;
        out.n = data.n();
        Eigen::SelfAdjointEigenSolver<Matrix> eig(data.X * data.X.transpose());
        if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition of XX' failed");
        out.W = eig.eigenvectors();
        out.lambda = eig.eigenvalues().cwiseMax(0.0);
        out.X = out.W.transpose() * data.X;
        out.Y = out.W.transpose() * data.Y;
        return out;
    }
};

/// Factored Sigma_y = Sigma_perm (x) I_n + d (V2'V2) (x) XX' for one allocation.
class MarginalCovariance {
public:
    MarginalCovariance(const RotatedData& rot, const Matrix& sigma, const Allocation& alloc, double d)
        : rot_(&rot), alloc_(alloc), d_(d) {
        const int q = alloc.q();
        if (sigma.rows() != q || sigma.cols() != q) throw DimensionError("Sigma must be q x q");
        sigma_perm_ = permute_symmetric(sigma, alloc);
        y_perm_ = permute_columns(rot.Y, alloc);
        blocks_.reserve(rot.n);
        inverses_.reserve(rot.n);
        log_det_ = 0.0;
        const Matrix eye = Matrix::Identity(q, q);
        for (int k = 0; k < rot.n; ++k) {
            Matrix s = sigma_perm_;
            const int qf = alloc.q_full();
            s.bottomRightCorner(qf, qf).diagonal().array() += d * rot.lambda(k);
            blocks_.emplace_back(s);
            if (blocks_.back().info() != Eigen::Success) {
                throw NumericalError("marginal covariance: Sigma is not positive definite");
            }
            log_det_ += log_det_from_llt(blocks_.back());
            inverses_.push_back(blocks_.back().solve(eye));
        }
        sy_.resize(rot.n, q);
        yy_ = 0.0;
        for (int k = 0; k < rot.n; ++k) {
            sy_.row(k).noalias() = y_perm_.row(k) * inverses_[k];
            yy_ += sy_.row(k).dot(y_perm_.row(k));
        }
    }

    const Allocation& alloc() const { return alloc_; }
    const RotatedData& rotated() const { return *rot_; }
    const Matrix& sigma_perm() const { return sigma_perm_; }
    /// W' Y_perm.
    const Matrix& y() const { return y_perm_; }
    double log_det() const { return log_det_; }
    const Matrix& block_inverse(int k) const { return inverses_[k]; }
    /// Row k holds (S_k^{-1} y_k)' for the rotated response row y_k.
    const Matrix& sy() const { return sy_; }
    /// sum_k y_k' S_k^{-1} y_k.
    double yy() const { return yy_; }
    int n() const { return rot_->n; }
    int q() const { return alloc_.q(); }

    /// Sigma_y^{-1} v for v = vec of an n x q matrix in permuted order.
    Vector solve(const Vector& v) const {
        const Matrix rotated = rot_->W.transpose() * unvec(v, n(), q());
        Matrix sol(n(), q());
        for (int k = 0; k < n(); ++k) {
            sol.row(k) = blocks_[k].solve(rotated.row(k).transpose()).transpose();
        }
        return vec(rot_->W * sol);
    }

    /// log N(W'Y_perm | mean_rot, blockdiag(S_k)) where mean_rot holds rotated row means.
    double log_density(const Matrix& mean_rot) const {
        const Matrix resid = (y_perm_ - mean_rot).transpose();
        Vector col(q());
        double quad = 0.0;
        for (int k = 0; k < n(); ++k) {
            col = resid.col(k);
            blocks_[k].matrixL().solveInPlace(col);
            quad += col.squaredNorm();
        }
        return -0.5 * (static_cast<double>(n()) * q() * kLog2Pi + log_det_ + quad);
    }

    /// Dense Sigma_y; for checks on small instances.
    Matrix dense() const {
        const Matrix xxt = rot_->W * rot_->lambda.asDiagonal() * rot_->W.transpose();
        Matrix dmat = Matrix::Zero(q(), q());
        dmat.bottomRightCorner(alloc_.q_full(), alloc_.q_full()).setIdentity();
        return kron(sigma_perm_, Matrix::Identity(n(), n())) + d_ * kron(dmat, xxt);
    }

    /// K_{n,q} Sigma_y K_{n,q}': the covariance of vec(Y_perm').
    Matrix dense_twiddle() const {
        const Matrix k = commutation_matrix(n(), q());
        return k * dense() * k.transpose();
    }

private:
    const RotatedData* rot_;
    Allocation alloc_;
    double d_;
    Matrix sigma_perm_;
    Matrix y_perm_;
    std::vector<Eigen::LLT<Matrix>> blocks_;
    std::vector<Matrix> inverses_;
    Matrix sy_;
    double yy_ = 0.0;
    double log_det_ = 0.0;
};

/// Rotated row means [W'X C1, 0] for C1 = B A'.
inline Matrix rotated_mean(const MarginalCovariance& mc, const Matrix& C1) {
    Matrix mean = Matrix::Zero(mc.n(), mc.q());
    mean.leftCols(C1.cols()) = mc.rotated().X * C1;
    return mean;
}

/// log N_{nq}(vec(Y_perm) | U1 c1, Sigma_y).
inline double marginal_loglik(const Vector& c1, const Matrix& sigma, const Allocation& alloc,
                              const Dataset& data, const Hyperparameters& hyper) {
    const auto rot = RotatedData::from(data);
    const MarginalCovariance mc(rot, sigma, alloc, hyper.d);
    return mc.log_density(rotated_mean(mc, unvec(c1, data.p(), alloc.q_gamma())));
}

// ---------------------------------------------------------------------------
// GRRR maximum likelihood by alternating GLS
// ---------------------------------------------------------------------------

struct GrrrResult {
    Matrix A_hat;  // q_gamma x r with identity top block
    Matrix B_hat;  // p x r
    double loglik = -std::numeric_limits<double>::infinity();
    bool converged = false;
    int iterations = 0;
    std::vector<double> trace;  // log-likelihood after each half-step of the returned run
};

namespace detail {

struct SingularStep {};

/// Maximizes over F with B fixed: psi = (G'M_B G)^{-1} G'(n_B - M_B g).
inline Matrix grrr_update_F(const MarginalCovariance& mc, const Matrix& B, int r) {
    const int qg = mc.alloc().q_gamma();
    const int m = qg - r;
    const Matrix Z = mc.rotated().X * B;  // rows z_k' = (B' x_k)'
    Matrix lhs = Matrix::Zero(r * m, r * m);
    Vector rhs = Vector::Zero(r * m);
    Vector w(m);
    for (int k = 0; k < mc.n(); ++k) {
        const Matrix& sinv = mc.block_inverse(k);
        // w = Sinv[r:qg, :] (y_k - [z_k; 0]) = (Sinv y_k)[r:qg] - Sinv[r:qg, :r] z_k
        w = mc.sy().row(k).segment(r, m).transpose();
        w.noalias() -= sinv.block(r, 0, m, r) * Z.row(k).transpose();
        for (int j = 0; j < r; ++j) {
            const double zj = Z(k, j);
            rhs.segment(j * m, m) += zj * w;
            for (int jj = 0; jj <= j; ++jj) lhs.block(j * m, jj * m, m, m) += (zj * Z(k, jj)) * sinv.block(r, r, m, m);
        }
    }
    Eigen::LLT<Matrix> llt(lhs);  // reads the lower triangle only
    if (llt.info() != Eigen::Success) throw SingularStep{};
    return unvec(llt.solve(rhs), m, r);
}

/// Per-row products with A: P_k = A' Sinv_k[:qg, :qg] A and h_k = A' (Sinv y_k)[:qg].
struct ProjectedRows {
    Matrix P;  // r x (n r); block k is P_k
    Matrix h;  // n x r
};

inline ProjectedRows project_rows(const MarginalCovariance& mc, const Matrix& A) {
    const int qg = mc.alloc().q_gamma();
    const int r = static_cast<int>(A.cols());
    ProjectedRows out;
    out.P.resize(r, static_cast<Eigen::Index>(mc.n()) * r);
    out.h.noalias() = mc.sy().leftCols(qg) * A;
    Matrix sa(qg, r);
    for (int k = 0; k < mc.n(); ++k) {
        sa.noalias() = mc.block_inverse(k).topLeftCorner(qg, qg) * A;
        out.P.middleCols(k * r, r).noalias() = A.transpose() * sa;
    }
    return out;
}

/// Maximizes over B with A fixed, solving for vec(B') (index l * r + j = B(l, j)).
/// Row k contributes (x_k x_k') (x) P_k to the normal matrix.
inline Matrix grrr_update_B(const MarginalCovariance& mc, const Matrix& A, const ProjectedRows& pr) {
    const int r = static_cast<int>(A.cols());
    const Matrix& X = mc.rotated().X;
    const int p = static_cast<int>(X.cols());
    const Eigen::Index dim = static_cast<Eigen::Index>(p) * r;
    Matrix lhs = Matrix::Zero(dim, dim);
    double* out = lhs.data();
    for (int k = 0; k < mc.n(); ++k) {
        const double* pk = pr.P.data() + static_cast<Eigen::Index>(k) * r * r;
        // Lower block triangle only; LLT reads nothing else.
        for (int ll = 0; ll < p; ++ll) {
            for (int l = ll; l < p; ++l) {
                const double xx = X(k, l) * X(k, ll);
                for (int b = 0; b < r; ++b) {
                    double* dst = out + (static_cast<Eigen::Index>(ll) * r + b) * dim + static_cast<Eigen::Index>(l) * r;
                    const double* src = pk + b * r;
                    for (int a = 0; a < r; ++a) dst[a] += xx * src[a];
                }
            }
        }
    }
    const Matrix rhs = (X.transpose() * pr.h).transpose();  // r x p, column l = block l
    Eigen::LLT<Matrix> llt(lhs);
    if (llt.info() != Eigen::Success) throw SingularStep{};
    return unvec(llt.solve(vec(rhs)), r, p).transpose();
}

inline Matrix grrr_update_B(const MarginalCovariance& mc, const Matrix& A) {
    return grrr_update_B(mc, A, project_rows(mc, A));
}

inline Matrix stack_identity(const Matrix& F, int r) {
    Matrix a(r + F.rows(), r);
    a.topRows(r).setIdentity();
    a.bottomRows(F.rows()) = F;
    return a;
}

/// Log-likelihood of C1 = B A' from the expansion
///   sum_k e_k' Sinv_k e_k = yy - 2 sum_k z_k' h_k + sum_k z_k' P_k z_k,  z_k = B' x_k.
inline double grrr_loglik(const MarginalCovariance& mc, const ProjectedRows& pr, const Matrix& B) {
    const Matrix Z = mc.rotated().X * B;
    const int r = static_cast<int>(B.cols());
    double quad = mc.yy() - 2.0 * Z.cwiseProduct(pr.h).sum();
    for (int k = 0; k < mc.n(); ++k) {
        const auto z = Z.row(k);
        quad += z * pr.P.middleCols(k * r, r) * z.transpose();
    }
    return -0.5 * (static_cast<double>(mc.n()) * mc.q() * kLog2Pi + mc.log_det() + quad);
}

inline double grrr_loglik(const MarginalCovariance& mc, const Matrix& A, const Matrix& B) {
    return grrr_loglik(mc, project_rows(mc, A), B);
}

inline std::uint64_t key_hash(const Gamma& gamma, int r, int restart) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 1099511628211ULL;
    };
    for (int v : gamma) mix(static_cast<std::uint64_t>(v));
    mix(static_cast<std::uint64_t>(r));
    mix(static_cast<std::uint64_t>(restart));
    return h;
}

struct GrrrStart {
    Matrix F;
    Matrix B;
};

/// Rank-r truncation of the ridge estimate of C1, renormalized so that A has
/// an identity top block.
inline std::optional<GrrrStart> svd_start(const MarginalCovariance& mc, int r, double prior_b) {
    const int qg = mc.alloc().q_gamma();
    const Matrix& X = mc.rotated().X;
    const int p = static_cast<int>(X.cols());
    const Matrix gram = X.transpose() * X + Matrix::Identity(p, p) / prior_b;
    const Matrix c1 = gram.llt().solve(X.transpose() * mc.y().leftCols(qg));
    Eigen::JacobiSVD<Matrix> svd(c1, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Matrix b0 = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal();
    const Matrix a0 = svd.matrixV().leftCols(r);
    const Matrix top = a0.topRows(r);
    Eigen::FullPivLU<Matrix> lu(top);
    if (!lu.isInvertible() || std::abs(lu.determinant()) < 1e-8) return std::nullopt;
    const Matrix top_inv = lu.inverse();
    const Matrix a = a0 * top_inv;
    GrrrStart s;
    s.F = a.bottomRows(qg - r);
    s.B = b0 * top.transpose();
    if (!s.F.allFinite() || !s.B.allFinite()) return std::nullopt;
    return s;
}

}  // namespace detail

/// Alternating maximization of the C2-marginalized likelihood over (F, B),
/// starting from every candidate in `starts`; the best run is returned.
inline GrrrResult grrr_mle_from(const MarginalCovariance& mc, int r, const GrrrConfig& config,
                                const std::vector<detail::GrrrStart>& starts) {
    GrrrResult best;
    bool have_best = false;
    for (const auto& start : starts) {
        GrrrResult run;
        Matrix F = start.F;
        Matrix B = start.B;
        Matrix A = detail::stack_identity(F, r);
        double ll = detail::grrr_loglik(mc, A, B);
        run.trace.push_back(ll);
        try {
            double stretch = 1.5;
            for (int it = 1; it <= config.max_iter; ++it) {
                const Matrix F_old = F;
                const Matrix B_old = B;
                F = detail::grrr_update_F(mc, B, r);
                A = detail::stack_identity(F, r);
                const auto proj = detail::project_rows(mc, A);
                run.trace.push_back(detail::grrr_loglik(mc, proj, B));
                B = detail::grrr_update_B(mc, A, proj);
                double next = detail::grrr_loglik(mc, proj, B);
                run.trace.push_back(next);
                run.iterations = it;
                // Extrapolate along the last alternation; kept only if it improves.
                if (it > 2) {
                    const Matrix F_ext = F_old + stretch * (F - F_old);
                    const Matrix B_ext = B_old + stretch * (B - B_old);
                    const Matrix A_ext = detail::stack_identity(F_ext, r);
                    const double ll_ext = detail::grrr_loglik(mc, A_ext, B_ext);
                    if (ll_ext > next) {
                        F = F_ext;
                        B = B_ext;
                        A = A_ext;
                        next = ll_ext;
                        run.trace.push_back(next);
                        stretch = std::min(stretch * 1.5, 64.0);
                    } else {
                        stretch = 1.5;
                    }
                }
                const double change = std::abs(next - ll);
                ll = next;
                if (change <= config.tol * std::max(1.0, std::abs(ll))) {
                    run.converged = true;
                    break;
                }
            }
        } catch (const detail::SingularStep&) {
            run.converged = false;
        }
        if (!std::isfinite(ll)) continue;
        run.A_hat = A;
        run.B_hat = B;
        run.loglik = ll;
        if (!have_best || run.loglik > best.loglik) {
            best = std::move(run);
            have_best = true;
        }
    }
    if (!have_best) throw NumericalError("grrr_mle: no start produced a finite likelihood");
    return best;
}

/// Start list: SVD warm start, an optional caller-supplied start, then
/// n_restarts - 1 standard-normal restarts seeded from (gamma, r).
inline std::vector<detail::GrrrStart> grrr_starts(const MarginalCovariance& mc, int r,
                                                  const GrrrConfig& config, double prior_b,
                                                  const std::optional<detail::GrrrStart>& warm = {}) {
    const int qg = mc.alloc().q_gamma();
    const int p = static_cast<int>(mc.rotated().X.cols());
    std::vector<detail::GrrrStart> starts;
    if (auto s = detail::svd_start(mc, r, prior_b)) {
        starts.push_back(std::move(*s));
    } else {
        Rng rng(detail::key_hash(mc.alloc().gamma(), r, 0), 7);
        starts.push_back({rng.normal_matrix(qg - r, r), rng.normal_matrix(p, r)});
    }
    if (warm) starts.push_back(*warm);
    for (int k = 1; k < config.n_restarts; ++k) {
        Rng rng(detail::key_hash(mc.alloc().gamma(), r, k), 7);
        starts.push_back({rng.normal_matrix(qg - r, r), rng.normal_matrix(p, r)});
    }
    return starts;
}

inline GrrrResult grrr_mle(const Dataset& data, const Matrix& sigma, const Allocation& alloc, int r,
                           const GrrrConfig& config = {}, const Hyperparameters* hyper = nullptr) {
    const Hyperparameters h = hyper ? *hyper : Hyperparameters::defaults(data.q());
    const auto rot = RotatedData::from(data);
    const MarginalCovariance mc(rot, sigma, alloc, h.d);
    if (r < 1 || r > alloc.q_gamma() - 1 || r > data.p()) throw ConfigError("grrr_mle: rank out of range");
    return grrr_mle_from(mc, r, config, grrr_starts(mc, r, config, h.b));
}

/// -1/2 (p r + (q_gamma - r) r) log n.
inline double laplace_penalty(int p, int q_gamma, int r, int n) {
    return -0.5 * (static_cast<double>(p) * r + static_cast<double>(q_gamma - r) * r) *
           std::log(static_cast<double>(n));
}

struct EvidenceEntry {
    double log_evidence = 0.0;
    Matrix A_hat;
    Matrix B_hat;
    bool converged = false;
    int iterations = 0;
};

inline EvidenceEntry evidence_from(const GrrrResult& mle, int p, int q_gamma, int r, int n) {
    EvidenceEntry e;
    e.log_evidence = mle.loglik + laplace_penalty(p, q_gamma, r, n);
    e.A_hat = mle.A_hat;
    e.B_hat = mle.B_hat;
    e.converged = mle.converged;
    e.iterations = mle.iterations;
    return e;
}

/// log f~_r(Y | Sigma, gamma, r): marginal log-likelihood at the GRRR MLE minus
/// the parameter-count penalty.
inline EvidenceEntry log_laplace_evidence(const Dataset& data, const Matrix& sigma,
                                          const Allocation& alloc, int r, const GrrrConfig& config,
                                          const Hyperparameters& hyper) {
    const auto mle = grrr_mle(data, sigma, alloc, r, config, &hyper);
    return evidence_from(mle, data.p(), alloc.q_gamma(), r, data.n());
}

// ---------------------------------------------------------------------------
// Evidence table
// ---------------------------------------------------------------------------

/// Memoized evidence values keyed by (gamma, r); valid for one Sigma snapshot.
class EvidenceTable {
public:
    using Key = std::pair<std::string, int>;

    std::optional<EvidenceEntry> find(const Gamma& gamma, int r) const {
        std::lock_guard lock(mutex_);
        auto it = entries_.find({gamma_bits(gamma), r});
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    /// Inserts unless present; returns the stored entry.
    EvidenceEntry insert(const Gamma& gamma, int r, EvidenceEntry e) {
        std::lock_guard lock(mutex_);
        auto [it, inserted] = entries_.try_emplace({gamma_bits(gamma), r}, std::move(e));
        return it->second;
    }

    void clear() {
        std::lock_guard lock(mutex_);
        entries_.clear();
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return entries_.size();
    }

    std::size_t nonconverged() const {
        std::lock_guard lock(mutex_);
        std::size_t c = 0;
        for (const auto& [k, e] : entries_) c += e.converged ? 0 : 1;
        return c;
    }

private:
    mutable std::mutex mutex_;
    std::map<Key, EvidenceEntry> entries_;
};

/// Evidence computations for one dataset under the current Sigma snapshot.
///
/// Holds the row rotation, per-allocation factored covariances, and the
/// evidence table. MLEs from earlier snapshots are kept only as extra
/// starting points for the alternation.
class EvidenceEngine {
public:
    EvidenceEngine(const Dataset& data, const Hyperparameters& hyper, GrrrConfig config)
        : data_(&data), hyper_(hyper), config_(config), rot_(RotatedData::from(data)) {}
    // Cached covariances point into rot_.
    EvidenceEngine(const EvidenceEngine&) = delete;
    EvidenceEngine& operator=(const EvidenceEngine&) = delete;

    void set_sigma(const Matrix& sigma) {
        sigma_ = sigma;
        table_.clear();
        covariances_.clear();
    }
    const Matrix& sigma() const { return sigma_; }
    EvidenceTable& table() { return table_; }
    const GrrrConfig& config() const { return config_; }
    const RotatedData& rotated() const { return rot_; }
    std::size_t evaluations() const { return evaluations_; }
    std::size_t nonconverged_total() const { return nonconverged_; }

    /// Largest rank evaluated for an allocation.
    int max_rank(const Allocation& alloc) const {
        return std::min(data_->p(), alloc.q_gamma()) - 1;
    }

    const MarginalCovariance& covariance(const Allocation& alloc) {
        auto key = alloc.bits();
        auto it = covariances_.find(key);
        if (it == covariances_.end()) {
            it = covariances_.emplace(key, MarginalCovariance(rot_, sigma_, alloc, hyper_.d)).first;
        }
        return it->second;
    }

    EvidenceEntry evidence(const Allocation& alloc, int r) {
        if (auto hit = table_.find(alloc.gamma(), r)) return *hit;
        const auto& mc = covariance(alloc);
        // Once a key has been maximized, its previous MLE is the only start:
        // Sigma moves little between iterations, so the optimum stays nearby.
        const auto wkey = std::make_pair(alloc.bits(), r);
        std::vector<detail::GrrrStart> starts;
        if (auto it = warm_.find(wkey); it != warm_.end()) {
            starts.push_back(it->second);
        } else {
            starts = grrr_starts(mc, r, config_, hyper_.b);
        }
        const auto mle = grrr_mle_from(mc, r, config_, starts);
        ++evaluations_;
        if (!mle.converged) ++nonconverged_;
        warm_[wkey] = {mle.A_hat.bottomRows(alloc.q_gamma() - r), mle.B_hat};
        return table_.insert(alloc.gamma(), r,
                             evidence_from(mle, data_->p(), alloc.q_gamma(), r, data_->n()));
    }

    /// log f~_r for r = 1..r_max.
    Vector rank_log_evidence(const Allocation& alloc) {
        const int rmax = max_rank(alloc);
        if (rmax < 1) throw ConfigError("allocation " + alloc.bits() + " admits no valid rank");
        Vector e(rmax);
        for (int r = 1; r <= rmax; ++r) e(r - 1) = evidence(alloc, r).log_evidence;
        return e;
    }

    /// log f~_gamma = logsumexp_r(log f~_r) - log r_max.
    double log_f_gamma(const Allocation& alloc) {
        const Vector e = rank_log_evidence(alloc);
        if (e.size() == 1) return e(0);
        return log_sum_exp(e) - std::log(static_cast<double>(e.size()));
    }

private:
    const Dataset* data_;
    Hyperparameters hyper_;
    GrrrConfig config_;
    RotatedData rot_;
    Matrix sigma_;
    EvidenceTable table_;
    std::map<std::string, MarginalCovariance> covariances_;
    std::map<std::pair<std::string, int>, detail::GrrrStart> warm_;
    std::size_t evaluations_ = 0;
    std::size_t nonconverged_ = 0;
};

/// Stand-alone log f~_gamma; memoizes per-rank values in `table`.
inline double log_f_gamma(const Dataset& data, const Matrix& sigma, const Allocation& alloc,
                          const GrrrConfig& config, EvidenceTable& table,
                          const Hyperparameters& hyper) {
    const int rmax = std::min(data.p(), alloc.q_gamma()) - 1;
    if (rmax < 1) throw ConfigError("allocation " + alloc.bits() + " admits no valid rank");
    std::optional<RotatedData> rot;
    std::optional<MarginalCovariance> mc;
    Vector e(rmax);
    for (int r = 1; r <= rmax; ++r) {
        auto hit = table.find(alloc.gamma(), r);
        if (!hit) {
            if (!mc) {
                rot.emplace(RotatedData::from(data));
                mc.emplace(*rot, sigma, alloc, hyper.d);
            }
            const auto mle = grrr_mle_from(*mc, r, config, grrr_starts(*mc, r, config, hyper.b));
            hit = table.insert(alloc.gamma(), r, evidence_from(mle, data.p(), alloc.q_gamma(), r, data.n()));
        }
        e(r - 1) = hit->log_evidence;
    }
    if (rmax == 1) return e(0);
    return log_sum_exp(e) - std::log(static_cast<double>(rmax));
}

}  // namespace bprr
