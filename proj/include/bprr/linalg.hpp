#pragma once

// Linear-algebra kernels and domain types shared by the whole library:
// vectorization, Kronecker and commutation matrices, response allocations,
// model state, coefficient assembly and the Gaussian likelihood.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "bprr/errors.hpp"

namespace bprr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Binary response allocation; 1 marks membership of the low-rank group.
using Gamma = std::vector<int>;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

// ---------------------------------------------------------------------------
// vec / Kronecker / commutation
// ---------------------------------------------------------------------------

/// Column-stacking vectorization.
inline Vector vec(const Matrix& m) {
    return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    if (v.size() != rows * cols) {
        throw DimensionError("unvec: vector of length " + std::to_string(v.size()) +
                             " cannot be reshaped to " + std::to_string(rows) + "x" +
                             std::to_string(cols));
    }
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

/// K_{m,n}: the mn x mn permutation with K * vec(M) = vec(M') for M of size m x n.
inline Matrix commutation_matrix(int m, int n) {
    if (m < 1 || n < 1) throw ConfigError("commutation_matrix: dimensions must be >= 1");
    Matrix k = Matrix::Zero(m * n, m * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) k(j + i * n, i + j * m) = 1.0;
    }
    return k;
}

/// Number of singular values above rel_tol * largest singular value.
inline int numerical_rank(const Matrix& m, double rel_tol = 1e-10) {
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<Matrix> svd(m);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    return static_cast<int>((s.array() > rel_tol * s(0)).count());
}

/// True when the Cholesky factorization of the symmetric part succeeds.
inline bool is_spd(const Matrix& m) {
    if (m.rows() != m.cols() || m.rows() == 0) return false;
    if (!m.allFinite()) return false;
    Eigen::LLT<Matrix> llt(m);
    return llt.info() == Eigen::Success;
}

inline Eigen::LLT<Matrix> checked_llt(const Matrix& m, const char* what) {
    Eigen::LLT<Matrix> llt(m);
    if (m.rows() != m.cols() || !m.allFinite() || llt.info() != Eigen::Success) {
        throw NumericalError(std::string(what) + ": matrix is not symmetric positive definite");
    }
    return llt;
}

inline double log_det_from_llt(const Eigen::LLT<Matrix>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double log_sum_exp(const Vector& v) {
    const double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
}

// ---------------------------------------------------------------------------
// Dataset / hyperparameters
// ---------------------------------------------------------------------------

struct Dataset {
    Matrix Y;  // n x q responses
    Matrix X;  // n x p predictors
    std::vector<std::string> response_names;
    std::vector<std::string> predictor_names;
    bool standardized = false;

    int n() const { return static_cast<int>(Y.rows()); }
    int q() const { return static_cast<int>(Y.cols()); }
    int p() const { return static_cast<int>(X.cols()); }

    void validate() const {
        if (Y.rows() < 1) throw DataError("dataset has no rows");
        if (X.rows() != Y.rows()) {
            throw DataError("Y has " + std::to_string(Y.rows()) + " rows but X has " +
                            std::to_string(X.rows()));
        }
        if (Y.cols() < 3) throw DataError("at least 3 responses are required (q >= 3)");
        if (X.cols() < 1) throw DataError("at least one predictor is required");
        if (!Y.allFinite() || !X.allFinite()) throw DataError("dataset contains non-finite values");
        if (!response_names.empty() && static_cast<int>(response_names.size()) != q()) {
            throw DataError("response_names length does not match q");
        }
        if (!predictor_names.empty() && static_cast<int>(predictor_names.size()) != p()) {
            throw DataError("predictor_names length does not match p");
        }
        if (standardized) {
            const double tol = 1e-10;
            if ((Y.colwise().mean().array().abs() > tol).any() ||
                (X.colwise().mean().array().abs() > tol).any()) {
                throw DataError("dataset flagged standardized but column means are not zero");
            }
        }
    }

    /// Rows [first, first + count).
    Dataset rows(int first, int count) const {
        Dataset out = *this;
        out.Y = Y.middleRows(first, count);
        out.X = X.middleRows(first, count);
        out.standardized = false;
        return out;
    }
};

struct Hyperparameters {
    double a_rho = 1.0;
    double b_rho = 1.0;
    double a = 0.5;  // prior variance of alpha_F entries
    double b = 0.5;  // prior variance of beta entries
    double d = 0.5;  // prior variance of delta entries
    double nu = 0.0;
    Matrix Psi;

    /// Non-informative defaults: a_rho = b_rho = 1, a = b = d = 0.5, nu = q + 1, Psi = I.
    static Hyperparameters defaults(int q) {
        Hyperparameters h;
        h.nu = q + 1.0;
        h.Psi = Matrix::Identity(q, q);
        return h;
    }

    void validate(int q) const {
        if (!(a_rho > 0 && b_rho > 0)) throw ConfigError("a_rho and b_rho must be positive");
        if (!(a > 0 && b > 0 && d > 0)) throw ConfigError("prior scales a, b, d must be positive");
        if (!(nu > q - 1)) throw ConfigError("nu must exceed q - 1");
        if (Psi.rows() != q || Psi.cols() != q) throw ConfigError("Psi must be q x q");
        if (!Psi.isApprox(Psi.transpose(), 1e-12) || !is_spd(Psi)) {
            throw ConfigError("Psi must be symmetric positive definite");
        }
    }
};

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

inline int count_ones(const Gamma& g) {
    int s = 0;
    for (int v : g) s += v;
    return s;
}

/// Valid allocations have 2 <= q_gamma <= q - 1; the reduced-rank baseline
/// additionally admits q_gamma == q.
inline bool is_valid_gamma(const Gamma& g, bool allow_all_low_rank = false) {
    const int q = static_cast<int>(g.size());
    for (int v : g) {
        if (v != 0 && v != 1) return false;
    }
    const int qg = count_ones(g);
    return qg >= 2 && (qg <= q - 1 || (allow_all_low_rank && qg == q));
}

inline std::string gamma_bits(const Gamma& g) {
    std::string s;
    s.reserve(g.size());
    for (int v : g) s.push_back(v ? '1' : '0');
    return s;
}

inline Gamma gamma_from_bits(const std::string& bits) {
    Gamma g;
    g.reserve(bits.size());
    for (char c : bits) {
        if (c != '0' && c != '1') throw DataError("invalid allocation bit string '" + bits + "'");
        g.push_back(c == '1');
    }
    return g;
}

class Allocation {
public:
    Allocation() = default;

    explicit Allocation(Gamma gamma, bool allow_all_low_rank = false) : gamma_(std::move(gamma)) {
        if (!is_valid_gamma(gamma_, allow_all_low_rank)) {
            throw ConfigError("invalid allocation " + gamma_bits(gamma_) +
                              ": requires 2 <= q_gamma <= q - 1");
        }
        q_gamma_ = count_ones(gamma_);
        perm_.reserve(gamma_.size());
        for (int j = 0; j < q(); ++j) {
            if (gamma_[j]) perm_.push_back(j);
        }
        for (int j = 0; j < q(); ++j) {
            if (!gamma_[j]) perm_.push_back(j);
        }
    }

    const Gamma& gamma() const { return gamma_; }
    int q() const { return static_cast<int>(gamma_.size()); }
    int q_gamma() const { return q_gamma_; }
    int q_full() const { return q() - q_gamma_; }

    /// perm()[k] is the original column shown at permuted position k.
    const std::vector<int>& perm() const { return perm_; }

    std::vector<int> inverse_perm() const {
        std::vector<int> inv(perm_.size());
        for (std::size_t k = 0; k < perm_.size(); ++k) inv[perm_[k]] = static_cast<int>(k);
        return inv;
    }

    std::string bits() const { return gamma_bits(gamma_); }

    friend bool operator==(const Allocation& a, const Allocation& b) { return a.gamma_ == b.gamma_; }

private:
    Gamma gamma_;
    int q_gamma_ = 0;
    std::vector<int> perm_;
};

/// Columns reordered into [low-rank group, full-rank group].
inline Matrix permute_columns(const Matrix& m, const Allocation& alloc) {
    Matrix out(m.rows(), m.cols());
    const auto& perm = alloc.perm();
    for (int k = 0; k < alloc.q(); ++k) out.col(k) = m.col(perm[k]);
    return out;
}

/// Inverse of permute_columns.
inline Matrix unpermute_columns(const Matrix& m, const Allocation& alloc) {
    Matrix out(m.rows(), m.cols());
    const auto& perm = alloc.perm();
    for (int k = 0; k < alloc.q(); ++k) out.col(perm[k]) = m.col(k);
    return out;
}

/// P' * Sigma * P for the allocation's permutation P.
inline Matrix permute_symmetric(const Matrix& sigma, const Allocation& alloc) {
    const auto& perm = alloc.perm();
    const int q = alloc.q();
    Matrix out(q, q);
    for (int i = 0; i < q; ++i) {
        for (int j = 0; j < q; ++j) out(i, j) = sigma(perm[i], perm[j]);
    }
    return out;
}

/// Largest admissible rank of the low-rank block, min(p, q_gamma) - 1.
inline int rank_max(int p, int q_gamma) { return std::min(p, q_gamma) - 1; }

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

struct ModelState {
    Allocation alloc;
    int r = 1;
    Matrix F;      // (q_gamma - r) x r
    Matrix B;      // p x r
    Matrix C2;     // p x (q - q_gamma)
    Matrix Sigma;  // q x q, original response order
    double rho = 0.5;

    /// A = [I_r; F].
    Matrix A() const {
        Matrix a(r + F.rows(), r);
        a.topRows(r).setIdentity();
        a.bottomRows(F.rows()) = F;
        return a;
    }

    Matrix C1() const { return B * A().transpose(); }

    /// Throws DimensionError when component shapes disagree with (gamma, r).
    void check_dimensions() const {
        const int qg = alloc.q_gamma();
        const int p = static_cast<int>(B.rows());
        auto fail = [&](const std::string& what) {
            throw DimensionError("model state: " + what + " (gamma=" + alloc.bits() +
                                 ", r=" + std::to_string(r) + ")");
        };
        if (r < 1 || r > qg - 1) fail("rank out of range");
        if (F.rows() != qg - r || F.cols() != r) fail("F has wrong shape");
        if (B.cols() != r || p < 1) fail("B has wrong shape");
        if (C2.rows() != p || C2.cols() != alloc.q_full()) fail("C2 has wrong shape");
        if (Sigma.rows() != alloc.q() || Sigma.cols() != alloc.q()) fail("Sigma has wrong shape");
    }
};

struct AssembledC {
    Matrix perm;  // [B A', C2] in permuted response order
    Matrix orig;  // same coefficients in original response order
};

inline AssembledC assemble_C(const ModelState& s) {
    s.check_dimensions();
    const int p = static_cast<int>(s.B.rows());
    AssembledC out;
    out.perm.resize(p, s.alloc.q());
    out.perm.leftCols(s.alloc.q_gamma()) = s.C1();
    out.perm.rightCols(s.alloc.q_full()) = s.C2;
    out.orig = unpermute_columns(out.perm, s.alloc);
    return out;
}

/// Gaussian log-likelihood of Y = X C + E with rows of E ~ N_q(0, Sigma),
/// evaluated in permuted response order.
inline double log_likelihood(const ModelState& s, const Dataset& data) {
    const auto c = assemble_C(s);
    if (data.q() != s.alloc.q() || data.p() != s.B.rows()) {
        throw DimensionError("log_likelihood: state and data dimensions disagree");
    }
    const Matrix sigma_perm = permute_symmetric(s.Sigma, s.alloc);
    const auto llt = checked_llt(sigma_perm, "log_likelihood: Sigma");
    const Matrix resid = permute_columns(data.Y, s.alloc) - data.X * c.perm;
    const Matrix white = llt.matrixL().solve(resid.transpose());
    const double n = data.n();
    const double q = data.q();
    return -0.5 * n * q * kLog2Pi - 0.5 * n * log_det_from_llt(llt) - 0.5 * white.squaredNorm();
}

// ---------------------------------------------------------------------------
// Selection operators (dense; intended for small instances and checks)
// ---------------------------------------------------------------------------

struct SelectionOperators {
    Matrix V1;  // q_gamma x q
    Matrix V2;  // (q - q_gamma) x q
    Matrix U1;  // nq x (q_gamma p)
    Matrix U2;  // nq x ((q - q_gamma) p)
};

inline SelectionOperators build_selection(const Allocation& alloc, const Matrix& X) {
    const int q = alloc.q();
    const int qg = alloc.q_gamma();
    SelectionOperators ops;
    ops.V1 = Matrix::Zero(qg, q);
    ops.V1.leftCols(qg).setIdentity();
    ops.V2 = Matrix::Zero(q - qg, q);
    ops.V2.rightCols(q - qg).setIdentity();
    ops.U1 = kron(ops.V1.transpose(), X);
    ops.U2 = kron(ops.V2.transpose(), X);
    return ops;
}

}  // namespace bprr
