#pragma once

// Partially collapsed Gibbs sampler for Bayesian partial reduced-rank
// regression. One iteration updates, in order: the allocation gamma (MSSS on
// the Laplace-approximated marginal posterior), the rank r, delta = vec(C2),
// alpha_F = vec(F'), beta = vec(B), Sigma and rho.

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bprr/distributions.hpp"
#include "bprr/evidence.hpp"
#include "bprr/linalg.hpp"

namespace bprr {

enum class ModelKind {
    bprr,          // gamma and r sampled
    prr_fixed,     // gamma pinned, r sampled
    reduced_rank,  // all responses low-rank, r sampled
    full_rank,     // no low-rank block (fitted by fit_fr)
};

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::bprr: return "bprr";
        case ModelKind::prr_fixed: return "prr_star";
        case ModelKind::reduced_rank: return "rr";
        case ModelKind::full_rank: return "fr";
    }
    return "unknown";
}

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "bprr") return ModelKind::bprr;
    if (s == "prr_star" || s == "prr*") return ModelKind::prr_fixed;
    if (s == "rr") return ModelKind::reduced_rank;
    if (s == "fr") return ModelKind::full_rank;
    throw ConfigError("unknown model '" + s + "' (expected bprr, fr, rr or prr_star)");
}

/// Column order of C^(m) from which the auxiliary prefixes C1* and B* are cut.
/// previous: permuted by the previous allocation gamma^(m).
/// current: permuted by the newly drawn gamma^(m+1), so every prefix column
/// is the previous coefficient of the same response.
enum class AuxiliaryOrder { previous, current };

struct SamplerConfig {
    int n_iter = 5000;
    int burn_in = 2000;
    int thin = 1;
    std::uint64_t seed = 1;
    std::uint64_t stream = 0;
    GrrrConfig grrr;
    std::optional<ModelState> init;
    ModelKind kind = ModelKind::bprr;
    std::optional<Gamma> fixed_gamma;  // required for prr_fixed
    /// Multiplier on every log-evidence; 1 is the model, 0 makes gamma and r
    /// moves evidence-free (used to stress dimension transitions).
    double evidence_temperature = 1.0;
    AuxiliaryOrder aux_order = AuxiliaryOrder::current;

    void validate() const {
        if (n_iter < 1) throw ConfigError("n_iter must be >= 1");
        if (burn_in < 0 || burn_in >= n_iter) throw ConfigError("burn_in must satisfy 0 <= burn_in < n_iter");
        if (thin < 1) throw ConfigError("thin must be >= 1");
        if (grrr.tol <= 0 || grrr.max_iter < 1 || grrr.n_restarts < 1) {
            throw ConfigError("GRRR settings must be positive");
        }
        if (kind == ModelKind::prr_fixed && !fixed_gamma) {
            throw ConfigError("prr_star requires a fixed allocation");
        }
        if (!(evidence_temperature >= 0)) throw ConfigError("evidence_temperature must be >= 0");
    }
};

struct Draw {
    int iteration = 0;
    Gamma gamma;  // original response order
    int r = 0;
    Matrix C;  // p x q, original response order
    Matrix Sigma;
    double rho = 0.0;
};

struct ChainMeta {
    int p = 0;
    int q = 0;
    int n = 0;
    std::uint64_t seed = 0;
    int n_iter = 0;
    int burn_in = 0;
    int thin = 1;
    std::string model = "bprr";
    long msss_proposals = 0;
    long msss_accepts = 0;
    long evidence_evaluations = 0;
    long evidence_nonconverged = 0;
    double seconds = 0.0;  // wall time; never persisted
};

struct ChainOutput {
    ChainMeta meta;
    std::vector<Draw> draws;
};

/// Thrown when a sampler step fails; carries the iteration and a state dump.
class SamplerError : public NumericalError {
public:
    SamplerError(int iteration, const std::string& what, const std::string& snapshot)
        : NumericalError("iteration " + std::to_string(iteration) + ": " + what + "\n" + snapshot),
          iteration_(iteration) {}
    int iteration() const { return iteration_; }

private:
    int iteration_;
};

// ---------------------------------------------------------------------------
// Allocation moves
// ---------------------------------------------------------------------------

/// One-bit flips of gamma that keep 2 <= q_gamma <= q - 1.
inline std::vector<Gamma> neighborhood(const Gamma& gamma, bool allow_all_low_rank = false) {
    std::vector<Gamma> out;
    for (std::size_t j = 0; j < gamma.size(); ++j) {
        Gamma g = gamma;
        g[j] = 1 - g[j];
        if (is_valid_gamma(g, allow_all_low_rank)) out.push_back(std::move(g));
    }
    return out;
}

/// log p(gamma | rho) up to the normalizing constant of the truncation.
inline double log_prior_gamma(const Gamma& gamma, double rho) {
    if (!is_valid_gamma(gamma)) return -std::numeric_limits<double>::infinity();
    const double qg = count_ones(gamma);
    const double q = static_cast<double>(gamma.size());
    return qg * std::log(rho) + (q - qg) * std::log1p(-rho);
}

struct MsssResult {
    Gamma gamma;
    Gamma proposal;
    bool accepted = false;
    double log_accept = 0.0;  // log of min(1, ratio)
};

/// Metropolized shotgun stochastic search step for an arbitrary log target.
///
/// The proposal is the target restricted to nbd(current); the move is accepted
/// with probability min{1, sum_{nbd(current)} target / sum_{nbd(proposal)} target}.
inline MsssResult msss_step_with(const Gamma& current, const std::function<double(const Gamma&)>& log_target,
                                 Rng& rng) {
    const auto nbd = neighborhood(current);
    if (nbd.empty()) throw NumericalError("msss: empty neighborhood for " + gamma_bits(current));
    Vector lw(static_cast<Eigen::Index>(nbd.size()));
    for (std::size_t i = 0; i < nbd.size(); ++i) lw(static_cast<Eigen::Index>(i)) = log_target(nbd[i]);
    const int pick = categorical(lw, rng);
    MsssResult res;
    res.proposal = nbd[pick];

    const auto back = neighborhood(res.proposal);
    Vector lb(static_cast<Eigen::Index>(back.size()));
    for (std::size_t i = 0; i < back.size(); ++i) lb(static_cast<Eigen::Index>(i)) = log_target(back[i]);
    res.log_accept = std::min(0.0, log_sum_exp(lw) - log_sum_exp(lb));
    res.accepted = std::log(rng.uniform()) < res.log_accept;
    res.gamma = res.accepted ? res.proposal : current;
    return res;
}

/// Draws r - 1 from probabilities proportional to exp(log_evidence) (uniform rank prior).
inline int sample_rank_from(const Vector& log_evidence, Rng& rng) { return categorical(log_evidence, rng) + 1; }

// ---------------------------------------------------------------------------
// Auxiliary matrices
// ---------------------------------------------------------------------------

/// First q_gamma_new columns of the previous coefficient matrix (permuted order).
inline Matrix auxiliary_C1(const Matrix& C_prev, int q_gamma_new) {
    if (q_gamma_new < 1 || q_gamma_new > C_prev.cols()) throw DimensionError("auxiliary_C1: bad column count");
    return C_prev.leftCols(q_gamma_new);
}

/// First r_new columns of the previous coefficient matrix; equals B when gamma
/// and r are unchanged since C1 = [B, B F'].
inline Matrix auxiliary_B(const Matrix& C_prev, int r_new) {
    if (r_new < 1 || r_new > C_prev.cols()) throw DimensionError("auxiliary_B: bad column count");
    return C_prev.leftCols(r_new);
}

// ---------------------------------------------------------------------------
// Conditional updates
// ---------------------------------------------------------------------------

namespace detail {

struct PermutedSystem {
    Matrix Y;          // Y_perm
    Matrix sigma_inv;  // (P' Sigma P)^{-1}
    Matrix xtx;
};

inline PermutedSystem permuted_system(const Dataset& data, const Matrix& sigma, const Allocation& alloc) {
    PermutedSystem s;
    s.Y = permute_columns(data.Y, alloc);
    const auto llt = checked_llt(permute_symmetric(sigma, alloc), "Sigma");
    s.sigma_inv = llt.solve(Matrix::Identity(alloc.q(), alloc.q()));
    s.xtx = data.X.transpose() * data.X;
    return s;
}

}  // namespace detail

struct DeltaDraw {
    Vector delta;
    Matrix C2;
    Vector mean;
    Matrix precision;
};

/// delta | Y, Sigma, gamma, C1* ~ N(mu, (I/d + U2' Sigma~^{-1} U2)^{-1}),
/// mu = Lambda U2' Sigma~^{-1} (y - U1 c1*).
inline DeltaDraw sample_delta(const Dataset& data, const Matrix& sigma, const Allocation& alloc,
                              const Matrix& C1_star, const Hyperparameters& hyper, Rng& rng) {
    const int qg = alloc.q_gamma();
    const int qf = alloc.q_full();
    const int p = data.p();
    if (C1_star.rows() != p || C1_star.cols() != qg) throw DimensionError("sample_delta: C1* must be p x q_gamma");
    DeltaDraw out;
    if (qf == 0) {
        out.C2.resize(p, 0);
        return out;
    }
    const auto sys = detail::permuted_system(data, sigma, alloc);
    Matrix resid = sys.Y;
    resid.leftCols(qg) -= data.X * C1_star;
    out.precision = kron(sys.sigma_inv.bottomRightCorner(qf, qf), sys.xtx);
    out.precision.diagonal().array() += 1.0 / hyper.d;
    const Vector h = vec(data.X.transpose() * resid * sys.sigma_inv.rightCols(qf));
    const auto g = mvn_sample_canonical(h, out.precision, rng, "sample_delta: posterior precision");
    out.mean = g.mean;
    out.delta = g.draw;
    out.C2 = unvec(out.delta, p, qf);
    return out;
}

/// Ingredients of the alpha_F conditional: G_mat = M_a' Sigma~^{-1} M_a and
/// m = M_a' Sigma~^{-1} y~2 with M_a = U1 (I (x) B), y~2 = y - U2 delta.
/// Indices follow vec(A') = (vec(I_r); alpha_F); J holds the alpha_F block.
struct AlphaPosterior {
    Matrix G_mat;
    Vector m_vec;
    Vector v;
    int r = 0;
    int q_gamma = 0;
    Vector mean;
    Matrix precision;
};

inline AlphaPosterior alpha_posterior(const Dataset& data, const Matrix& sigma, const Allocation& alloc, int r,
                                      const Matrix& B_star, const Matrix& C2, const Hyperparameters& hyper) {
    const int qg = alloc.q_gamma();
    const int p = data.p();
    if (B_star.rows() != p || B_star.cols() != r) throw DimensionError("sample_alpha_F: B* must be p x r");
    if (r < 1 || qg - r < 1) throw DimensionError("sample_alpha_F: need 1 <= r < q_gamma");
    const auto sys = detail::permuted_system(data, sigma, alloc);
    Matrix y2 = sys.Y;
    if (alloc.q_full() > 0) y2.rightCols(alloc.q_full()) -= data.X * C2;
    const Matrix xb = data.X * B_star;

    AlphaPosterior post;
    post.r = r;
    post.q_gamma = qg;
    post.G_mat = kron(sys.sigma_inv.topLeftCorner(qg, qg), xb.transpose() * xb);
    post.m_vec = vec(xb.transpose() * y2 * sys.sigma_inv.leftCols(qg));
    post.v = vec(Matrix::Identity(r, r));

    const int r2 = r * r;
    const int nj = (qg - r) * r;
    post.precision = post.G_mat.block(r2, r2, nj, nj);
    post.precision.diagonal().array() += 1.0 / hyper.a;
    const Vector h = post.m_vec.segment(r2, nj) - post.G_mat.block(r2, 0, nj, r2) * post.v;
    post.mean = checked_llt(post.precision, "sample_alpha_F: posterior precision").solve(h);
    return post;
}

struct AlphaDraw {
    Matrix F;
    Matrix A;
    AlphaPosterior posterior;
};

inline AlphaDraw sample_alpha_F(const Dataset& data, const Matrix& sigma, const Allocation& alloc, int r,
                                const Matrix& B_star, const Matrix& C2, const Hyperparameters& hyper, Rng& rng) {
    AlphaDraw out;
    out.posterior = alpha_posterior(data, sigma, alloc, r, B_star, C2, hyper);
    const auto llt = checked_llt(out.posterior.precision, "sample_alpha_F: posterior precision");
    const Vector alpha = out.posterior.mean + llt.matrixU().solve(rng.normal_vector(out.posterior.mean.size()));
    // alpha_F = vec(F'), so reshape to r x (q_gamma - r) and transpose.
    out.F = unvec(alpha, r, alloc.q_gamma() - r).transpose();
    out.A = detail::stack_identity(out.F, r);
    return out;
}

struct BetaDraw {
    Matrix B;
    Vector mean;
    Matrix precision;
};

/// beta | Y, Sigma, gamma, r, A, C2 with M_b = U1 (A (x) I_p).
inline BetaDraw sample_beta(const Dataset& data, const Matrix& sigma, const Allocation& alloc, int r,
                            const Matrix& A, const Matrix& C2, const Hyperparameters& hyper, Rng& rng) {
    const int qg = alloc.q_gamma();
    const int p = data.p();
    if (A.rows() != qg || A.cols() != r) throw DimensionError("sample_beta: A must be q_gamma x r");
    const auto sys = detail::permuted_system(data, sigma, alloc);
    Matrix y2 = sys.Y;
    if (alloc.q_full() > 0) y2.rightCols(alloc.q_full()) -= data.X * C2;
    BetaDraw out;
    out.precision = kron(A.transpose() * sys.sigma_inv.topLeftCorner(qg, qg) * A, sys.xtx);
    out.precision.diagonal().array() += 1.0 / hyper.b;
    const Vector h = vec(data.X.transpose() * y2 * sys.sigma_inv.leftCols(qg) * A);
    const auto g = mvn_sample_canonical(h, out.precision, rng, "sample_beta: posterior precision");
    out.mean = g.mean;
    out.B = unvec(g.draw, p, r);
    return out;
}

/// Sigma | Y, C ~ IW(nu + n, Psi + (Y - XC)'(Y - XC)), C in original order.
inline Matrix sample_Sigma(const Dataset& data, const Matrix& C_orig, const Hyperparameters& hyper, Rng& rng) {
    const Matrix resid = data.Y - data.X * C_orig;
    return inv_wishart_sample(hyper.nu + data.n(), hyper.Psi + resid.transpose() * resid, rng);
}

/// rho | gamma ~ Beta(a_rho + q_gamma, b_rho + q - q_gamma).
inline double sample_rho(const Allocation& alloc, const Hyperparameters& hyper, Rng& rng) {
    return beta_sample(hyper.a_rho + alloc.q_gamma(), hyper.b_rho + alloc.q_full(), rng);
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

inline std::string describe_state(const ModelState& s) {
    std::ostringstream os;
    os << "state: gamma=" << s.alloc.bits() << " r=" << s.r << " rho=" << s.rho << " F=" << s.F.rows() << "x"
       << s.F.cols() << " B=" << s.B.rows() << "x" << s.B.cols() << " C2=" << s.C2.rows() << "x" << s.C2.cols()
       << "\nSigma=\n"
       << s.Sigma;
    return os.str();
}

/// Throws DimensionError / NumericalError on any violated state invariant.
inline void check_state_invariants(const ModelState& s, int p, ModelKind kind) {
    s.check_dimensions();
    const bool allow_all = kind == ModelKind::reduced_rank;
    if (!is_valid_gamma(s.alloc.gamma(), allow_all)) throw DimensionError("allocation violates q_gamma bounds");
    if (s.r > rank_max(p, s.alloc.q_gamma())) throw DimensionError("rank exceeds r_max");
    if (s.B.rows() != p) throw DimensionError("B has wrong row count");
    if (!s.Sigma.isApprox(s.Sigma.transpose(), 1e-10) || !is_spd(s.Sigma)) {
        throw NumericalError("Sigma is not symmetric positive definite");
    }
    if (!(s.rho > 0.0 && s.rho < 1.0)) throw NumericalError("rho outside (0, 1)");
    if (!s.F.allFinite() || !s.B.allFinite() || !s.C2.allFinite()) throw NumericalError("non-finite coefficients");
}

inline Gamma random_valid_gamma(int q, Rng& rng) {
    for (;;) {
        Gamma g(q);
        for (auto& v : g) v = bernoulli(0.5, rng);
        if (is_valid_gamma(g)) return g;
    }
}

inline ModelState random_initial_state(const Dataset& data, const Hyperparameters& hyper, const Allocation& alloc,
                                       Rng& rng) {
    ModelState s;
    s.alloc = alloc;
    const int rmax = rank_max(data.p(), alloc.q_gamma());
    if (rmax < 1) throw ConfigError("allocation " + alloc.bits() + " admits no valid rank for p=" +
                                    std::to_string(data.p()));
    s.r = rng.uniform_int(1, rmax);
    s.F = rng.normal_matrix(alloc.q_gamma() - s.r, s.r);
    s.B = rng.normal_matrix(data.p(), s.r);
    s.C2 = rng.normal_matrix(data.p(), alloc.q_full());
    s.Sigma = Matrix::Identity(data.q(), data.q());
    s.rho = beta_sample(hyper.a_rho, hyper.b_rho, rng);
    return s;
}

/// Runs the sampler. Steps per iteration: gamma, r, delta, alpha_F, beta,
/// Sigma, rho. C1* and B* are column prefixes of the previous iteration's
/// permuted coefficient matrix, so every conditional sees consistent shapes.
inline ChainOutput run_chain(const Dataset& data, const Hyperparameters& hyper, const SamplerConfig& config) {
    data.validate();
    hyper.validate(data.q());
    config.validate();
    if (config.kind == ModelKind::full_rank) throw ConfigError("run_chain: use fit_fr for the full-rank model");
    const auto t0 = std::chrono::steady_clock::now();

    const int p = data.p();
    const int q = data.q();
    Rng rng(config.seed, config.stream);

    ModelState state;
    if (config.init) {
        state = *config.init;
    } else {
        Allocation alloc;
        if (config.kind == ModelKind::reduced_rank) {
            alloc = Allocation(Gamma(q, 1), true);
        } else if (config.kind == ModelKind::prr_fixed) {
            alloc = Allocation(*config.fixed_gamma);
        } else {
            alloc = Allocation(random_valid_gamma(q, rng));
        }
        state = random_initial_state(data, hyper, alloc, rng);
    }
    check_state_invariants(state, p, config.kind);

    ChainOutput out;
    out.meta.p = p;
    out.meta.q = q;
    out.meta.n = data.n();
    out.meta.seed = config.seed;
    out.meta.n_iter = config.n_iter;
    out.meta.burn_in = config.burn_in;
    out.meta.thin = config.thin;
    out.meta.model = to_string(config.kind);
    out.draws.reserve(static_cast<std::size_t>((config.n_iter - config.burn_in) / config.thin));

    EvidenceEngine engine(data, hyper, config.grrr);
    const double temp = config.evidence_temperature;

    auto log_evidence_gamma = [&](const Gamma& g) {
        if (temp == 0.0) return 0.0;
        return temp * engine.log_f_gamma(Allocation(g));
    };
    auto rank_weights = [&](const Allocation& alloc) -> Vector {
        const int rmax = rank_max(p, alloc.q_gamma());
        if (temp == 0.0) return Vector::Zero(rmax);
        return temp * engine.rank_log_evidence(alloc);
    };

    for (int it = 0; it < config.n_iter; ++it) {
        try {
            engine.set_sigma(state.Sigma);
            const auto c_prev = assemble_C(state);

            // Step 1: allocation.
            Allocation alloc = state.alloc;
            if (config.kind == ModelKind::bprr) {
                const double rho = state.rho;
                const auto res = msss_step_with(
                    state.alloc.gamma(), [&](const Gamma& g) { return log_evidence_gamma(g) + log_prior_gamma(g, rho); },
                    rng);
                ++out.meta.msss_proposals;
                if (res.accepted) {
                    ++out.meta.msss_accepts;
                    alloc = Allocation(res.gamma);
                }
            }

            // Step 2: rank.
            const int r = sample_rank_from(rank_weights(alloc), rng);

            const Matrix C_prev =
                config.aux_order == AuxiliaryOrder::current ? permute_columns(c_prev.orig, alloc) : c_prev.perm;

            // Step 3: delta given C1*.
            const Matrix c1_star = auxiliary_C1(C_prev, alloc.q_gamma());
            const auto delta = sample_delta(data, state.Sigma, alloc, c1_star, hyper, rng);

            // Step 4: alpha_F given B*.
            const Matrix b_star = auxiliary_B(C_prev, r);
            const auto alpha = sample_alpha_F(data, state.Sigma, alloc, r, b_star, delta.C2, hyper, rng);

            // Step 5: beta given A.
            const auto beta = sample_beta(data, state.Sigma, alloc, r, alpha.A, delta.C2, hyper, rng);

            state.alloc = alloc;
            state.r = r;
            state.F = alpha.F;
            state.B = beta.B;
            state.C2 = delta.C2;

            // Steps 6 and 7.
            const auto c = assemble_C(state);
            state.Sigma = sample_Sigma(data, c.orig, hyper, rng);
            state.rho = sample_rho(state.alloc, hyper, rng);

            check_state_invariants(state, p, config.kind);

            if (it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0) {
                out.draws.push_back({it, state.alloc.gamma(), state.r, c.orig, state.Sigma, state.rho});
            }
        } catch (const SamplerError&) {
            throw;
        } catch (const Error& e) {
            throw SamplerError(it, e.what(), describe_state(state));
        }
    }
    out.meta.evidence_evaluations = static_cast<long>(engine.evaluations());
    out.meta.evidence_nonconverged = static_cast<long>(engine.nonconverged_total());
    out.meta.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace bprr
