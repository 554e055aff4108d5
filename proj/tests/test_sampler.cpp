#include <gtest/gtest.h>

#include <array>
#include <map>

#include "bprr/bprr.hpp"
#include "oracles/oracles.hpp"

using namespace bprr;

namespace {

double gaussian_loglik(const Dataset& data, const Matrix& C_orig, const Matrix& sigma) {
    Eigen::LLT<Matrix> llt(sigma);
    double s = 0.0;
    for (int i = 0; i < data.n(); ++i) {
        s += oracle::mvn_logpdf(data.Y.row(i).transpose(), (data.X.row(i) * C_orig).transpose(), llt);
    }
    return s;
}

/// Undo the grouped column order used by the oracles.
Matrix to_original(const Matrix& c_perm, const Gamma& gamma) {
    const auto order = oracle::group_order(gamma);
    Matrix out(c_perm.rows(), c_perm.cols());
    for (std::size_t k = 0; k < order.size(); ++k) out.col(order[k]) = c_perm.col(static_cast<Eigen::Index>(k));
    return out;
}

/// Exact gradient and Hessian of a quadratic function by finite differences with unit steps.
struct QuadraticProbe {
    Vector grad;
    Matrix hess;
};

QuadraticProbe probe(const std::function<double(const Vector&)>& f, const Vector& x, double h = 0.5) {
    const auto k = x.size();
    QuadraticProbe out{Vector(k), Matrix(k, k)};
    const double f0 = f(x);
    for (Eigen::Index i = 0; i < k; ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        out.grad(i) = (f(xp) - f(xm)) / (2 * h);
        out.hess(i, i) = (f(xp) - 2 * f0 + f(xm)) / (h * h);
        for (Eigen::Index j = 0; j < i; ++j) {
            Vector a = x, b = x, c = x, d = x;
            a(i) += h, a(j) += h;
            b(i) += h, b(j) -= h;
            c(i) -= h, c(j) += h;
            d(i) -= h, d(j) -= h;
            out.hess(i, j) = out.hess(j, i) = (f(a) - f(b) - f(c) + f(d)) / (4 * h * h);
        }
    }
    return out;
}

struct Problem {
    Dataset data;
    Matrix sigma;
    Hyperparameters hyper;
};

Problem make_problem(int n, int p, int q, std::uint64_t seed) {
    Rng rng(seed, 21);
    Problem pr;
    pr.data.X = rng.normal_matrix(n, p);
    pr.data.Y = pr.data.X * rng.normal_matrix(p, q) + rng.normal_matrix(n, q);
    const Matrix L = rng.normal_matrix(q, q);
    pr.sigma = L * L.transpose() / q + Matrix::Identity(q, q);
    pr.hyper = Hyperparameters::defaults(q);
    pr.hyper.a = 0.7;
    pr.hyper.b = 1.3;
    pr.hyper.d = 0.4;
    return pr;
}

double normal_log_prior(const Vector& x, double var) { return -0.5 * x.squaredNorm() / var; }

}  // namespace

TEST(Neighborhood, RespectsBounds) {
    EXPECT_EQ(neighborhood({1, 1, 0}).size(), 0u);  // both flips leave the valid range
    EXPECT_EQ(neighborhood({1, 1, 0, 0}).size(), 2u);
    EXPECT_EQ(neighborhood({1, 1, 0, 0, 0}).size(), 3u);
    EXPECT_EQ(neighborhood({1, 1, 1, 0, 0}).size(), 5u);
    for (const auto& g : oracle::all_valid_gammas(6)) {
        for (const auto& h : neighborhood(g)) {
            EXPECT_TRUE(is_valid_gamma(h));
            int diff = 0;
            for (std::size_t j = 0; j < g.size(); ++j) diff += g[j] != h[j];
            EXPECT_EQ(diff, 1);
        }
    }
}

TEST(Neighborhood, Symmetric) {
    for (const auto& g : oracle::all_valid_gammas(5)) {
        for (const auto& h : neighborhood(g)) {
            const auto back = neighborhood(h);
            EXPECT_NE(std::find(back.begin(), back.end(), g), back.end());
        }
    }
}

TEST(PriorGamma, Bernoulli) {
    EXPECT_NEAR(log_prior_gamma({1, 1, 0}, 0.3), 2 * std::log(0.3) + std::log(0.7), 1e-14);
    EXPECT_EQ(log_prior_gamma({1, 1, 1}, 0.3), -std::numeric_limits<double>::infinity());
}

TEST(Msss, TransitionFrequenciesMatchKernel) {
    // One-step kernel from a fixed state, computed by hand from the proposal and acceptance rules.
    const int q = 5;
    std::map<Gamma, double> logt;
    Rng lrng(1, 0);
    for (const auto& g : oracle::all_valid_gammas(q)) logt[g] = 2.0 * lrng.normal();
    auto target = [&](const Gamma& g) { return logt.at(g); };
    const Gamma start = {1, 1, 0, 1, 0};
    const auto nbd = neighborhood(start);
    std::vector<double> lw;
    for (const auto& g : nbd) lw.push_back(target(g));
    const auto prop = oracle::normalize_logs(lw);
    auto lse = [&](const std::vector<Gamma>& gs) {
        double m = -1e300;
        for (const auto& g : gs) m = std::max(m, target(g));
        double s = 0.0;
        for (const auto& g : gs) s += std::exp(target(g) - m);
        return m + std::log(s);
    };
    std::map<Gamma, double> expected;
    double stay = 1.0;
    for (std::size_t i = 0; i < nbd.size(); ++i) {
        const double acc = std::min(1.0, std::exp(lse(nbd) - lse(neighborhood(nbd[i]))));
        expected[nbd[i]] = prop[i] * acc;
        stay -= prop[i] * acc;
    }
    expected[start] = stay;

    Rng rng(2, 0);
    const int steps = 200000;
    std::map<Gamma, int> counts;
    for (int t = 0; t < steps; ++t) ++counts[msss_step_with(start, target, rng).gamma];
    for (const auto& [g, pr] : expected) {
        EXPECT_NEAR(counts[g] / double(steps), pr, 4.0 * std::sqrt(pr * (1 - pr) / steps) + 1e-4) << gamma_bits(g);
    }
    EXPECT_EQ(counts.size(), expected.size());
}

TEST(Msss, TargetIsStationaryForKernel) {
    // pi K = pi for the kernel implied by the step, built by repeated single steps.
    const int q = 4;
    const auto states = oracle::all_valid_gammas(q);
    std::vector<double> lw;
    Rng lrng(3, 0);
    for (std::size_t i = 0; i < states.size(); ++i) lw.push_back(lrng.normal());
    auto idx = [&](const Gamma& g) {
        return static_cast<std::size_t>(std::find(states.begin(), states.end(), g) - states.begin());
    };
    auto target = [&](const Gamma& g) { return lw[idx(g)]; };
    const auto pi = oracle::normalize_logs(lw);
    Rng rng(4, 0);
    const int steps = 100000;
    Matrix K = Matrix::Zero(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(states.size()));
    for (std::size_t i = 0; i < states.size(); ++i) {
        for (int t = 0; t < steps; ++t) K(i, idx(msss_step_with(states[i], target, rng).gamma)) += 1.0 / steps;
    }
    Eigen::Map<const Vector> piv(pi.data(), static_cast<Eigen::Index>(pi.size()));
    const Vector moved = K.transpose() * piv;
    EXPECT_LT((moved - piv).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Msss, ProposalIsInNeighborhood) {
    Rng rng(5, 0);
    const auto res = msss_step_with({1, 0, 1, 0, 1}, [](const Gamma&) { return 0.0; }, rng);
    const auto nbd = neighborhood({1, 0, 1, 0, 1});
    EXPECT_NE(std::find(nbd.begin(), nbd.end(), res.proposal), nbd.end());
    EXPECT_LE(res.log_accept, 0.0);
    EXPECT_THROW(msss_step_with({1, 1, 0}, [](const Gamma&) { return 0.0; }, rng), NumericalError);
}

TEST(RankDraw, ProportionalToEvidence) {
    Rng rng(6, 0);
    const Vector le = (Vector(3) << -100.0, -100.0 + std::log(3.0), -100.0 + std::log(6.0)).finished();
    std::array<int, 4> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_rank_from(le, rng))];
    EXPECT_EQ(counts[0], 0);
    EXPECT_NEAR(counts[1] / double(n), 0.1, 0.005);
    EXPECT_NEAR(counts[2] / double(n), 0.3, 0.006);
    EXPECT_NEAR(counts[3] / double(n), 0.6, 0.006);
}

TEST(Auxiliary, PrefixRecoversB) {
    Rng rng(7, 0);
    ModelState s;
    s.alloc = Allocation({1, 1, 1, 0});
    s.r = 2;
    s.F = rng.normal_matrix(1, 2);
    s.B = rng.normal_matrix(3, 2);
    s.C2 = rng.normal_matrix(3, 1);
    s.Sigma = Matrix::Identity(4, 4);
    s.rho = 0.5;
    const auto c = assemble_C(s);
    EXPECT_EQ(auxiliary_B(c.perm, 2), s.B);
    EXPECT_EQ(auxiliary_C1(c.perm, 3), c.perm.leftCols(3));
    EXPECT_THROW(auxiliary_C1(c.perm, 5), DimensionError);
    EXPECT_THROW(auxiliary_B(c.perm, 0), DimensionError);
}

TEST(Conditionals, DeltaIsGaussianPosterior) {
    const auto pr = make_problem(12, 3, 5, 10);
    const Gamma g = {1, 0, 1, 1, 0};
    const Allocation alloc(g);
    Rng rng(8, 0);
    const Matrix c1 = rng.normal_matrix(3, 3);
    const auto draw = sample_delta(pr.data, pr.sigma, alloc, c1, pr.hyper, rng);
    auto logpost = [&](const Vector& delta) {
        Matrix cp(3, 5);
        cp.leftCols(3) = c1;
        cp.rightCols(2) = unvec(delta, 3, 2);
        return gaussian_loglik(pr.data, to_original(cp, g), pr.sigma) + normal_log_prior(delta, pr.hyper.d);
    };
    const auto pb = probe(logpost, draw.mean);
    EXPECT_LT(pb.grad.cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((-pb.hess - draw.precision).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(draw.C2, unvec(draw.delta, 3, 2));
}

TEST(Conditionals, DeltaMatchesDenseFormula) {
    const auto pr = make_problem(6, 2, 4, 11);
    const Gamma g = {0, 1, 1, 0};
    const Allocation alloc(g);
    Rng rng(9, 0);
    const Matrix c1 = rng.normal_matrix(2, 2);
    const auto draw = sample_delta(pr.data, pr.sigma, alloc, c1, pr.hyper, rng);
    const auto order = oracle::group_order(g);
    const Matrix sp = oracle::reorder_sym(pr.sigma, order);
    const Matrix prec_e = oracle::kron(sp, Matrix::Identity(6, 6)).inverse();
    Matrix V2 = Matrix::Zero(2, 4);
    V2(0, 2) = V2(1, 3) = 1.0;
    Matrix V1 = Matrix::Zero(2, 4);
    V1(0, 0) = V1(1, 1) = 1.0;
    const Matrix U1 = oracle::kron(V1.transpose(), pr.data.X);
    const Matrix U2 = oracle::kron(V2.transpose(), pr.data.X);
    const Matrix prec = Matrix::Identity(4, 4) / pr.hyper.d + U2.transpose() * prec_e * U2;
    const Vector y = oracle::vec(oracle::reorder_cols(pr.data.Y, order));
    const Vector mean = prec.ldlt().solve(U2.transpose() * prec_e * (y - U1 * oracle::vec(c1)));
    EXPECT_LT((draw.precision - prec).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((draw.mean - mean).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Conditionals, AlphaIsGaussianPosterior) {
    const auto pr = make_problem(15, 3, 6, 12);
    const Gamma g = {1, 1, 0, 1, 1, 0};
    const Allocation alloc(g);
    const int r = 2;
    Rng rng(10, 0);
    const Matrix B = rng.normal_matrix(3, r);
    const Matrix C2 = rng.normal_matrix(3, 2);
    const auto draw = sample_alpha_F(pr.data, pr.sigma, alloc, r, B, C2, pr.hyper, rng);
    // Coordinates alpha_F = vec(F').
    auto logpost = [&](const Vector& alpha) {
        const Matrix F = unvec(alpha, r, 2).transpose();
        Matrix cp(3, 6);
        cp.leftCols(4) = B * detail::stack_identity(F, r).transpose();
        cp.rightCols(2) = C2;
        return gaussian_loglik(pr.data, to_original(cp, g), pr.sigma) + normal_log_prior(alpha, pr.hyper.a);
    };
    const auto pb = probe(logpost, draw.posterior.mean);
    EXPECT_LT(pb.grad.cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((-pb.hess - draw.posterior.precision).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_TRUE(draw.A.topRows(r).isIdentity(0.0));
    EXPECT_EQ(draw.A.bottomRows(2), draw.F);
}

TEST(Conditionals, AlphaMeanUsesIdentityBlock) {
    // The identity block enters the mean as G_{J,1..r^2} vec(I_r).
    const auto pr = make_problem(10, 2, 4, 13);
    const Allocation alloc({1, 1, 1, 0});
    Rng rng(11, 0);
    const auto post = alpha_posterior(pr.data, pr.sigma, alloc, 1, rng.normal_matrix(2, 1), rng.normal_matrix(2, 1),
                                      pr.hyper);
    EXPECT_EQ(post.G_mat.rows(), 3);
    EXPECT_EQ(post.v, Vector::Ones(1));
    const Vector h = post.m_vec.tail(2) - post.G_mat.block(1, 0, 2, 1) * post.v;
    EXPECT_LT((post.precision * post.mean - h).norm(), 1e-10);
}

TEST(Conditionals, BetaIsGaussianPosterior) {
    const auto pr = make_problem(15, 4, 5, 14);
    const Gamma g = {0, 1, 1, 1, 0};
    const Allocation alloc(g);
    const int r = 2;
    Rng rng(12, 0);
    const Matrix A = detail::stack_identity(rng.normal_matrix(1, r), r);
    const Matrix C2 = rng.normal_matrix(4, 2);
    const auto draw = sample_beta(pr.data, pr.sigma, alloc, r, A, C2, pr.hyper, rng);
    auto logpost = [&](const Vector& beta) {
        Matrix cp(4, 5);
        cp.leftCols(3) = unvec(beta, 4, r) * A.transpose();
        cp.rightCols(2) = C2;
        return gaussian_loglik(pr.data, to_original(cp, g), pr.sigma) + normal_log_prior(beta, pr.hyper.b);
    };
    const auto pb = probe(logpost, draw.mean);
    EXPECT_LT(pb.grad.cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((-pb.hess - draw.precision).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Conditionals, BetaDrawsHaveStatedMoments) {
    const auto pr = make_problem(8, 2, 4, 15);
    const Allocation alloc({1, 1, 1, 0});
    Rng rng(13, 0);
    const Matrix A = detail::stack_identity(rng.normal_matrix(2, 1), 1);
    const Matrix C2 = rng.normal_matrix(2, 1);
    const int n = 40000;
    Vector mean = Vector::Zero(2);
    Matrix second = Matrix::Zero(2, 2);
    BetaDraw first;
    for (int i = 0; i < n; ++i) {
        const auto d = sample_beta(pr.data, pr.sigma, alloc, 1, A, C2, pr.hyper, rng);
        if (i == 0) first = d;
        mean += vec(d.B);
        second += vec(d.B) * vec(d.B).transpose();
    }
    mean /= n;
    const Matrix cov = second / n - mean * mean.transpose();
    const Matrix expect = first.precision.inverse();
    EXPECT_LT((mean - first.mean).cwiseAbs().maxCoeff(), 5.0 * std::sqrt(expect.diagonal().maxCoeff() / n));
    EXPECT_LT((cov - expect).cwiseAbs().maxCoeff(), 0.05 * expect.diagonal().maxCoeff());
}

TEST(Conditionals, SigmaPosteriorMean) {
    const auto pr = make_problem(30, 2, 3, 16);
    Rng rng(14, 0);
    const Matrix C = rng.normal_matrix(2, 3);
    const Matrix resid = pr.data.Y - pr.data.X * C;
    const Matrix scale = pr.hyper.Psi + resid.transpose() * resid;
    const double dof = pr.hyper.nu + 30;
    const int n = 20000;
    Matrix mean = Matrix::Zero(3, 3);
    for (int i = 0; i < n; ++i) mean += sample_Sigma(pr.data, C, pr.hyper, rng);
    mean /= n;
    const Matrix expect = scale / (dof - 3 - 1);
    EXPECT_LT((mean - expect).cwiseAbs().maxCoeff(), 0.02 * expect.diagonal().maxCoeff());
}

TEST(Conditionals, RhoPosteriorMean) {
    Rng rng(15, 0);
    auto h = Hyperparameters::defaults(5);
    h.a_rho = 2.0;
    h.b_rho = 3.0;
    const Allocation alloc({1, 1, 1, 0, 0});
    const int n = 50000;
    double m = 0.0;
    for (int i = 0; i < n; ++i) m += sample_rho(alloc, h, rng);
    EXPECT_NEAR(m / n, 5.0 / 10.0, 0.004);
}

TEST(Invariants, DetectViolations) {
    Rng rng(16, 0);
    ModelState s;
    s.alloc = Allocation({1, 1, 1, 0});
    s.r = 1;
    s.F = rng.normal_matrix(2, 1);
    s.B = rng.normal_matrix(3, 1);
    s.C2 = rng.normal_matrix(3, 1);
    s.Sigma = Matrix::Identity(4, 4);
    s.rho = 0.5;
    EXPECT_NO_THROW(check_state_invariants(s, 3, ModelKind::bprr));
    auto bad = s;
    bad.rho = 1.0;
    EXPECT_THROW(check_state_invariants(bad, 3, ModelKind::bprr), NumericalError);
    bad = s;
    bad.Sigma(0, 1) = 5.0;
    EXPECT_THROW(check_state_invariants(bad, 3, ModelKind::bprr), NumericalError);
    bad = s;
    bad.r = 3;
    bad.F = rng.normal_matrix(0, 3);
    bad.B = rng.normal_matrix(3, 3);
    EXPECT_THROW(check_state_invariants(bad, 3, ModelKind::bprr), DimensionError);
    bad = s;
    bad.F(0, 0) = std::nan("");
    EXPECT_THROW(check_state_invariants(bad, 3, ModelKind::bprr), NumericalError);
    EXPECT_THROW(check_state_invariants(s, 1, ModelKind::bprr), DimensionError);
}

TEST(Chain, ReproducibleAndThinned) {
    const auto pr = make_problem(20, 3, 4, 17);
    SamplerConfig cfg;
    cfg.n_iter = 60;
    cfg.burn_in = 20;
    cfg.thin = 4;
    cfg.seed = 99;
    const auto a = run_chain(pr.data, pr.hyper, cfg);
    const auto b = run_chain(pr.data, pr.hyper, cfg);
    ASSERT_EQ(a.draws.size(), 10u);
    ASSERT_EQ(b.draws.size(), 10u);
    for (std::size_t i = 0; i < a.draws.size(); ++i) {
        EXPECT_EQ(a.draws[i].iteration, 23 + 4 * static_cast<int>(i));
        EXPECT_EQ(a.draws[i].gamma, b.draws[i].gamma);
        EXPECT_EQ(a.draws[i].C, b.draws[i].C);
        EXPECT_EQ(a.draws[i].Sigma, b.draws[i].Sigma);
    }
    EXPECT_EQ(a.meta.msss_proposals, 60);
    cfg.seed = 100;
    const auto c = run_chain(pr.data, pr.hyper, cfg);
    EXPECT_NE(a.draws.back().C, c.draws.back().C);
}

TEST(Chain, DrawsSatisfyModelStructure) {
    const auto pr = make_problem(20, 3, 5, 18);
    SamplerConfig cfg;
    cfg.n_iter = 80;
    cfg.burn_in = 0;
    cfg.seed = 5;
    for (const auto& d : run_chain(pr.data, pr.hyper, cfg).draws) {
        const int qg = count_ones(d.gamma);
        ASSERT_TRUE(is_valid_gamma(d.gamma));
        ASSERT_GE(d.r, 1);
        ASSERT_LE(d.r, std::min(3, qg) - 1);
        Matrix c1(3, qg);
        for (int j = 0, k = 0; j < 5; ++j)
            if (d.gamma[j]) c1.col(k++) = d.C.col(j);
        EXPECT_EQ(numerical_rank(c1), d.r);
        EXPECT_TRUE(is_spd(d.Sigma));
        EXPECT_GT(d.rho, 0.0);
        EXPECT_LT(d.rho, 1.0);
    }
}

TEST(Chain, FixedAllocationStaysFixed) {
    const auto pr = make_problem(15, 3, 4, 19);
    SamplerConfig cfg;
    cfg.n_iter = 30;
    cfg.burn_in = 0;
    cfg.kind = ModelKind::prr_fixed;
    cfg.fixed_gamma = Gamma{0, 1, 1, 1};
    for (const auto& d : run_chain(pr.data, pr.hyper, cfg).draws) EXPECT_EQ(d.gamma, *cfg.fixed_gamma);
    cfg.kind = ModelKind::reduced_rank;
    for (const auto& d : run_chain(pr.data, pr.hyper, cfg).draws) EXPECT_EQ(d.gamma, Gamma(4, 1));
}

TEST(Chain, RejectsBadConfiguration) {
    const auto pr = make_problem(10, 2, 3, 20);
    SamplerConfig cfg;
    cfg.n_iter = 10;
    cfg.burn_in = 10;
    EXPECT_THROW(run_chain(pr.data, pr.hyper, cfg), ConfigError);
    cfg.burn_in = 2;
    cfg.kind = ModelKind::prr_fixed;
    EXPECT_THROW(run_chain(pr.data, pr.hyper, cfg), ConfigError);
    cfg.kind = ModelKind::full_rank;
    EXPECT_THROW(run_chain(pr.data, pr.hyper, cfg), ConfigError);
}

TEST(Chain, FailureCarriesIterationAndState) {
    const auto pr = make_problem(10, 2, 4, 21);
    SamplerConfig cfg;
    cfg.n_iter = 5;
    cfg.burn_in = 0;
    cfg.kind = ModelKind::prr_fixed;
    cfg.fixed_gamma = Gamma{1, 1, 1, 0};
    Rng rng(1, 0);
    ModelState init = random_initial_state(pr.data, pr.hyper, Allocation(*cfg.fixed_gamma), rng);
    cfg.init = init;
    Dataset broken = pr.data;
    broken.Y(0, 0) = 1e200;  // finite, but the residual cross-product overflows
    try {
        run_chain(broken, pr.hyper, cfg);
        FAIL() << "expected a failure";
    } catch (const SamplerError& e) {
        EXPECT_EQ(e.iteration(), 0);
        EXPECT_NE(std::string(e.what()).find("gamma=1110"), std::string::npos);
    }
}

namespace {

/// Dense vectorized system in grouped order: y, U1, U2 and Sigma~^{-1}.
struct DenseSystem {
    Vector y;
    Matrix U1, U2, prec_e, cov_e;
};

DenseSystem dense_system(const Dataset& data, const Matrix& sigma, const Gamma& g) {
    const auto order = oracle::group_order(g);
    const int q = static_cast<int>(g.size());
    const int qg = oracle::count(g);
    const int n = data.n();
    Matrix V1 = Matrix::Zero(qg, q), V2 = Matrix::Zero(q - qg, q);
    for (int k = 0; k < qg; ++k) V1(k, k) = 1.0;
    for (int k = 0; k < q - qg; ++k) V2(k, qg + k) = 1.0;
    DenseSystem s;
    s.y = oracle::vec(oracle::reorder_cols(data.Y, order));
    s.U1 = oracle::kron(V1.transpose(), data.X);
    s.U2 = oracle::kron(V2.transpose(), data.X);
    s.cov_e = oracle::kron(oracle::reorder_sym(sigma, order), Matrix::Identity(n, n));
    s.prec_e = s.cov_e.inverse();
    return s;
}

Matrix stack_cols(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

}  // namespace

TEST(Neighborhood, WorkedExamples) {
    EXPECT_EQ(neighborhood({1, 0, 1, 0}), (std::vector<Gamma>{{1, 1, 1, 0}, {1, 0, 1, 1}}));
    EXPECT_EQ(neighborhood({1, 1, 0, 0}), (std::vector<Gamma>{{1, 1, 1, 0}, {1, 1, 0, 1}}));
    EXPECT_EQ(neighborhood({1, 1, 1, 0}), (std::vector<Gamma>{{0, 1, 1, 0}, {1, 0, 1, 0}, {1, 1, 0, 0}}));
}

TEST(Msss, EqualTargetsWithEqualNeighborhoodsAlwaysAccept) {
    Rng rng(40, 0);
    // With q = 6, states with q_gamma in {3, 4} have all six flips valid.
    int checked = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto res = msss_step_with({1, 1, 0, 1, 0, 0}, [](const Gamma&) { return 0.0; }, rng);
        if (neighborhood(res.proposal).size() == 6u) {
            ++checked;
            EXPECT_EQ(res.log_accept, 0.0);
            EXPECT_TRUE(res.accepted);
        }
    }
    EXPECT_GT(checked, 0);
}

TEST(Msss, StrongPriorFavorsLargeAllocations) {
    auto mean_qg = [](double rho) {
        Rng rng(41, 0);
        Gamma g = {1, 1, 0, 0, 0, 0};
        std::map<Gamma, int> visits;
        double acc = 0.0;
        const int steps = 20000;
        for (int t = 0; t < steps; ++t) {
            g = msss_step_with(g, [&](const Gamma& h) { return log_prior_gamma(h, rho); }, rng).gamma;
            ++visits[g];
            acc += count_ones(g);
        }
        Gamma mode;
        int best = -1;
        for (const auto& [k, v] : visits)
            if (v > best) best = v, mode = k;
        return std::make_pair(acc / steps, count_ones(mode));
    };
    const auto flat = mean_qg(0.5);
    const auto heavy = mean_qg(0.99);
    EXPECT_GT(heavy.first, flat.first + 1.0);
    EXPECT_EQ(heavy.second, 5);
}

TEST(Msss, ArgmaxInvariantUnderConstantShift) {
    std::map<Gamma, double> logt;
    Rng lrng(42, 0);
    for (const auto& g : oracle::all_valid_gammas(6)) logt[g] = 3.0 * lrng.normal();
    Rng a(43, 0), b(43, 0);
    Gamma ga = {1, 0, 1, 0, 1, 0}, gb = ga;
    for (int t = 0; t < 2000; ++t) {
        const auto ra = msss_step_with(ga, [&](const Gamma& g) { return logt.at(g); }, a);
        const auto rb = msss_step_with(gb, [&](const Gamma& g) { return logt.at(g) + 317.25; }, b);
        ASSERT_EQ(ra.proposal, rb.proposal);
        ASSERT_EQ(ra.accepted, rb.accepted);
        ga = ra.gamma;
        gb = rb.gamma;
        const Vector le = 2.0 * lrng.normal_vector(4);
        ASSERT_EQ(sample_rank_from(le, a), sample_rank_from((le.array() - 55.5).matrix(), b));
    }
    EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(RankDraw, SingleSupportPoint) {
    Rng rng(44, 0);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_rank_from(Vector::Constant(1, -3.0), rng), 1);
}

TEST(RankDraw, EqualEvidenceIsUniform) {
    Rng rng(45, 0);
    std::array<int, 5> counts{};
    const int n = 10000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_rank_from(Vector::Zero(4), rng))];
    for (int r = 1; r <= 4; ++r) EXPECT_NEAR(counts[static_cast<std::size_t>(r)] / double(n), 0.25, 0.03);
}

TEST(RankDraw, PlantedRankTwoIsModal) {
    const Gamma g = {1, 1, 1, 1, 1, 0};
    const Allocation alloc(g);
    const auto h = Hyperparameters::defaults(6);
    int hits = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(500 + s, 0);
        Dataset data;
        data.X = rng.normal_matrix(100, 5);
        const Matrix A = detail::stack_identity(rng.normal_matrix(3, 2), 2);
        const Matrix C1 = 2.0 * rng.normal_matrix(5, 2) * A.transpose();
        data.Y = data.X * unpermute_columns(stack_cols(C1, rng.normal_matrix(5, 1)), alloc) + rng.normal_matrix(100, 6);
        const Matrix I = Matrix::Identity(6, 6);
        Vector le(4);
        for (int r = 1; r <= 4; ++r) le(r - 1) = log_laplace_evidence(data, I, alloc, r, GrrrConfig{}, h).log_evidence;
        Eigen::Index best;
        le.maxCoeff(&best);
        hits += best == 1;
    }
    EXPECT_GE(hits, 9);
}

TEST(Auxiliary, BoundaryCases) {
    Rng rng(46, 0);
    const Matrix c = rng.normal_matrix(4, 6);
    EXPECT_EQ(auxiliary_C1(c, 5), c.leftCols(5));
    EXPECT_EQ(auxiliary_C1(c, 5).col(4), c.col(4));
    EXPECT_EQ(auxiliary_B(c, 1), c.col(0));
}

TEST(Auxiliary, ShapesOverRandomTransitions) {
    Rng rng(47, 0);
    const int p = 4, q = 7;
    for (int t = 0; t < 1000; ++t) {
        const Gamma g = random_valid_gamma(q, rng);
        const int qg = count_ones(g);
        const int rmax = rank_max(p, qg);
        if (rmax < 1) continue;
        const int r = rng.uniform_int(1, rmax);
        const Matrix c = permute_columns(rng.normal_matrix(p, q), Allocation(g));
        const Matrix c1 = auxiliary_C1(c, qg);
        const Matrix b = auxiliary_B(c, r);
        ASSERT_EQ(c1.rows(), p);
        ASSERT_EQ(c1.cols(), qg);
        ASSERT_EQ(b.rows(), p);
        ASSERT_EQ(b.cols(), r);
    }
}

TEST(Conditionals, DeltaApproachesGlsForDiffusePrior) {
    auto pr = make_problem(10, 2, 4, 48);
    pr.hyper.d = 1e6;
    const Gamma g = {1, 1, 0, 0};
    Rng rng(48, 0);
    const Matrix c1 = rng.normal_matrix(2, 2);
    const auto draw = sample_delta(pr.data, pr.sigma, Allocation(g), c1, pr.hyper, rng);
    const auto s = dense_system(pr.data, pr.sigma, g);
    const Matrix W = s.U2.transpose() * s.prec_e * s.U2;
    const Vector gls = W.ldlt().solve(s.U2.transpose() * s.prec_e * (s.y - s.U1 * oracle::vec(c1)));
    EXPECT_LT((draw.mean - gls).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Conditionals, DeltaMeanZeroForZeroResidual) {
    auto pr = make_problem(10, 2, 4, 49);
    const Gamma g = {0, 1, 1, 0};
    const Allocation alloc(g);
    Rng rng(49, 0);
    const Matrix c1 = rng.normal_matrix(2, 2);
    pr.data.Y = pr.data.X * unpermute_columns(stack_cols(c1, Matrix::Zero(2, 2)), alloc);
    const auto draw = sample_delta(pr.data, pr.sigma, alloc, c1, pr.hyper, rng);
    EXPECT_LT(draw.mean.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Conditionals, DeltaMatchesCovarianceForm) {
    const auto pr = make_problem(7, 2, 5, 50);
    const Gamma g = {1, 0, 1, 0, 1};
    Rng rng(50, 0);
    const Matrix c1 = rng.normal_matrix(2, 3);
    const auto draw = sample_delta(pr.data, pr.sigma, Allocation(g), c1, pr.hyper, rng);
    const auto s = dense_system(pr.data, pr.sigma, g);
    const double d = pr.hyper.d;
    const Matrix marg = s.cov_e + d * s.U2 * s.U2.transpose();
    const auto llt = marg.llt();
    const Matrix cov = d * Matrix::Identity(4, 4) - d * d * s.U2.transpose() * llt.solve(s.U2);
    const Vector mean = d * s.U2.transpose() * llt.solve(s.y - s.U1 * oracle::vec(c1));
    EXPECT_LT((draw.mean - mean).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((draw.precision.inverse() - cov).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Conditionals, AlphaWithoutSignalIsPrior) {
    const auto pr = make_problem(12, 3, 5, 51);
    const Allocation alloc({1, 1, 1, 1, 0});
    Rng rng(51, 0);
    const auto post = alpha_posterior(pr.data, pr.sigma, alloc, 2, Matrix::Zero(3, 2), rng.normal_matrix(3, 1), pr.hyper);
    EXPECT_TRUE(post.G_mat.isZero(0.0));
    EXPECT_LT(post.mean.cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((post.precision - Matrix::Identity(4, 4) / pr.hyper.a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Conditionals, AlphaDrawMeanWithinMonteCarloError) {
    const auto pr = make_problem(10, 2, 5, 52);
    const Allocation alloc({1, 1, 0, 1, 1});
    const int r = 1;
    Rng rng(52, 0);
    const Matrix B = rng.normal_matrix(2, r);
    const Matrix C2 = rng.normal_matrix(2, 1);
    const int n = 20000;
    Vector sum = Vector::Zero(3), sq = Vector::Zero(3);
    AlphaPosterior post;
    for (int i = 0; i < n; ++i) {
        const auto d = sample_alpha_F(pr.data, pr.sigma, alloc, r, B, C2, pr.hyper, rng);
        if (i == 0) post = d.posterior;
        const Vector a = vec(d.F.transpose());
        sum += a;
        sq += a.cwiseProduct(a);
    }
    const Vector mean = sum / n;
    const Vector se = ((sq / n - mean.cwiseProduct(mean)) / n).cwiseSqrt();
    for (int k = 0; k < 3; ++k) EXPECT_LT(std::abs(mean(k) - post.mean(k)), 3.0 * se(k)) << k;
}

TEST(Conditionals, AlphaRecoversPlantedF) {
    Rng rng(53, 0);
    const Gamma g = {1, 1, 1, 1, 0};
    const Allocation alloc(g);
    const int r = 2;
    Dataset data;
    data.X = rng.normal_matrix(200, 3);
    const Matrix F0 = rng.normal_matrix(2, r);
    const Matrix B0 = 2.0 * rng.normal_matrix(3, r);
    const Matrix C2 = rng.normal_matrix(3, 1);
    const Matrix sigma = Matrix::Identity(5, 5);
    data.Y = data.X * unpermute_columns(stack_cols(B0 * detail::stack_identity(F0, r).transpose(), C2), alloc) +
             rng.normal_matrix(200, 5);
    const auto post = alpha_posterior(data, sigma, alloc, r, B0, C2, Hyperparameters::defaults(5));
    const Matrix F = unvec(post.mean, r, 2).transpose();
    EXPECT_LT((F - F0).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Conditionals, BetaMatchesDenseRegression) {
    const auto pr = make_problem(8, 3, 4, 54);
    const Gamma g = {0, 1, 1, 0};
    Rng rng(54, 0);
    const Matrix A = detail::stack_identity(rng.normal_matrix(1, 1), 1);
    const Matrix C2 = rng.normal_matrix(3, 2);
    const auto draw = sample_beta(pr.data, pr.sigma, Allocation(g), 1, A, C2, pr.hyper, rng);
    const auto s = dense_system(pr.data, pr.sigma, g);
    const Matrix Mb = s.U1 * oracle::kron(A, Matrix::Identity(3, 3));
    const Vector y2 = s.y - s.U2 * oracle::vec(C2);
    const Matrix prec = Matrix::Identity(3, 3) / pr.hyper.b + Mb.transpose() * s.prec_e * Mb;
    EXPECT_LT((draw.precision - prec).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((draw.mean - prec.ldlt().solve(Mb.transpose() * s.prec_e * y2)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Conditionals, BetaMeanZeroForZeroResponse) {
    auto pr = make_problem(9, 2, 4, 55);
    const Gamma g = {1, 1, 1, 0};
    const Allocation alloc(g);
    Rng rng(55, 0);
    const Matrix C2 = rng.normal_matrix(2, 1);
    pr.data.Y = pr.data.X * unpermute_columns(stack_cols(Matrix::Zero(2, 3), C2), alloc);
    const Matrix A = detail::stack_identity(rng.normal_matrix(2, 1), 1);
    const auto draw = sample_beta(pr.data, pr.sigma, alloc, 1, A, C2, pr.hyper, rng);
    EXPECT_LT(draw.mean.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Conditionals, BetaPinnedByVanishingPrior) {
    auto pr = make_problem(9, 2, 4, 56);
    pr.hyper.b = 1e-9;
    Rng rng(56, 0);
    const Matrix A = detail::stack_identity(rng.normal_matrix(2, 1), 1);
    for (int i = 0; i < 100; ++i) {
        const auto draw = sample_beta(pr.data, pr.sigma, Allocation({1, 1, 1, 0}), 1, A, rng.normal_matrix(2, 1),
                                      pr.hyper, rng);
        EXPECT_LT(draw.B.cwiseAbs().maxCoeff(), 1e-3);
    }
}

TEST(Conditionals, SigmaWithoutResidualUsesPriorScale) {
    auto pr = make_problem(30, 2, 3, 57);
    Rng rng(57, 0);
    const Matrix C = rng.normal_matrix(2, 3);
    pr.data.Y = pr.data.X * C;
    pr.hyper.Psi << 2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 1.5;
    const double dof = pr.hyper.nu + 30;
    const int n = 20000;
    Matrix mean = Matrix::Zero(3, 3);
    for (int i = 0; i < n; ++i) mean += sample_Sigma(pr.data, C, pr.hyper, rng);
    mean /= n;
    const Matrix expect = pr.hyper.Psi / (dof - 3 - 1);
    EXPECT_LT((mean - expect).cwiseAbs().maxCoeff(), 0.03 * expect.diagonal().maxCoeff());
}

TEST(Conditionals, SigmaConsistentAtLargeN) {
    Rng rng(58, 0);
    Dataset data;
    data.X = rng.normal_matrix(500, 3);
    const Matrix C = rng.normal_matrix(3, 3);
    const Vector sd = (Vector(3) << 1.0, std::sqrt(2.0), std::sqrt(0.5)).finished();
    data.Y = data.X * C + rng.normal_matrix(500, 3) * sd.asDiagonal();
    const auto h = Hyperparameters::defaults(3);
    Matrix mean = Matrix::Zero(3, 3);
    for (int i = 0; i < 2000; ++i) mean += sample_Sigma(data, C, h, rng);
    mean /= 2000;
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(mean(k, k), sd(k) * sd(k), 0.1 * sd(k) * sd(k));
    EXPECT_LT(std::abs(mean(0, 1)), 0.1);
}

TEST(Conditionals, RhoBetaParameters) {
    auto h = Hyperparameters::defaults(5);
    Rng rng(59, 0);
    double m = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double v = sample_rho(Allocation({1, 1, 0, 1, 0}), h, rng);
        ASSERT_GT(v, 0.0);
        ASSERT_LT(v, 1.0);
        m += v;
    }
    EXPECT_NEAR(m / 20000, 4.0 / 7.0, 0.01);
    m = 0.0;
    for (int i = 0; i < 20000; ++i) m += sample_rho(Allocation({1, 1, 1, 1, 0}), h, rng);
    EXPECT_NEAR(m / 20000, 5.0 / 7.0, 0.01);
}

TEST(JointDistribution, RhoAllocationCycleKeepsPriorMarginal) {
    // Alternating gamma | rho (truncated prior) and rho | gamma leaves the joint prior
    // invariant; its rho marginal is Beta(a, b) times the probability of a valid gamma.
    const int q = 4;
    auto h = Hyperparameters::defaults(q);
    h.a_rho = 2.0;
    h.b_rho = 3.0;
    const auto valid = oracle::all_valid_gammas(q);
    auto z = [&](double rho) {
        double s = 0.0;
        for (const auto& g : valid) s += std::exp(log_prior_gamma(g, rho));
        return s;
    };
    double num = 0.0, den = 0.0;
    const int grid = 20000;
    for (int i = 0; i < grid; ++i) {
        const double x = (i + 0.5) / grid;
        const double w = x * (1 - x) * (1 - x) * z(x);
        num += x * w;
        den += w;
    }
    const double expect = num / den;

    Rng rng(60, 0);
    double rho = 0.5;
    const int n = 200000, batches = 100;
    std::vector<double> bm(batches, 0.0);
    for (int t = 0; t < n; ++t) {
        Vector lw(static_cast<Eigen::Index>(valid.size()));
        for (std::size_t k = 0; k < valid.size(); ++k) lw(static_cast<Eigen::Index>(k)) = log_prior_gamma(valid[k], rho);
        const Gamma g = valid[static_cast<std::size_t>(categorical(lw, rng))];
        rho = sample_rho(Allocation(g), h, rng);
        bm[static_cast<std::size_t>(t / (n / batches))] += rho / (n / batches);
    }
    double mean = 0.0, var = 0.0;
    for (double b : bm) mean += b / batches;
    for (double b : bm) var += (b - mean) * (b - mean) / (batches - 1);
    EXPECT_NEAR(mean, expect, 3.0 * std::sqrt(var / batches));
}

TEST(JointDistribution, SigmaDataCycleKeepsPriorMean) {
    const int q = 2, n = 5;
    Hyperparameters h = Hyperparameters::defaults(q);
    h.nu = 10.0;
    h.Psi << 2.0, 0.6, 0.6, 1.0;
    Rng rng(61, 0);
    Dataset data;
    data.X = rng.normal_matrix(n, 2);
    const Matrix C = rng.normal_matrix(2, q);
    Matrix sigma = h.Psi / (h.nu - q - 1);
    const int steps = 200000, batches = 100;
    std::vector<Matrix> bm(batches, Matrix::Zero(q, q));
    for (int t = 0; t < steps; ++t) {
        const auto llt = sigma.llt();
        data.Y = data.X * C + rng.normal_matrix(n, q) * Matrix(llt.matrixU());
        sigma = sample_Sigma(data, C, h, rng);
        bm[static_cast<std::size_t>(t / (steps / batches))] += sigma / (steps / batches);
    }
    const Matrix expect = h.Psi / (h.nu - q - 1);
    for (int i = 0; i < q; ++i) {
        for (int j = 0; j <= i; ++j) {
            double mean = 0.0, var = 0.0;
            for (const auto& b : bm) mean += b(i, j) / batches;
            for (const auto& b : bm) var += (b(i, j) - mean) * (b(i, j) - mean) / (batches - 1);
            EXPECT_NEAR(mean, expect(i, j), 3.0 * std::sqrt(var / batches)) << i << "," << j;
        }
    }
}

TEST(Chain, TenIterationsGiveTenValidDraws) {
    const auto pr = make_problem(15, 3, 5, 62);
    SamplerConfig cfg;
    cfg.n_iter = 10;
    cfg.burn_in = 0;
    cfg.thin = 1;
    const auto out = run_chain(pr.data, pr.hyper, cfg);
    ASSERT_EQ(out.draws.size(), 10u);
    for (const auto& d : out.draws) {
        EXPECT_TRUE(is_valid_gamma(d.gamma));
        EXPECT_GE(d.r, 1);
        EXPECT_LE(d.r, rank_max(3, count_ones(d.gamma)));
    }
}
