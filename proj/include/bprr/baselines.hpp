#pragma once

// Simulation design, the competitor models (FR, RR, PRR*), scenario sweeps
// and the rolling one-step-ahead forecast exercise.

#include <algorithm>
#include <array>
#include <chrono>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bprr/diagnostics.hpp"
#include "bprr/distributions.hpp"
#include "bprr/linalg.hpp"
#include "bprr/sampler.hpp"

namespace bprr {

struct Scenario {
    int p = 5;
    int q = 5;
    int q_gamma0 = 3;
    int r0 = 1;
    int n = 20;
    int n_replicates = 10;
    std::uint64_t seed = 1;

    void validate() const {
        if (p < 1 || n < 1) throw ConfigError("scenario: p and n must be positive");
        if (q < 3) throw ConfigError("scenario: q must be >= 3");
        if (q_gamma0 < 2 || q_gamma0 > q - 1) throw ConfigError("scenario: need 2 <= q_gamma0 <= q - 1");
        if (r0 < 1 || r0 > std::min(p, q_gamma0) - 1) {
            throw ConfigError("scenario: need 1 <= r0 <= min(p, q_gamma0) - 1");
        }
        if (n_replicates < 1) throw ConfigError("scenario: n_replicates must be >= 1");
    }
};

struct GroundTruth {
    Matrix C0;      // p x q, original (observed) column order
    Gamma gamma0;
    Matrix Sigma0;  // diagonal, original column order
    std::vector<int> perm;  // perm[k]: observed column holding the k-th column of Y0
    Matrix C0_block;        // [B A', C2] in Y0 order
};

/// Draws (Y, X) from the partial reduced-rank model. Y0 = [Y1, Y2] is built in
/// block order and its columns are then scattered according to a random gamma0.
/// noise_scale multiplies the error draws (0 gives noiseless data).
inline std::pair<Dataset, GroundTruth> generate_dgp(const Scenario& sc, Rng& rng, double noise_scale = 1.0) {
    sc.validate();
    const int qg = sc.q_gamma0;
    const int r = sc.r0;
    Matrix X = rng.normal_matrix(sc.n, sc.p);
    Vector sd(sc.q);
    for (int j = 0; j < sc.q; ++j) sd(j) = std::sqrt(0.5 + 1.25 * rng.uniform());

    Matrix A(qg, r);
    A.topRows(r).setIdentity();
    A.bottomRows(qg - r) = rng.normal_matrix(qg - r, r);
    const Matrix B = rng.normal_matrix(sc.p, r);
    Matrix C0_block(sc.p, sc.q);
    C0_block.leftCols(qg) = B * A.transpose();
    C0_block.rightCols(sc.q - qg) = rng.normal_matrix(sc.p, sc.q - qg);

    Matrix E = rng.normal_matrix(sc.n, sc.q);
    E = E * sd.asDiagonal() * noise_scale;
    const Matrix Y0 = X * C0_block + E;

    // Uniform allocation with exactly q_gamma0 ones.
    std::vector<int> idx(sc.q);
    std::iota(idx.begin(), idx.end(), 0);
    for (int j = sc.q - 1; j > 0; --j) std::swap(idx[j], idx[rng.uniform_int(0, j)]);
    Gamma gamma0(sc.q, 0);
    for (int k = 0; k < qg; ++k) gamma0[idx[k]] = 1;
    const Allocation alloc(gamma0);

    Dataset data;
    data.X = X;
    data.Y = unpermute_columns(Y0, alloc);
    GroundTruth truth;
    truth.gamma0 = gamma0;
    truth.perm = alloc.perm();
    truth.C0 = unpermute_columns(C0_block, alloc);
    truth.C0_block = C0_block;
    truth.Sigma0 = Matrix::Zero(sc.q, sc.q);
    for (int k = 0; k < sc.q; ++k) truth.Sigma0(alloc.perm()[k], alloc.perm()[k]) = sd(k) * sd(k);
    return {std::move(data), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Competitors
// ---------------------------------------------------------------------------

/// Full-rank Bayesian regression: Gibbs over vec(C) ~ N(0, d I) and Sigma ~ IW.
inline ChainOutput fit_fr(const Dataset& data, const Hyperparameters& hyper, const SamplerConfig& config) {
    data.validate();
    hyper.validate(data.q());
    SamplerConfig cfg = config;
    cfg.kind = ModelKind::full_rank;
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const int p = data.p();
    const int q = data.q();
    Rng rng(cfg.seed, cfg.stream);

    ChainOutput out;
    out.meta.p = p;
    out.meta.q = q;
    out.meta.n = data.n();
    out.meta.seed = cfg.seed;
    out.meta.n_iter = cfg.n_iter;
    out.meta.burn_in = cfg.burn_in;
    out.meta.thin = cfg.thin;
    out.meta.model = to_string(ModelKind::full_rank);

    const Matrix xtx = data.X.transpose() * data.X;
    const Matrix xty = data.X.transpose() * data.Y;
    Matrix sigma = Matrix::Identity(q, q);
    Matrix C = rng.normal_matrix(p, q);
    for (int it = 0; it < cfg.n_iter; ++it) {
        try {
            const auto sigma_llt = checked_llt(sigma, "Sigma");
            const Matrix sigma_inv = sigma_llt.solve(Matrix::Identity(q, q));
            Matrix prec = kron(sigma_inv, xtx);
            prec.diagonal().array() += 1.0 / hyper.d;
            const Vector h = vec(xty * sigma_inv);
            C = unvec(mvn_sample_canonical(h, prec, rng, "fit_fr: posterior precision").draw, p, q);
            sigma = sample_Sigma(data, C, hyper, rng);
            if (it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0) {
                out.draws.push_back({it, Gamma(q, 0), 0, C, sigma, 0.0});
            }
        } catch (const Error& e) {
            throw SamplerError(it, e.what(), "fit_fr state");
        }
    }
    out.meta.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// Reduced-rank regression: every response in the low-rank group, r sampled.
inline ChainOutput fit_rr(const Dataset& data, const Hyperparameters& hyper, const SamplerConfig& config) {
    SamplerConfig cfg = config;
    cfg.kind = ModelKind::reduced_rank;
    cfg.init.reset();
    return run_chain(data, hyper, cfg);
}

/// Partial reduced-rank regression with the allocation pinned.
inline ChainOutput fit_prr_star(const Dataset& data, const Gamma& gamma_fixed, const Hyperparameters& hyper,
                                const SamplerConfig& config) {
    SamplerConfig cfg = config;
    cfg.kind = ModelKind::prr_fixed;
    cfg.fixed_gamma = gamma_fixed;
    cfg.init.reset();
    return run_chain(data, hyper, cfg);
}

inline ChainOutput fit_model(const Dataset& data, ModelKind kind, const Hyperparameters& hyper,
                             const SamplerConfig& config, const std::optional<Gamma>& gamma_fixed = std::nullopt) {
    switch (kind) {
        case ModelKind::full_rank: return fit_fr(data, hyper, config);
        case ModelKind::reduced_rank: return fit_rr(data, hyper, config);
        case ModelKind::prr_fixed:
            if (!gamma_fixed) throw ConfigError("prr_star requires a fixed allocation");
            return fit_prr_star(data, *gamma_fixed, hyper, config);
        case ModelKind::bprr: {
            SamplerConfig cfg = config;
            cfg.kind = ModelKind::bprr;
            return run_chain(data, hyper, cfg);
        }
    }
    throw ConfigError("unknown model");
}

// ---------------------------------------------------------------------------
// Scenario sweep
// ---------------------------------------------------------------------------

/// Order used in every report: BPRR, FR, RR, PRR*.
inline constexpr std::array<ModelKind, 4> kReportModels{ModelKind::bprr, ModelKind::full_rank,
                                                        ModelKind::reduced_rank, ModelKind::prr_fixed};

struct ReplicateRecord {
    int replicate = 0;
    bool ok = false;
    std::string error;
    double q_gamma_hat = 0.0;
    double r_hat = 0.0;
    double accuracy = 0.0;
    double f1 = 0.0;
    std::array<double, 4> mse{};  // kReportModels order
};

struct ScenarioReport {
    Scenario scenario;
    std::vector<ReplicateRecord> replicates;
    int n_ok = 0;
    double q_gamma_hat = 0.0;
    double r_hat = 0.0;
    double accuracy = 0.0;
    double f1 = 0.0;
    std::array<double, 4> mse{};
};

/// Seeds for replicate `rep`: data and PRR* allocation from one stream, each
/// model chain from its own, all derived from the scenario seed.
inline ReplicateRecord run_replicate(const Scenario& sc, int rep, const Hyperparameters& hyper,
                                     const SamplerConfig& config) {
    ReplicateRecord rec;
    rec.replicate = rep;
    try {
        Rng data_rng(sc.seed, 1000 + static_cast<std::uint64_t>(rep));
        auto [data, truth] = generate_dgp(sc, data_rng);
        const Gamma random_gamma = random_valid_gamma(sc.q, data_rng);
        for (std::size_t m = 0; m < kReportModels.size(); ++m) {
            SamplerConfig cfg = config;
            cfg.seed = sc.seed;
            cfg.stream = 2000 + 8 * static_cast<std::uint64_t>(rep) + m;
            const auto chain = fit_model(data, kReportModels[m], hyper, cfg, random_gamma);
            const auto summary = map_estimates(chain);
            rec.mse[m] = mse_C(summary.C_mean, truth.C0);
            if (kReportModels[m] == ModelKind::bprr) {
                rec.q_gamma_hat = count_ones(summary.map_gamma);
                rec.r_hat = summary.map_r;
                const auto cm = classification_metrics(summary.map_gamma, truth.gamma0);
                rec.accuracy = cm.accuracy;
                rec.f1 = cm.f1;
            }
        }
        rec.ok = true;
    } catch (const Error& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

inline ScenarioReport aggregate(const Scenario& sc, std::vector<ReplicateRecord> records) {
    ScenarioReport rep;
    rep.scenario = sc;
    rep.replicates = std::move(records);
    for (const auto& r : rep.replicates) {
        if (!r.ok) continue;
        ++rep.n_ok;
        rep.q_gamma_hat += r.q_gamma_hat;
        rep.r_hat += r.r_hat;
        rep.accuracy += r.accuracy;
        rep.f1 += r.f1;
        for (std::size_t m = 0; m < 4; ++m) rep.mse[m] += r.mse[m];
    }
    if (rep.n_ok > 0) {
        const double k = rep.n_ok;
        rep.q_gamma_hat /= k;
        rep.r_hat /= k;
        rep.accuracy /= k;
        rep.f1 /= k;
        for (auto& v : rep.mse) v /= k;
    }
    return rep;
}

inline ScenarioReport run_scenario(const Scenario& sc, const Hyperparameters& hyper, const SamplerConfig& config) {
    sc.validate();
    std::vector<ReplicateRecord> records;
    records.reserve(static_cast<std::size_t>(sc.n_replicates));
    for (int rep = 0; rep < sc.n_replicates; ++rep) records.push_back(run_replicate(sc, rep, hyper, config));
    return aggregate(sc, std::move(records));
}

/// The twelve simulation settings (p, q, q_gamma, r, n).
inline std::vector<Scenario> table1_grid(int n_replicates = 10, std::uint64_t seed = 1) {
    const int rows[12][5] = {{5, 5, 3, 1, 20},  {5, 5, 3, 1, 40},  {5, 8, 3, 1, 20},  {5, 8, 6, 2, 20},
                             {5, 8, 6, 4, 20},  {10, 5, 3, 1, 20}, {10, 5, 3, 1, 40}, {10, 8, 3, 1, 20},
                             {10, 8, 6, 2, 20}, {10, 8, 6, 4, 20}, {20, 5, 3, 1, 20}, {20, 5, 3, 1, 40}};
    std::vector<Scenario> out;
    for (const auto& r : rows) {
        Scenario sc;
        sc.p = r[0];
        sc.q = r[1];
        sc.q_gamma0 = r[2];
        sc.r0 = r[3];
        sc.n = r[4];
        sc.n_replicates = n_replicates;
        sc.seed = seed;
        out.push_back(sc);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rolling forecast
// ---------------------------------------------------------------------------

struct ForecastConfig {
    int window = 40;
    ModelKind kind = ModelKind::bprr;
    SamplerConfig sampler;
    std::optional<Gamma> fixed_gamma;  // PRR* only
};

struct ForecastResult {
    Matrix Y_hat;  // (n - window) x q
    Matrix Y_true;
    double mse = 0.0;
    double mae = 0.0;
    std::vector<Matrix> C_means;  // posterior mean of C at each step
};

inline constexpr int kMinimalFitRows = 2;

/// One-step-ahead forecasts: for t = window..n-1, fit on rows [t - window, t)
/// and predict row t with x_t' C_hat, C_hat the posterior mean. Every step refits.
inline ForecastResult rolling_forecast(const Dataset& data, const Hyperparameters& hyper, const ForecastConfig& fc) {
    data.validate();
    if (fc.window < kMinimalFitRows) {
        throw ConfigError("forecast window must be at least " + std::to_string(kMinimalFitRows) + " rows");
    }
    if (fc.window >= data.n()) throw ConfigError("forecast window must be smaller than n");
    const int steps = data.n() - fc.window;
    ForecastResult res;
    res.Y_hat.resize(steps, data.q());
    res.Y_true = data.Y.bottomRows(steps);
    for (int s = 0; s < steps; ++s) {
        const int t = fc.window + s;
        const Dataset train = data.rows(t - fc.window, fc.window);
        SamplerConfig cfg = fc.sampler;
        cfg.stream = fc.sampler.stream * 1000 + static_cast<std::uint64_t>(t);
        const auto chain = fit_model(train, fc.kind, hyper, cfg, fc.fixed_gamma);
        const auto summary = map_estimates(chain);
        res.Y_hat.row(s) = data.X.row(t) * summary.C_mean;
        res.C_means.push_back(summary.C_mean);
    }
    const Matrix err = res.Y_hat - res.Y_true;
    const double count = static_cast<double>(err.size());
    res.mse = err.squaredNorm() / count;
    res.mae = err.cwiseAbs().sum() / count;
    return res;
}

}  // namespace bprr
