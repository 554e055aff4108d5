// bprr: command-line front end.
//
//   bprr simulate  --output DIR [--grid table1 | --scenario p,q,qg,r,n ...] [--replicates N]
//   bprr fit       --data FILE --responses a,b,c --predictors x,y --output DIR
//   bprr forecast  --data FILE --responses ... --predictors ... --window 40 --output DIR
//   bprr diagnose  --chain FILE --output DIR
//   bprr generate  --p 5 --q 5 --q-gamma 3 --r 1 --n 20 --output FILE.csv
//
// Every subcommand accepts --config FILE (JSON). Flags override the file,
// which overrides the defaults. Exit codes: 0 ok, 2 config, 3 data, 4 numerical.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bprr/bprr.hpp"

namespace {

using namespace bprr;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> n_iter, burn_in, thin, grrr_max_iter, grrr_restarts;
    std::optional<double> grrr_tol;
    std::optional<std::string> output, model, fixed_gamma, data, date_column, period_from, period_to, grid, chain;
    std::vector<std::string> responses, predictors, scenarios;
    bool standardize = false;
    std::optional<int> replicates, window;

    // generate
    int gen_p = 5, gen_q = 5, gen_qg = 3, gen_r = 1, gen_n = 20;
    double gen_noise = 1.0;
    std::string gen_start_date;
    std::string gen_truth;
};

void add_common(CLI::App* app, Flags& f) {
    app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--seed", f.seed, "top-level random seed");
    app->add_option("-o,--output", f.output, "output directory");
    app->add_option("--n-iter", f.n_iter, "sampler iterations");
    app->add_option("--burn-in", f.burn_in, "burn-in iterations");
    app->add_option("--thin", f.thin, "thinning interval");
    app->add_option("--grrr-tol", f.grrr_tol, "relative tolerance of the MLE alternation");
    app->add_option("--grrr-max-iter", f.grrr_max_iter, "iteration cap of the MLE alternation");
    app->add_option("--grrr-restarts", f.grrr_restarts, "starting points per MLE");
}

void add_data(CLI::App* app, Flags& f) {
    app->add_option("--data", f.data, "input CSV (header row required)");
    app->add_option("--responses", f.responses, "response column names")->delimiter(',');
    app->add_option("--predictors", f.predictors, "predictor column names")->delimiter(',');
    app->add_flag("--standardize", f.standardize, "centre and scale every selected column");
    app->add_option("--date-column", f.date_column, "column holding period labels");
    app->add_option("--period-from", f.period_from, "first period kept (inclusive, compared as text)");
    app->add_option("--period-to", f.period_to, "last period kept (inclusive, compared as text)");
    app->add_option("--model", f.model, "bprr | fr | rr | prr_star");
    app->add_option("--fixed-gamma", f.fixed_gamma, "allocation bits for prr_star (random when omitted)");
}

RunConfig resolve(const Flags& f) {
    RunConfig cfg;
    if (!f.config.empty()) apply_json(cfg, parse_json_text(read_file(f.config), f.config));
    if (f.seed) cfg.seed = *f.seed;
    if (f.output) cfg.output = *f.output;
    if (f.n_iter) cfg.n_iter = *f.n_iter;
    if (f.burn_in) cfg.burn_in = *f.burn_in;
    if (f.thin) cfg.thin = *f.thin;
    if (f.grrr_tol) cfg.grrr_tol = *f.grrr_tol;
    if (f.grrr_max_iter) cfg.grrr_max_iter = *f.grrr_max_iter;
    if (f.grrr_restarts) cfg.grrr_restarts = *f.grrr_restarts;
    if (f.model) cfg.model = *f.model;
    if (f.fixed_gamma) cfg.fixed_gamma = *f.fixed_gamma;
    if (f.data) cfg.data = *f.data;
    if (!f.responses.empty()) cfg.responses = f.responses;
    if (!f.predictors.empty()) cfg.predictors = f.predictors;
    if (f.standardize) cfg.standardize = true;
    if (f.date_column) cfg.date_column = *f.date_column;
    if (f.period_from) cfg.period_from = *f.period_from;
    if (f.period_to) cfg.period_to = *f.period_to;
    if (f.grid) cfg.grid = *f.grid;
    if (f.replicates) cfg.replicates = *f.replicates;
    if (f.window) cfg.window = *f.window;
    if (f.chain) cfg.chain = *f.chain;
    if (!f.scenarios.empty()) {
        cfg.scenarios.clear();
        for (const auto& s : f.scenarios) {
            std::vector<int> v;
            std::stringstream ss(s);
            for (std::string tok; std::getline(ss, tok, ',');) {
                const auto d = parse_double(tok);
                if (!d) throw ConfigError("--scenario expects p,q,q_gamma,r,n; got '" + s + "'");
                v.push_back(static_cast<int>(*d));
            }
            if (v.size() != 5) throw ConfigError("--scenario expects p,q,q_gamma,r,n; got '" + s + "'");
            Scenario sc;
            sc.p = v[0];
            sc.q = v[1];
            sc.q_gamma0 = v[2];
            sc.r0 = v[3];
            sc.n = v[4];
            cfg.scenarios.push_back(sc);
        }
    }
    return cfg;
}

void announce(const char* command, const RunConfig& cfg) {
    std::cerr << "bprr " << command << " effective config: " << cfg.to_json().dump() << "\n";
}

void require_output(const RunConfig& cfg) {
    if (cfg.output.empty()) throw ConfigError("an output directory is required (--output)");
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (std::filesystem::path(cfg.output) / name).string();
}

Dataset load_data(const RunConfig& cfg) {
    if (cfg.data.empty()) throw ConfigError("an input data file is required (--data)");
    if (!std::filesystem::exists(cfg.data)) throw ConfigError("data file '" + cfg.data + "' does not exist");
    if (cfg.responses.empty() || cfg.predictors.empty()) {
        throw ConfigError("--responses and --predictors must name the columns to use");
    }
    IngestOptions opt;
    opt.standardize = cfg.standardize;
    opt.date_column = cfg.date_column;
    opt.period_from = cfg.period_from;
    opt.period_to = cfg.period_to;
    return ingest_csv(cfg.data, cfg.responses, cfg.predictors, opt);
}

std::optional<Gamma> prr_gamma(const RunConfig& cfg, int q) {
    if (model_kind_from(cfg.model) != ModelKind::prr_fixed) return std::nullopt;
    if (!cfg.fixed_gamma.empty()) {
        if (static_cast<int>(cfg.fixed_gamma.size()) != q ||
            cfg.fixed_gamma.find_first_not_of("01") != std::string::npos) {
            throw ConfigError("--fixed-gamma must be a bit string of length q");
        }
        const Gamma g = gamma_from_bits(cfg.fixed_gamma);
        Allocation check(g);
        return g;
    }
    Rng rng(cfg.seed, 0xA11C);
    return random_valid_gamma(q, rng);
}

Json matrix_json(const Matrix& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

int cmd_simulate(const RunConfig& cfg) {
    announce("simulate", cfg);
    require_output(cfg);
    const auto scenarios = resolve_scenarios(cfg);
    SamplerConfig sampler = cfg.sampler();
    std::string report = scenario_report_header();
    std::string reps = "p,q,q_gamma,r,n,replicate,ok,q_gamma_hat,r_hat,accuracy,f1,mse_bprr,mse_fr,mse_rr,mse_prr_star,error\n";
    for (const auto& sc : scenarios) {
        const auto hyper = cfg.hyperparameters(sc.q);
        const auto rep = run_scenario(sc, hyper, sampler);
        report += scenario_report_row(rep);
        for (const auto& r : rep.replicates) {
            reps += std::to_string(sc.p) + "," + std::to_string(sc.q) + "," + std::to_string(sc.q_gamma0) + "," +
                    std::to_string(sc.r0) + "," + std::to_string(sc.n) + "," + std::to_string(r.replicate) + "," +
                    (r.ok ? "1" : "0") + "," + format_double(r.q_gamma_hat) + "," + format_double(r.r_hat) + "," +
                    format_double(r.accuracy) + "," + format_double(r.f1);
            for (double m : r.mse) reps += "," + format_double(m);
            reps += "," + csv_escape(r.error) + "\n";
        }
        std::cerr << "scenario " << sc.p << "," << sc.q << "," << sc.q_gamma0 << "," << sc.r0 << "," << sc.n
                  << ": " << rep.n_ok << "/" << rep.replicates.size() << " replicates ok\n";
    }
    write_atomic(out_path(cfg, "report.csv"), report);
    write_atomic(out_path(cfg, "replicates.csv"), reps);
    return 0;
}

int cmd_fit(const RunConfig& cfg) {
    announce("fit", cfg);
    require_output(cfg);
    const Dataset data = load_data(cfg);
    const auto hyper = cfg.hyperparameters(data.q());
    SamplerConfig sampler = cfg.sampler();
    const auto gamma_fixed = prr_gamma(cfg, data.q());
    const auto chain = fit_model(data, sampler.kind, hyper, sampler, gamma_fixed);
    const auto summary = map_estimates(chain);

    Json js;
    js["model"] = chain.meta.model;
    js["n"] = data.n();
    js["p"] = data.p();
    js["q"] = data.q();
    js["responses"] = data.response_names;
    js["predictors"] = data.predictor_names;
    js["draws"] = summary.draws;
    js["map_gamma"] = gamma_bits(summary.map_gamma);
    js["map_gamma_frequency"] = summary.map_gamma_freq;
    js["gamma_tie"] = summary.gamma_tie;
    js["map_r"] = summary.map_r;
    js["map_r_frequency"] = summary.map_r_freq;
    js["r_tie"] = summary.r_tie;
    Json gp = Json::object();
    for (const auto& [bits, f] : summary.gamma_posterior) gp[bits] = f;
    js["gamma_posterior"] = gp;
    Json rp = Json::object();
    for (const auto& [r, f] : summary.r_posterior) rp[std::to_string(r)] = f;
    js["r_posterior"] = rp;
    js["C_mean"] = matrix_json(summary.C_mean);
    js["msss_proposals"] = chain.meta.msss_proposals;
    js["msss_accepts"] = chain.meta.msss_accepts;
    js["evidence_evaluations"] = chain.meta.evidence_evaluations;
    js["evidence_nonconverged"] = chain.meta.evidence_nonconverged;
    if (gamma_fixed) js["fixed_gamma"] = gamma_bits(*gamma_fixed);

    write_chain(chain, out_path(cfg, "chain.txt"));
    write_atomic(out_path(cfg, "summary.json"), js.dump(2) + "\n");
    write_atomic(out_path(cfg, "gamma_histogram.csv"), gamma_histogram_csv(summary));
    write_atomic(out_path(cfg, "rank_histogram.csv"), rank_histogram_csv(summary));
    write_atomic(out_path(cfg, "trace.csv"), trace_csv(chain));
    std::cerr << "fit: MAP gamma " << gamma_bits(summary.map_gamma) << " (" << summary.map_gamma_freq
              << "), MAP r " << summary.map_r << " (" << summary.map_r_freq << ")\n";
    return 0;
}

int cmd_forecast(const RunConfig& cfg) {
    announce("forecast", cfg);
    require_output(cfg);
    const Dataset data = load_data(cfg);
    const auto hyper = cfg.hyperparameters(data.q());
    ForecastConfig fc;
    fc.window = cfg.window;
    fc.sampler = cfg.sampler();
    fc.kind = fc.sampler.kind;
    fc.fixed_gamma = prr_gamma(cfg, data.q());
    const auto res = rolling_forecast(data, hyper, fc);

    std::vector<std::string> names;
    for (const auto& nme : data.response_names) names.push_back(nme + "_hat");
    for (const auto& nme : data.response_names) names.push_back(nme);
    Matrix both(res.Y_hat.rows(), 2 * res.Y_hat.cols());
    both << res.Y_hat, res.Y_true;
    write_atomic(out_path(cfg, "forecast.csv"), matrix_csv(both, names));
    Json js;
    js["model"] = cfg.model;
    js["window"] = fc.window;
    js["predictions"] = res.Y_hat.rows();
    js["mse"] = res.mse;
    js["mae"] = res.mae;
    write_atomic(out_path(cfg, "metrics.json"), js.dump(2) + "\n");
    std::cerr << "forecast: MSE " << res.mse << ", MAE " << res.mae << "\n";
    return 0;
}

int cmd_diagnose(const RunConfig& cfg) {
    announce("diagnose", cfg);
    require_output(cfg);
    if (cfg.chain.empty()) throw ConfigError("a chain file is required (--chain)");
    if (!std::filesystem::exists(cfg.chain)) throw ConfigError("chain file '" + cfg.chain + "' does not exist");
    const auto chain = read_chain(cfg.chain);
    const auto rep = coda_report(chain);
    write_atomic(out_path(cfg, "coda_entries.csv"), coda_entries_csv(rep));
    write_atomic(out_path(cfg, "coda_summary.csv"), coda_summary_csv(rep, chain.meta));
    std::cerr << "diagnose: C shares geweke " << rep.share_geweke << ", stationarity " << rep.share_stationarity
              << ", half-width " << rep.share_halfwidth << "\n";
    return 0;
}

int cmd_generate(const RunConfig& cfg, const Flags& f) {
    announce("generate", cfg);
    if (cfg.output.empty()) throw ConfigError("an output file is required (--output)");
    Scenario sc;
    sc.p = f.gen_p;
    sc.q = f.gen_q;
    sc.q_gamma0 = f.gen_qg;
    sc.r0 = f.gen_r;
    sc.n = f.gen_n;
    sc.n_replicates = 1;
    sc.seed = cfg.seed;
    Rng rng(cfg.seed, 0);
    auto [data, truth] = generate_dgp(sc, rng, f.gen_noise);
    std::vector<std::string> dates;
    if (!f.gen_start_date.empty()) {
        // Quarterly labels YYYYQk starting at the given quarter.
        if (f.gen_start_date.size() != 6 || f.gen_start_date[4] != 'Q') {
            throw ConfigError("--start-quarter must look like 2014Q1");
        }
        int year = std::stoi(f.gen_start_date.substr(0, 4));
        int quarter = f.gen_start_date[5] - '0';
        if (quarter < 1 || quarter > 4) throw ConfigError("--start-quarter must look like 2014Q1");
        for (int i = 0; i < sc.n; ++i) {
            dates.push_back(std::to_string(year) + "Q" + std::to_string(quarter));
            if (++quarter == 5) {
                quarter = 1;
                ++year;
            }
        }
    }
    write_atomic(cfg.output, dataset_to_csv(data, dates));
    if (!f.gen_truth.empty()) {
        Json js;
        js["gamma0"] = gamma_bits(truth.gamma0);
        js["C0"] = matrix_json(truth.C0);
        js["Sigma0_diagonal"] = std::vector<double>(truth.Sigma0.diagonal().data(),
                                                    truth.Sigma0.diagonal().data() + truth.Sigma0.rows());
        write_atomic(f.gen_truth, js.dump(2) + "\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian partial reduced-rank regression"};
    app.require_subcommand(1);
    Flags f;

    auto* sim = app.add_subcommand("simulate", "run simulation scenarios and write a report");
    add_common(sim, f);
    sim->add_option("--grid", f.grid, "named scenario grid (table1)");
    sim->add_option("--scenario", f.scenarios, "scenario p,q,q_gamma,r,n (repeatable)");
    sim->add_option("--replicates", f.replicates, "replicates per scenario");

    auto* fit = app.add_subcommand("fit", "fit a model to a CSV dataset");
    add_common(fit, f);
    add_data(fit, f);

    auto* fc = app.add_subcommand("forecast", "rolling one-step-ahead forecast");
    add_common(fc, f);
    add_data(fc, f);
    fc->add_option("--window", f.window, "rolling window length");

    auto* diag = app.add_subcommand("diagnose", "convergence diagnostics for a chain file");
    add_common(diag, f);
    diag->add_option("--chain", f.chain, "chain file written by fit");

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset as CSV");
    add_common(gen, f);
    gen->add_option("--p", f.gen_p, "predictors");
    gen->add_option("--q", f.gen_q, "responses");
    gen->add_option("--q-gamma", f.gen_qg, "low-rank responses");
    gen->add_option("--r", f.gen_r, "rank");
    gen->add_option("--n", f.gen_n, "rows");
    gen->add_option("--noise", f.gen_noise, "error scale multiplier");
    gen->add_option("--start-quarter", f.gen_start_date, "add a date column of quarters from e.g. 2014Q1");
    gen->add_option("--truth", f.gen_truth, "also write the generating parameters as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg = resolve(f);
        if (sim->parsed()) return cmd_simulate(cfg);
        if (fit->parsed()) return cmd_fit(cfg);
        if (fc->parsed()) return cmd_forecast(cfg);
        if (diag->parsed()) return cmd_diagnose(cfg);
        if (gen->parsed()) return cmd_generate(cfg, f);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
