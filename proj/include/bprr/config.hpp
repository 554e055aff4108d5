#pragma once

// Run configuration shared by the command-line subcommands. Values are
// layered: built-in defaults, then a JSON config file, then command-line
// flags. The effective configuration serializes back to JSON.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bprr/baselines.hpp"
#include "bprr/errors.hpp"
#include "bprr/linalg.hpp"
#include "bprr/sampler.hpp"

namespace bprr {

using Json = nlohmann::ordered_json;

struct RunConfig {
    std::uint64_t seed = 1;

    // Priors; nu and Psi default to q + 1 and I_q once q is known.
    double a_rho = 1.0;
    double b_rho = 1.0;
    double a = 0.5;
    double b = 0.5;
    double d = 0.5;
    std::optional<double> nu;
    double psi_scale = 1.0;

    // Sampler.
    int n_iter = 5000;
    int burn_in = 2000;
    int thin = 1;
    double grrr_tol = GrrrConfig{}.tol;
    int grrr_max_iter = GrrrConfig{}.max_iter;
    int grrr_restarts = GrrrConfig{}.n_restarts;
    std::string model = "bprr";
    std::string fixed_gamma;  // bit string; PRR* only, random when empty

    // Data.
    std::string data;
    std::vector<std::string> responses;
    std::vector<std::string> predictors;
    bool standardize = false;
    std::string date_column;
    std::string period_from;
    std::string period_to;

    // simulate
    std::string grid = "table1";
    std::vector<Scenario> scenarios;  // overrides grid when non-empty
    int replicates = 10;

    // forecast
    int window = 40;

    // diagnose
    std::string chain;

    std::string output;

    Hyperparameters hyperparameters(int q) const {
        Hyperparameters h = Hyperparameters::defaults(q);
        h.a_rho = a_rho;
        h.b_rho = b_rho;
        h.a = a;
        h.b = b;
        h.d = d;
        if (nu) h.nu = *nu;
        h.Psi = psi_scale * Matrix::Identity(q, q);
        h.validate(q);
        return h;
    }

    SamplerConfig sampler() const {
        SamplerConfig s;
        s.n_iter = n_iter;
        s.burn_in = burn_in;
        s.thin = thin;
        s.seed = seed;
        s.stream = 0;
        s.grrr.tol = grrr_tol;
        s.grrr.max_iter = grrr_max_iter;
        s.grrr.n_restarts = grrr_restarts;
        s.kind = model_kind_from(model);
        return s;
    }

    Json to_json() const {
        Json j;
        j["seed"] = seed;
        j["hyper"] = {{"a_rho", a_rho}, {"b_rho", b_rho}, {"a", a}, {"b", b}, {"d", d},
                      {"nu", nu ? Json(*nu) : Json("q+1")}, {"psi_scale", psi_scale}};
        j["sampler"] = {{"n_iter", n_iter},   {"burn_in", burn_in},
                        {"thin", thin},       {"grrr_tol", grrr_tol},
                        {"grrr_max_iter", grrr_max_iter}, {"grrr_restarts", grrr_restarts}};
        j["model"] = model;
        j["fixed_gamma"] = fixed_gamma;
        j["data"] = {{"path", data},           {"responses", responses},     {"predictors", predictors},
                     {"standardize", standardize}, {"date_column", date_column}, {"period_from", period_from},
                     {"period_to", period_to}};
        Json sc = Json::array();
        for (const auto& s : scenarios) sc.push_back({s.p, s.q, s.q_gamma0, s.r0, s.n});
        j["simulate"] = {{"grid", grid}, {"scenarios", sc}, {"replicates", replicates}};
        j["forecast"] = {{"window", window}};
        j["chain"] = chain;
        j["output"] = output;
        return j;
    }
};

namespace detail {

template <typename T>
void take(const Json& obj, const char* key, T& target, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        target = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: '" + where + key + "' has the wrong type");
    }
}

inline void reject_unknown(const Json& obj, const std::vector<std::string>& known, const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [k, v] : obj.items()) {
        bool ok = false;
        for (const auto& name : known) ok = ok || name == k;
        if (!ok) throw ConfigError("config: unknown key '" + where + k + "'");
    }
}

}  // namespace detail

/// Overlays the keys present in `j` onto `cfg`. Unknown keys are errors.
inline void apply_json(RunConfig& cfg, const Json& j) {
    using detail::take;
    detail::reject_unknown(j, {"seed", "hyper", "sampler", "model", "fixed_gamma", "data", "simulate", "forecast",
                               "chain", "output"},
                           "");
    take(j, "seed", cfg.seed, "");
    take(j, "model", cfg.model, "");
    take(j, "fixed_gamma", cfg.fixed_gamma, "");
    take(j, "chain", cfg.chain, "");
    take(j, "output", cfg.output, "");
    if (j.contains("hyper")) {
        const auto& h = j["hyper"];
        detail::reject_unknown(h, {"a_rho", "b_rho", "a", "b", "d", "nu", "psi_scale"}, "hyper.");
        take(h, "a_rho", cfg.a_rho, "hyper.");
        take(h, "b_rho", cfg.b_rho, "hyper.");
        take(h, "a", cfg.a, "hyper.");
        take(h, "b", cfg.b, "hyper.");
        take(h, "d", cfg.d, "hyper.");
        take(h, "psi_scale", cfg.psi_scale, "hyper.");
        if (h.contains("nu") && h["nu"].is_number()) cfg.nu = h["nu"].get<double>();
    }
    if (j.contains("sampler")) {
        const auto& s = j["sampler"];
        detail::reject_unknown(s, {"n_iter", "burn_in", "thin", "grrr_tol", "grrr_max_iter", "grrr_restarts"},
                               "sampler.");
        take(s, "n_iter", cfg.n_iter, "sampler.");
        take(s, "burn_in", cfg.burn_in, "sampler.");
        take(s, "thin", cfg.thin, "sampler.");
        take(s, "grrr_tol", cfg.grrr_tol, "sampler.");
        take(s, "grrr_max_iter", cfg.grrr_max_iter, "sampler.");
        take(s, "grrr_restarts", cfg.grrr_restarts, "sampler.");
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        detail::reject_unknown(d, {"path", "responses", "predictors", "standardize", "date_column", "period_from",
                                   "period_to"},
                               "data.");
        take(d, "path", cfg.data, "data.");
        take(d, "responses", cfg.responses, "data.");
        take(d, "predictors", cfg.predictors, "data.");
        take(d, "standardize", cfg.standardize, "data.");
        take(d, "date_column", cfg.date_column, "data.");
        take(d, "period_from", cfg.period_from, "data.");
        take(d, "period_to", cfg.period_to, "data.");
    }
    if (j.contains("simulate")) {
        const auto& s = j["simulate"];
        detail::reject_unknown(s, {"grid", "scenarios", "replicates"}, "simulate.");
        take(s, "grid", cfg.grid, "simulate.");
        take(s, "replicates", cfg.replicates, "simulate.");
        if (s.contains("scenarios")) {
            cfg.scenarios.clear();
            for (const auto& row : s["scenarios"]) {
                if (!row.is_array() || row.size() != 5) {
                    throw ConfigError("config: each simulate.scenarios entry must be [p, q, q_gamma, r, n]");
                }
                Scenario sc;
                sc.p = row[0].get<int>();
                sc.q = row[1].get<int>();
                sc.q_gamma0 = row[2].get<int>();
                sc.r0 = row[3].get<int>();
                sc.n = row[4].get<int>();
                cfg.scenarios.push_back(sc);
            }
        }
    }
    if (j.contains("forecast")) {
        const auto& f = j["forecast"];
        detail::reject_unknown(f, {"window"}, "forecast.");
        take(f, "window", cfg.window, "forecast.");
    }
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": invalid JSON: " + e.what());
    }
}

/// Scenarios for `simulate`: explicit list if given, else the named grid.
inline std::vector<Scenario> resolve_scenarios(const RunConfig& cfg) {
    std::vector<Scenario> out = cfg.scenarios;
    if (out.empty()) {
        if (cfg.grid != "table1") throw ConfigError("unknown scenario grid '" + cfg.grid + "'");
        out = table1_grid();
    }
    for (auto& s : out) {
        s.n_replicates = cfg.replicates;
        s.seed = cfg.seed;
        s.validate();
    }
    return out;
}

}  // namespace bprr
