#pragma once

// CSV ingestion, chain files, report writers. All writers go through
// write_atomic (temp file then rename).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "bprr/baselines.hpp"
#include "bprr/diagnostics.hpp"
#include "bprr/errors.hpp"
#include "bprr/linalg.hpp"
#include "bprr/sampler.hpp"

namespace bprr {

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw Error("cannot rename '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

/// Shortest text that is exact to 17 significant digits.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;  // rows[i] has header.size() cells
    std::vector<int> line_of_row;                // 1-based source line

    int column(const std::string& name) const {
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (header[j] == name) return static_cast<int>(j);
        }
        return -1;
    }
};

/// RFC 4180 style: comma separated, optional double quotes with "" escapes,
/// header row required. Quoted fields may not span lines.
inline CsvTable parse_csv(const std::string& text, const std::string& source = "csv") {
    CsvTable table;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto split = [&](const std::string& l) {
        std::vector<std::string> cells;
        std::string cur;
        bool quoted = false;
        for (std::size_t i = 0; i < l.size(); ++i) {
            const char c = l[i];
            if (quoted) {
                if (c == '"' && i + 1 < l.size() && l[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else if (c == '"') {
                    quoted = false;
                } else {
                    cur += c;
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                cells.push_back(std::move(cur));
                cur.clear();
            } else if (c != '\r') {
                cur += c;
            }
        }
        if (quoted) throw DataError(source + ":" + std::to_string(lineno) + ": unterminated quoted field");
        cells.push_back(std::move(cur));
        return cells;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split(line);
        if (table.header.empty()) {
            table.header = std::move(cells);
            continue;
        }
        if (cells.size() != table.header.size()) {
            throw DataError(source + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(table.header.size()) + " fields, found " + std::to_string(cells.size()));
        }
        table.rows.push_back(std::move(cells));
        table.line_of_row.push_back(lineno);
    }
    if (table.header.empty()) throw DataError(source + ": missing header row");
    return table;
}

struct IngestOptions {
    bool standardize = false;
    std::string date_column;        // empty: none
    std::string period_from;        // inclusive, compared as text (2014Q1, 2014-01-01, ...)
    std::string period_to;          // inclusive
};

/// Centre each column and scale to unit sample standard deviation.
inline void standardize_columns(Matrix& m, const std::vector<std::string>& names) {
    if (m.rows() < 2) throw DataError("standardization needs at least 2 rows");
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        auto col = m.col(j);
        col.array() -= col.mean();
        col.array() -= col.mean();
        const double sd = std::sqrt(col.squaredNorm() / static_cast<double>(m.rows() - 1));
        if (!(sd > 0.0)) {
            throw DataError("column '" + (j < static_cast<Eigen::Index>(names.size()) ? names[j] : std::to_string(j)) +
                            "' is constant and cannot be standardized");
        }
        col /= sd;
    }
}

inline Dataset dataset_from_table(const CsvTable& table, const std::vector<std::string>& responses,
                                  const std::vector<std::string>& predictors, const IngestOptions& opt,
                                  const std::string& source = "csv") {
    auto locate = [&](const std::string& name) {
        const int j = table.column(name);
        if (j < 0) throw DataError(source + ": column '" + name + "' not found");
        return j;
    };
    if (responses.empty()) throw ConfigError("no response columns selected");
    if (predictors.empty()) throw ConfigError("no predictor columns selected");
    std::vector<int> ycols, xcols;
    for (const auto& s : responses) ycols.push_back(locate(s));
    for (const auto& s : predictors) xcols.push_back(locate(s));

    std::vector<std::size_t> keep;
    if (!opt.period_from.empty() || !opt.period_to.empty()) {
        if (opt.date_column.empty()) throw ConfigError("a period filter requires a date column");
        const int dj = locate(opt.date_column);
        for (std::size_t i = 0; i < table.rows.size(); ++i) {
            const auto& d = table.rows[i][dj];
            if (!opt.period_from.empty() && d < opt.period_from) continue;
            if (!opt.period_to.empty() && d > opt.period_to) continue;
            keep.push_back(i);
        }
    } else {
        for (std::size_t i = 0; i < table.rows.size(); ++i) keep.push_back(i);
    }
    if (keep.empty()) throw DataError(source + ": no rows selected");

    auto extract = [&](const std::vector<int>& cols) {
        Matrix m(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t i = 0; i < keep.size(); ++i) {
            const auto& row = table.rows[keep[i]];
            for (std::size_t j = 0; j < cols.size(); ++j) {
                const auto& cell = row[cols[j]];
                const std::string where = source + ":" + std::to_string(table.line_of_row[keep[i]]) + ": column '" +
                                          table.header[cols[j]] + "'";
                const auto v = parse_double(cell);
                if (!v) {
                    if (cell.find_first_not_of(" \t") == std::string::npos) throw DataError(where + ": missing value");
                    throw DataError(where + ": non-numeric value '" + cell + "'");
                }
                if (!std::isfinite(*v)) throw DataError(where + ": non-finite value '" + cell + "'");
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = *v;
            }
        }
        return m;
    };

    Dataset data;
    data.Y = extract(ycols);
    data.X = extract(xcols);
    data.response_names = responses;
    data.predictor_names = predictors;
    if (opt.standardize) {
        standardize_columns(data.Y, responses);
        standardize_columns(data.X, predictors);
        data.standardized = true;
    }
    data.validate();
    return data;
}

inline Dataset ingest_csv(const std::string& path, const std::vector<std::string>& responses,
                          const std::vector<std::string>& predictors, const IngestOptions& opt = {}) {
    return dataset_from_table(parse_csv(read_file(path), path), responses, predictors, opt, path);
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string dataset_to_csv(const Dataset& data, const std::vector<std::string>& dates = {}) {
    std::ostringstream os;
    std::vector<std::string> head;
    if (!dates.empty()) head.push_back("date");
    for (int j = 0; j < data.q(); ++j) {
        head.push_back(j < static_cast<int>(data.response_names.size()) ? data.response_names[j]
                                                                         : "y" + std::to_string(j + 1));
    }
    for (int j = 0; j < data.p(); ++j) {
        head.push_back(j < static_cast<int>(data.predictor_names.size()) ? data.predictor_names[j]
                                                                          : "x" + std::to_string(j + 1));
    }
    for (std::size_t j = 0; j < head.size(); ++j) os << (j ? "," : "") << csv_escape(head[j]);
    os << '\n';
    for (int i = 0; i < data.n(); ++i) {
        bool first = true;
        auto put = [&](const std::string& s) {
            os << (first ? "" : ",") << s;
            first = false;
        };
        if (!dates.empty()) put(csv_escape(dates.at(static_cast<std::size_t>(i))));
        for (int j = 0; j < data.q(); ++j) put(format_double(data.Y(i, j)));
        for (int j = 0; j < data.p(); ++j) put(format_double(data.X(i, j)));
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Chain files
// ---------------------------------------------------------------------------

inline constexpr int kChainFormatVersion = 1;

/// Header: "#bprr-chain" followed by key=value pairs. Body: one line per draw,
/// space separated: iteration, gamma bits, r, rho, vec(C), vec(Sigma).
inline std::string chain_to_string(const ChainOutput& chain) {
    const auto& m = chain.meta;
    std::ostringstream os;
    os << "#bprr-chain format_version=" << kChainFormatVersion << " p=" << m.p << " q=" << m.q << " n=" << m.n
       << " seed=" << m.seed << " n_iter=" << m.n_iter << " burn_in=" << m.burn_in << " thin=" << m.thin
       << " model=" << m.model << " draws=" << chain.draws.size() << " msss_proposals=" << m.msss_proposals
       << " msss_accepts=" << m.msss_accepts << " evidence_evaluations=" << m.evidence_evaluations
       << " evidence_nonconverged=" << m.evidence_nonconverged << '\n';
    for (const auto& d : chain.draws) {
        if (d.C.rows() != m.p || d.C.cols() != m.q || d.Sigma.rows() != m.q || d.Sigma.cols() != m.q) {
            throw DimensionError("chain draw does not match header dimensions");
        }
        os << d.iteration << ' ' << gamma_bits(d.gamma) << ' ' << d.r << ' ' << format_double(d.rho);
        for (Eigen::Index k = 0; k < d.C.size(); ++k) os << ' ' << format_double(d.C.data()[k]);
        for (Eigen::Index k = 0; k < d.Sigma.size(); ++k) os << ' ' << format_double(d.Sigma.data()[k]);
        os << '\n';
    }
    return os.str();
}

inline void write_chain(const ChainOutput& chain, const std::string& path) { write_atomic(path, chain_to_string(chain)); }

inline ChainOutput chain_from_string(const std::string& text, const std::string& source = "chain") {
    auto fail = [&](int line, const std::string& msg) -> DataError {
        return DataError(source + ":" + std::to_string(line) + ": " + msg);
    };
    if (text.empty()) throw fail(1, "empty chain file");
    if (text.back() != '\n') {
        const auto lines = static_cast<int>(std::count(text.begin(), text.end(), '\n')) + 1;
        throw fail(lines, "truncated chain file (last line is incomplete)");
    }

    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::istringstream hs(line);
    std::string tag;
    hs >> tag;
    if (tag != "#bprr-chain") throw fail(1, "not a chain file (missing '#bprr-chain' header)");
    std::map<std::string, std::string> kv;
    for (std::string tok; hs >> tok;) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw fail(1, "malformed header field '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto get_long = [&](const std::string& key) -> long long {
        const auto it = kv.find(key);
        if (it == kv.end()) throw fail(1, "header lacks '" + key + "'");
        long long v = 0;
        const auto& s = it->second;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw fail(1, "bad header value for '" + key + "'");
        return v;
    };
    const long long version = get_long("format_version");
    if (version != kChainFormatVersion) {
        throw fail(1, "unsupported chain format version " + std::to_string(version) + " (expected " +
                          std::to_string(kChainFormatVersion) + ")");
    }
    ChainOutput chain;
    auto& m = chain.meta;
    m.p = static_cast<int>(get_long("p"));
    m.q = static_cast<int>(get_long("q"));
    m.n = static_cast<int>(get_long("n"));
    m.seed = static_cast<std::uint64_t>(get_long("seed"));
    m.n_iter = static_cast<int>(get_long("n_iter"));
    m.burn_in = static_cast<int>(get_long("burn_in"));
    m.thin = static_cast<int>(get_long("thin"));
    m.model = kv.count("model") ? kv["model"] : "bprr";
    m.msss_proposals = get_long("msss_proposals");
    m.msss_accepts = get_long("msss_accepts");
    m.evidence_evaluations = get_long("evidence_evaluations");
    m.evidence_nonconverged = get_long("evidence_nonconverged");
    const long long expected_draws = get_long("draws");
    if (m.p < 1 || m.q < 1) throw fail(1, "header dimensions must be positive");

    const std::size_t fields = 4 + static_cast<std::size_t>(m.p * m.q + m.q * m.q);
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string_view> tok;
        std::string_view sv(line);
        while (!sv.empty()) {
            const auto s = sv.find_first_not_of(' ');
            if (s == std::string_view::npos) break;
            sv.remove_prefix(s);
            const auto e = sv.find(' ');
            tok.push_back(sv.substr(0, e));
            sv.remove_prefix(e == std::string_view::npos ? sv.size() : e);
        }
        if (tok.size() != fields) {
            throw fail(lineno, "expected " + std::to_string(fields) + " fields, found " + std::to_string(tok.size()));
        }
        Draw d;
        const auto it = parse_double(tok[0]);
        const auto r = parse_double(tok[2]);
        const auto rho = parse_double(tok[3]);
        if (!it || !r || !rho) throw fail(lineno, "malformed numeric field");
        d.iteration = static_cast<int>(*it);
        d.r = static_cast<int>(*r);
        d.rho = *rho;
        const std::string bits(tok[1]);
        if (static_cast<int>(bits.size()) != m.q || bits.find_first_not_of("01") != std::string::npos) {
            throw fail(lineno, "malformed allocation '" + bits + "'");
        }
        d.gamma = gamma_from_bits(bits);
        d.C.resize(m.p, m.q);
        d.Sigma.resize(m.q, m.q);
        std::size_t k = 4;
        for (Eigen::Index e = 0; e < d.C.size(); ++e, ++k) {
            const auto v = parse_double(tok[k]);
            if (!v) throw fail(lineno, "malformed value in field " + std::to_string(k + 1));
            d.C.data()[e] = *v;
        }
        for (Eigen::Index e = 0; e < d.Sigma.size(); ++e, ++k) {
            const auto v = parse_double(tok[k]);
            if (!v) throw fail(lineno, "malformed value in field " + std::to_string(k + 1));
            d.Sigma.data()[e] = *v;
        }
        chain.draws.push_back(std::move(d));
    }
    if (static_cast<long long>(chain.draws.size()) != expected_draws) {
        throw fail(lineno, "truncated chain file: header announces " + std::to_string(expected_draws) +
                               " draws, found " + std::to_string(chain.draws.size()));
    }
    return chain;
}

inline ChainOutput read_chain(const std::string& path) { return chain_from_string(read_file(path), path); }

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string gamma_histogram_csv(const ChainSummary& s) {
    std::ostringstream os;
    os << "gamma,q_gamma,frequency\n";
    auto sorted = s.gamma_posterior;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [bits, f] : sorted) {
        os << bits << ',' << count_ones(gamma_from_bits(bits)) << ',' << format_double(f) << '\n';
    }
    return os.str();
}

inline std::string rank_histogram_csv(const ChainSummary& s) {
    std::ostringstream os;
    os << "r,frequency\n";
    for (const auto& [r, f] : s.r_posterior) os << r << ',' << format_double(f) << '\n';
    return os.str();
}

inline std::string trace_csv(const ChainOutput& chain) {
    std::ostringstream os;
    os << "iteration,gamma,q_gamma,r,rho\n";
    for (const auto& d : chain.draws) {
        os << d.iteration << ',' << gamma_bits(d.gamma) << ',' << count_ones(d.gamma) << ',' << d.r << ','
           << format_double(d.rho) << '\n';
    }
    return os.str();
}

inline std::string matrix_csv(const Matrix& m, const std::vector<std::string>& names = {}) {
    std::ostringstream os;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        os << (j ? "," : "")
           << (j < static_cast<Eigen::Index>(names.size()) ? csv_escape(names[j]) : "c" + std::to_string(j + 1));
    }
    os << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << format_double(m(i, j));
        os << '\n';
    }
    return os.str();
}

inline std::string scenario_report_header() {
    return "p,q,q_gamma,r,n,q_gamma_hat,r_hat,accuracy,f1,mse_bprr_x100,mse_fr_x100,mse_rr_x100,mse_prr_star_x100,"
           "replicates,replicates_ok\n";
}

inline std::string scenario_report_row(const ScenarioReport& rep) {
    const auto& s = rep.scenario;
    std::ostringstream os;
    os << s.p << ',' << s.q << ',' << s.q_gamma0 << ',' << s.r0 << ',' << s.n << ',' << format_double(rep.q_gamma_hat)
       << ',' << format_double(rep.r_hat) << ',' << format_double(rep.accuracy) << ',' << format_double(rep.f1);
    for (double v : rep.mse) os << ',' << format_double(100.0 * v);
    os << ',' << rep.replicates.size() << ',' << rep.n_ok << '\n';
    return os.str();
}

inline std::string coda_entries_csv(const CodaReport& rep) {
    std::ostringstream os;
    os << "parameter,geweke_z,geweke_p,geweke_pass,hw_stationarity_p,hw_stationarity_pass,hw_start,hw_mean,"
          "hw_halfwidth_ratio,hw_halfwidth_pass,degenerate\n";
    auto row = [&](const ParameterDiagnostics& d) {
        os << d.name << ',' << format_double(d.geweke.z) << ',' << format_double(d.geweke.p_value) << ','
           << d.geweke.pass() << ',' << format_double(d.hw.stationarity_p) << ',' << d.hw.stationarity_pass << ','
           << d.hw.start << ',' << format_double(d.hw.mean) << ',' << format_double(d.hw.halfwidth_ratio) << ','
           << d.hw.halfwidth_pass << ',' << (d.geweke.degenerate || d.hw.degenerate) << '\n';
    };
    row(rep.rank);
    for (const auto& e : rep.entries) row(e);
    return os.str();
}

/// One row shaped like the convergence table: r's p-values and ratio, and
/// the share of C entries passing each test.
inline std::string coda_summary_csv(const CodaReport& rep, const ChainMeta& meta) {
    std::ostringstream os;
    os << "p,q,n,r_geweke_p,C_geweke_share,r_hw_stationarity_p,C_hw_stationarity_share,r_hw_halfwidth_ratio,"
          "C_hw_halfwidth_share\n";
    os << meta.p << ',' << meta.q << ',' << meta.n << ',' << format_double(rep.rank.geweke.p_value) << ','
       << format_double(rep.share_geweke) << ',' << format_double(rep.rank.hw.stationarity_p) << ','
       << format_double(rep.share_stationarity) << ',' << format_double(rep.rank.hw.halfwidth_ratio) << ','
       << format_double(rep.share_halfwidth) << '\n';
    return os.str();
}

}  // namespace bprr
