#pragma once

// Derived statistics over model records: macro-averaged scores, improvement
// factors against a baseline, Pareto frontiers, and plot-data emission.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "relkd/error.hpp"

namespace relkd::analysis {

namespace fs = std::filesystem;

enum class Orientation { lower_better, higher_better };

struct CurvePoint {
    std::size_t batch_size = 0;
    double latency_ms = 0.0;
    double throughput_sps = 0.0;
    std::optional<double> j_per_sample;
};

struct ModelRecord {
    std::string id;
    std::map<std::string, double> scores;  // language -> score in [0, 100]
    std::optional<double> latency_bs1_ms;
    std::optional<double> peak_throughput_sps;
    std::optional<double> optimal_j_per_sample;
    std::vector<CurvePoint> curve;
};

struct ParetoPoint {
    std::string id;
    double score = 0.0;
    double metric = 0.0;
    Orientation orientation = Orientation::lower_better;
};

inline double macro_average(const std::map<std::string, double>& scores) {
    if (scores.empty()) throw ContractError("macro_average: no languages");
    double s = 0.0;
    for (const auto& [lang, v] : scores) s += v;
    return s / static_cast<double>(scores.size());
}

/// How many times better the candidate is than the baseline.
inline double improvement_factor(double baseline, double candidate, Orientation o) {
    if (!(baseline > 0) || !(candidate > 0) || !std::isfinite(baseline) || !std::isfinite(candidate)) {
        throw ContractError("improvement_factor: inputs must be finite and > 0");
    }
    return o == Orientation::lower_better ? baseline / candidate : candidate / baseline;
}

/// q dominates p when q is at least as good on both axes and strictly better on one.
inline bool dominates(const ParetoPoint& q, const ParetoPoint& p) {
    const bool metric_ge = q.orientation == Orientation::lower_better ? q.metric <= p.metric : q.metric >= p.metric;
    const bool metric_gt = q.orientation == Orientation::lower_better ? q.metric < p.metric : q.metric > p.metric;
    return metric_ge && q.score >= p.score && (metric_gt || q.score > p.score);
}

/// Non-dominated points sorted by metric (then id); exact duplicates are all kept.
inline std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
    for (const auto& p : points) {
        if (p.orientation != points.front().orientation) throw ContractError("pareto_frontier: mixed orientations");
        if (!std::isfinite(p.score) || !std::isfinite(p.metric)) throw ContractError("pareto_frontier: non-finite point " + p.id);
    }
    std::vector<ParetoPoint> out;
    for (const auto& p : points) {
        bool dominated = false;
        for (const auto& q : points) dominated = dominated || dominates(q, p);
        if (!dominated) out.push_back(p);
    }
    std::sort(out.begin(), out.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
        return a.metric != b.metric ? a.metric < b.metric : a.id < b.id;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != header) throw FormatError(path.string() + ": expected header '" + header + "', found '" + line + "'");
    const auto cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',') + 1);
    std::vector<std::vector<std::string>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto c = line.find(',', start);
            f.push_back(line.substr(start, c - start));
            if (c == std::string::npos) break;
            start = c + 1;
        }
        if (f.size() != cols) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                              " fields, found " + std::to_string(f.size()));
        }
        f.push_back(std::to_string(lineno));
        rows.push_back(std::move(f));
    }
    return rows;
}

inline double number(const std::string& s, const fs::path& path, const std::string& lineno) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || !std::isfinite(v)) {
        throw FormatError(path.string() + ":" + lineno + ": '" + s + "' is not a finite number");
    }
    return v;
}

inline ModelRecord& record_for(std::vector<ModelRecord>& recs, const std::string& id) {
    for (auto& r : recs) {
        if (r.id == id) return r;
    }
    recs.push_back({});
    recs.back().id = id;
    return recs.back();
}

}  // namespace detail

/// `model,lang,score` rows into records (first-appearance order).
inline void ingest_scores(std::vector<ModelRecord>& recs, const fs::path& path) {
    for (const auto& f : detail::read_csv(path, "model,lang,score")) {
        const double v = detail::number(f[2], path, f[3]);
        if (v < 0 || v > 100) {
            throw FormatError(path.string() + ":" + f[3] + ": score " + f[2] + " outside [0, 100]");
        }
        auto& r = detail::record_for(recs, f[0]);
        if (!r.scores.emplace(f[1], v).second) {
            throw FormatError(path.string() + ":" + f[3] + ": duplicate score for " + f[0] + "/" + f[1]);
        }
    }
}

/// `model,latency_bs1_ms,peak_throughput_sps,optimal_j_per_sample` rows into records.
inline void ingest_efficiency(std::vector<ModelRecord>& recs, const fs::path& path) {
    for (const auto& f : detail::read_csv(path, "model,latency_bs1_ms,peak_throughput_sps,optimal_j_per_sample")) {
        double v[3];
        for (int i = 0; i < 3; ++i) {
            v[i] = detail::number(f[static_cast<std::size_t>(i) + 1], path, f[4]);
            if (!(v[i] > 0)) throw FormatError(path.string() + ":" + f[4] + ": efficiency metrics must be > 0");
        }
        auto& r = detail::record_for(recs, f[0]);
        if (r.latency_bs1_ms) throw FormatError(path.string() + ":" + f[4] + ": duplicate model " + f[0]);
        r.latency_bs1_ms = v[0];
        r.peak_throughput_sps = v[1];
        r.optimal_j_per_sample = v[2];
    }
}

/// Per-batch-size curves from a bench report CSV.
inline void ingest_bench_curve(std::vector<ModelRecord>& recs, const fs::path& path) {
    const auto rows = detail::read_csv(path, "model,batch_size,latency_ms_mean,throughput_sps,mean_watts,j_per_sample");
    for (const auto& f : rows) {
        if (f[2].empty() || f[3].empty()) continue;  // failed sweep row
        CurvePoint c;
        c.batch_size = static_cast<std::size_t>(detail::number(f[1], path, f[6]));
        c.latency_ms = detail::number(f[2], path, f[6]);
        c.throughput_sps = detail::number(f[3], path, f[6]);
        if (!f[5].empty()) c.j_per_sample = detail::number(f[5], path, f[6]);
        detail::record_for(recs, f[0]).curve.push_back(c);
    }
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string fixed1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

inline void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Two-column figure with a frontier flag; rows in input order.
inline std::string scatter_csv(const std::string& header, const std::vector<ParetoPoint>& pts, bool score_is_axis) {
    std::set<std::string> on;
    for (const auto& p : pareto_frontier(pts)) on.insert(p.id);
    std::string out = header + ",on_frontier\n";
    for (const auto& p : pts) {
        out += p.id + "," + num(p.metric) + "," + num(score_is_axis ? p.score : -p.score) + "," +
               (on.count(p.id) ? "true" : "false") + "\n";
    }
    return out;
}

}  // namespace detail

struct FigureOutput {
    std::vector<fs::path> written;
    std::vector<std::string> warnings;
};

/// One CSV per figure in out_dir. A figure whose fields are missing for every
/// record is skipped with a warning; records missing a field are left out of it.
inline FigureOutput emit_figures(const std::vector<ModelRecord>& recs, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    FigureOutput out;
    auto scatter = [&](const std::string& file, const std::string& header, Orientation o, auto metric_of,
                       auto score_of, bool score_is_axis) {
        std::vector<ParetoPoint> pts;
        std::vector<std::string> missing;
        for (const auto& r : recs) {
            auto m = metric_of(r);
            auto s = score_of(r);
            if (m && s) pts.push_back({r.id, *s, *m, o});
            else missing.push_back(r.id);
        }
        if (pts.empty()) {
            out.warnings.push_back(file + ": skipped, no record has the required fields");
            return;
        }
        for (const auto& id : missing) out.warnings.push_back(file + ": " + id + " lacks required fields, left out");
        detail::write_file(out_dir / file, detail::scatter_csv(header, pts, score_is_axis));
        out.written.push_back(out_dir / file);
    };
    auto score = [](const ModelRecord& r) -> std::optional<double> {
        if (r.scores.empty()) return std::nullopt;
        return macro_average(r.scores);
    };
    auto latency = [](const ModelRecord& r) { return r.latency_bs1_ms; };
    auto throughput = [](const ModelRecord& r) { return r.peak_throughput_sps; };
    auto energy = [](const ModelRecord& r) { return r.optimal_j_per_sample; };
    auto neg_energy = [](const ModelRecord& r) -> std::optional<double> {
        if (!r.optimal_j_per_sample) return std::nullopt;
        return -*r.optimal_j_per_sample;
    };

    scatter("score_vs_latency.csv", "model,latency_bs1_ms,score", Orientation::lower_better, latency, score, true);
    scatter("score_vs_throughput.csv", "model,peak_throughput_sps,score", Orientation::higher_better, throughput, score,
            true);
    scatter("score_vs_optimal_energy.csv", "model,optimal_j_per_sample,score", Orientation::lower_better, energy, score,
            true);
    // Both axes lower-is-better: energy enters as a negated score.
    scatter("energy_vs_latency.csv", "model,latency_bs1_ms,optimal_j_per_sample", Orientation::lower_better, latency,
            neg_energy, false);

    std::string curve = "model,batch_size,throughput_sps,j_per_sample\n";
    bool any_curve = false;
    for (const auto& r : recs) {
        for (const auto& c : r.curve) {
            if (!c.j_per_sample) continue;
            curve += r.id + "," + std::to_string(c.batch_size) + "," + detail::num(c.throughput_sps) + "," +
                     detail::num(*c.j_per_sample) + "\n";
            any_curve = true;
        }
    }
    if (any_curve) {
        detail::write_file(out_dir / "energy_vs_throughput_per_batch.csv", curve);
        out.written.push_back(out_dir / "energy_vs_throughput_per_batch.csv");
    } else {
        out.warnings.push_back("energy_vs_throughput_per_batch.csv: skipped, no per-batch-size curves with energy");
    }
    return out;
}

struct SummaryRow {
    std::string id;
    std::map<std::string, double> scores;
    std::optional<double> average;
    std::optional<double> latency_ms, latency_factor;
    std::optional<double> throughput_sps, throughput_factor;
    std::optional<double> j_per_sample, energy_factor;
    bool on_latency_frontier = false;
    bool on_energy_frontier = false;
};

struct Summary {
    std::string baseline;
    std::vector<std::string> languages;
    std::vector<SummaryRow> rows;
    std::vector<std::string> latency_frontier;  // sorted by latency
    std::vector<std::string> energy_frontier;   // sorted by J/sample
};

/// Averages, factors against the baseline, and both frontiers.
inline Summary summarize(const std::vector<ModelRecord>& recs, const std::string& baseline) {
    const ModelRecord* base = nullptr;
    for (const auto& r : recs) {
        if (r.id == baseline) base = &r;
    }
    if (!base || !base->latency_bs1_ms) throw ContractError("baseline '" + baseline + "' has no efficiency row");
    Summary s;
    s.baseline = baseline;
    std::set<std::string> langs;
    std::vector<ParetoPoint> lat_pts, en_pts;
    for (const auto& r : recs) {
        SummaryRow row;
        row.id = r.id;
        row.scores = r.scores;
        for (const auto& [l, v] : r.scores) langs.insert(l);
        if (!r.scores.empty()) row.average = macro_average(r.scores);
        if (r.latency_bs1_ms) {
            row.latency_ms = r.latency_bs1_ms;
            row.latency_factor = improvement_factor(*base->latency_bs1_ms, *r.latency_bs1_ms, Orientation::lower_better);
            row.throughput_sps = r.peak_throughput_sps;
            row.throughput_factor =
                improvement_factor(*base->peak_throughput_sps, *r.peak_throughput_sps, Orientation::higher_better);
            row.j_per_sample = r.optimal_j_per_sample;
            row.energy_factor =
                improvement_factor(*base->optimal_j_per_sample, *r.optimal_j_per_sample, Orientation::lower_better);
            if (row.average) {
                lat_pts.push_back({r.id, *row.average, *r.latency_bs1_ms, Orientation::lower_better});
                en_pts.push_back({r.id, *row.average, *r.optimal_j_per_sample, Orientation::lower_better});
            }
        }
        s.rows.push_back(std::move(row));
    }
    s.languages.assign(langs.begin(), langs.end());
    for (const auto& p : pareto_frontier(lat_pts)) s.latency_frontier.push_back(p.id);
    for (const auto& p : pareto_frontier(en_pts)) s.energy_frontier.push_back(p.id);
    for (auto& row : s.rows) {
        row.on_latency_frontier = std::count(s.latency_frontier.begin(), s.latency_frontier.end(), row.id) > 0;
        row.on_energy_frontier = std::count(s.energy_frontier.begin(), s.energy_frontier.end(), row.id) > 0;
    }
    return s;
}

/// Table-shaped CSV: scores and the average at one decimal, raw metrics in
/// full precision, factors at one decimal.
inline std::string summary_csv(const Summary& s) {
    auto opt = [](const std::optional<double>& v, bool one_dp) {
        return v ? (one_dp ? detail::fixed1(*v) : detail::num(*v)) : std::string();
    };
    std::string out = "model";
    for (const auto& l : s.languages) out += "," + l;
    out += ",avg,latency_bs1_ms,latency_impr,peak_throughput_sps,throughput_impr,optimal_j_per_sample,j_per_sample_impr\n";
    for (const auto& r : s.rows) {
        out += r.id;
        for (const auto& l : s.languages) {
            auto it = r.scores.find(l);
            out += "," + (it == r.scores.end() ? std::string() : detail::fixed1(it->second));
        }
        out += "," + opt(r.average, true) + "," + opt(r.latency_ms, false) + "," + opt(r.latency_factor, true) + "," +
               opt(r.throughput_sps, false) + "," + opt(r.throughput_factor, true) + "," + opt(r.j_per_sample, false) +
               "," + opt(r.energy_factor, true) + "\n";
    }
    return out;
}

inline nlohmann::json to_json(const Summary& s) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
        rows.push_back({{"model", r.id},
                        {"scores", r.scores},
                        {"avg", opt(r.average)},
                        {"latency_bs1_ms", opt(r.latency_ms)},
                        {"latency_impr", opt(r.latency_factor)},
                        {"peak_throughput_sps", opt(r.throughput_sps)},
                        {"throughput_impr", opt(r.throughput_factor)},
                        {"optimal_j_per_sample", opt(r.j_per_sample)},
                        {"j_per_sample_impr", opt(r.energy_factor)},
                        {"on_latency_frontier", r.on_latency_frontier},
                        {"on_energy_frontier", r.on_energy_frontier}});
    }
    return {{"baseline", s.baseline},
            {"languages", s.languages},
            {"rows", rows},
            {"latency_frontier", s.latency_frontier},
            {"energy_frontier", s.energy_frontier}};
}

inline void write_summary(const Summary& s, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    detail::write_file(out_dir / "summary.csv", summary_csv(s));
    detail::write_file(out_dir / "summary.json", to_json(s).dump(2) + "\n");
}

}  // namespace relkd::analysis
