#pragma once

// Configuration loading, result persistence, plot emission. One structured
// config format (JSON), strict parsing with unknown-key rejection, decimal
// serialization at 17 significant digits (lossless for binary64), and a run
// manifest written last with a checksum for every output file.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridmf/lab.hpp"
#include "gridmf/meanfield.hpp"

namespace gridmf::io {

using nlohmann::json;

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---------------------------------------------------------------------------
// config

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline json plan_to_json(const lab::ExperimentPlan& p) {
    json j;
    j["preset"] = p.name;
    j["seed"] = p.master_seed;
    j["workers"] = p.workers;
    j["d"] = p.d;
    j["B"] = p.B;
    j["alpha"] = p.alpha;
    j["init_modes"] = p.init_modes;
    j["init_amplitude"] = p.init_amplitude;
    json cells = json::array();
    for (const auto& [n, m] : p.cells) cells.push_back({n, m});
    j["cells"] = cells;
    j["T"] = p.T;
    j["dt"] = p.dt;
    j["replicas"] = p.replicas;
    j["record_count"] = p.record_count;
    j["dt_check"] = p.dt_check;
    j["fp_refine_check"] = p.fp_refine_check;
    j["subsample_budget"] = p.subsample_budget;
    j["law_samples"] = p.law_samples;
    j["slope_axis"] = p.slope_axis;
    if (p.eps.n_linked) {
        j["epsilon"] = "n-linked";
        j["epsilon_factor"] = p.eps.factor;
    } else {
        j["epsilon"] = p.eps.value;
    }
    j["fp"] = {{"P", p.fp.P},
               {"n_u", p.fp.n_u},
               {"dt_pde", p.fp.dt_pde},
               {"u_max", p.fp.u_max},
               {"moment_records", p.fp.moment_records}};
    j["model"] = {{"preset", p.model.preset},
                  {"sigma", p.model.sigma},
                  {"tau", p.model.tau},
                  {"tau_slope", p.model.tau_slope},
                  {"input_const", p.model.input_const},
                  {"kernel_scale", p.model.kernel_scale},
                  {"kernel_excite", p.model.kernel_excite},
                  {"kernel_excite_width", p.model.kernel_excite_width},
                  {"kernel_inhibit", p.model.kernel_inhibit},
                  {"kernel_inhibit_width", p.model.kernel_inhibit_width},
                  {"rough_amplitude", p.model.rough_input.amplitude},
                  {"rough_alpha", p.model.rough_input.alpha},
                  {"rough_modes", p.model.rough_input.modes},
                  {"firing", p.model.firing},
                  {"ou_target", p.model.ou_target}};
    return j;
}

inline lab::ExperimentPlan plan_from_json(const json& j) {
    static const std::set<std::string> top = {
        "preset",      "seed",          "workers",        "d",
        "B",           "alpha",         "init_modes",     "init_amplitude",
        "cells",       "N",             "M",              "T",
        "dt",          "replicas",      "record_count",   "dt_check",
        "fp_refine_check", "subsample_budget", "law_samples", "slope_axis",
        "epsilon",     "epsilon_factor", "fp",            "model"};
    detail::reject_unknown(j, top, "top level");
    if (!j.contains("preset")) throw std::invalid_argument("config: missing 'preset'");
    const std::string preset = j.at("preset").get<std::string>();
    lab::ExperimentPlan p =
        (preset == "custom") ? lab::ExperimentPlan{} : lab::preset_plan(preset);
    p.name = preset;
    detail::maybe(j, "seed", p.master_seed);
    detail::maybe(j, "workers", p.workers);
    detail::maybe(j, "d", p.d);
    detail::maybe(j, "B", p.B);
    detail::maybe(j, "alpha", p.alpha);
    detail::maybe(j, "init_modes", p.init_modes);
    detail::maybe(j, "init_amplitude", p.init_amplitude);
    detail::maybe(j, "T", p.T);
    detail::maybe(j, "dt", p.dt);
    detail::maybe(j, "replicas", p.replicas);
    detail::maybe(j, "record_count", p.record_count);
    detail::maybe(j, "dt_check", p.dt_check);
    detail::maybe(j, "fp_refine_check", p.fp_refine_check);
    detail::maybe(j, "subsample_budget", p.subsample_budget);
    detail::maybe(j, "law_samples", p.law_samples);
    detail::maybe(j, "slope_axis", p.slope_axis);

    if (j.contains("cells")) {
        p.cells.clear();
        for (const auto& c : j.at("cells"))
            p.cells.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
    } else if (j.contains("N") || j.contains("M")) {
        std::vector<int> Ns, Ms;
        auto read_list = [](const json& v, std::vector<int>& dst) {
            if (v.is_array())
                for (const auto& e : v) dst.push_back(e.get<int>());
            else
                dst.push_back(v.get<int>());
        };
        if (j.contains("N"))
            read_list(j.at("N"), Ns);
        else
            for (const auto& [n, m] : p.cells) Ns.push_back(n);
        if (j.contains("M"))
            read_list(j.at("M"), Ms);
        else
            for (const auto& [n, m] : p.cells) Ms.push_back(m);
        if (Ns.empty() || Ms.empty())
            throw std::invalid_argument("config: N and M must be given");
        if (Ns.size() > 1 && Ms.size() > 1 && Ns.size() != Ms.size())
            throw std::invalid_argument("config: N and M lists must zip or one must be scalar");
        p.cells.clear();
        if (Ns.size() == Ms.size() && Ns.size() > 1) {
            for (std::size_t i = 0; i < Ns.size(); ++i) p.cells.emplace_back(Ns[i], Ms[i]);
        } else {
            for (int n : Ns)
                for (int m : Ms) p.cells.emplace_back(n, m);
        }
    }

    if (j.contains("epsilon")) {
        const auto& e = j.at("epsilon");
        if (e.is_string()) {
            if (e.get<std::string>() != "n-linked")
                throw std::invalid_argument("config: epsilon must be a number or \"n-linked\"");
            p.eps.n_linked = true;
            detail::maybe(j, "epsilon_factor", p.eps.factor);
        } else {
            p.eps.n_linked = false;
            p.eps.value = e.get<double>();
        }
    } else if (j.contains("epsilon_factor")) {
        p.eps.n_linked = true;
        p.eps.factor = j.at("epsilon_factor").get<double>();
    }

    if (j.contains("fp")) {
        const json& f = j.at("fp");
        detail::reject_unknown(f, {"P", "n_u", "dt_pde", "u_max", "moment_records"}, "'fp'");
        detail::maybe(f, "P", p.fp.P);
        detail::maybe(f, "n_u", p.fp.n_u);
        detail::maybe(f, "dt_pde", p.fp.dt_pde);
        detail::maybe(f, "u_max", p.fp.u_max);
        detail::maybe(f, "moment_records", p.fp.moment_records);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        detail::reject_unknown(m,
                               {"preset", "sigma", "tau", "tau_slope", "input_const",
                                "kernel_scale", "kernel_excite", "kernel_excite_width",
                                "kernel_inhibit", "kernel_inhibit_width", "rough_amplitude",
                                "rough_alpha", "rough_modes", "firing", "ou_target"},
                               "'model'");
        detail::maybe(m, "preset", p.model.preset);
        detail::maybe(m, "sigma", p.model.sigma);
        detail::maybe(m, "tau", p.model.tau);
        detail::maybe(m, "tau_slope", p.model.tau_slope);
        detail::maybe(m, "input_const", p.model.input_const);
        detail::maybe(m, "kernel_scale", p.model.kernel_scale);
        detail::maybe(m, "kernel_excite", p.model.kernel_excite);
        detail::maybe(m, "kernel_excite_width", p.model.kernel_excite_width);
        detail::maybe(m, "kernel_inhibit", p.model.kernel_inhibit);
        detail::maybe(m, "kernel_inhibit_width", p.model.kernel_inhibit_width);
        detail::maybe(m, "rough_amplitude", p.model.rough_input.amplitude);
        detail::maybe(m, "rough_alpha", p.model.rough_input.alpha);
        detail::maybe(m, "rough_modes", p.model.rough_input.modes);
        detail::maybe(m, "firing", p.model.firing);
        detail::maybe(m, "ou_target", p.model.ou_target);
    }

    // named validations with field context
    if (p.alpha <= 0.0 || p.alpha > 1.0)
        throw std::invalid_argument("config: alpha must lie in (0,1], got " +
                                    format_double(p.alpha));
    for (const auto& [N, M] : p.cells) {
        try {
            particles::grid_locations(N, p.d);
        } catch (const std::invalid_argument&) {
            throw std::invalid_argument("config: N must be a perfect d-th power (N=" +
                                        std::to_string(N) + ", d=" + std::to_string(p.d) + ")");
        }
        if (M < 1) throw std::invalid_argument("config: M must be positive");
    }
    p.validate();
    return p;
}

inline lab::ExperimentPlan load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config: parse error in '" + path + "': " + e.what());
    }
    return plan_from_json(j);
}

// ---------------------------------------------------------------------------
// results

struct FileEntry {
    std::string name;
    std::size_t bytes = 0;
    std::string fnv64;
};

class ResultWriter {
  public:
    explicit ResultWriter(std::string out_dir) : dir_(std::move(out_dir)) {
        std::filesystem::create_directories(dir_);
        started_ = now_iso();
    }

    void write_text(const std::string& name, const std::string& content) {
        const std::string path = dir_ + "/" + name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("write_results: cannot open '" + path + "'");
        out << content;
        out.close();
        inventory_.push_back({name, content.size(), hex64(fnv1a64(content))});
    }

    // manifest is written last; timestamps are the only nondeterministic bytes
    void finalize(const json& config_echo, std::uint64_t master_seed,
                  const json& tolerances = json::object()) {
        json manifest;
        manifest["config_hash"] = hex64(fnv1a64(config_echo.dump()));
        manifest["master_seed"] = master_seed;
        manifest["version"] = "0.1.0";
        manifest["started"] = started_;
        manifest["finished"] = now_iso();
        manifest["tolerances"] = tolerances;
        json files = json::array();
        for (const auto& f : inventory_)
            files.push_back({{"name", f.name}, {"bytes", f.bytes}, {"fnv64", f.fnv64}});
        manifest["files"] = files;
        const std::string path = dir_ + "/manifest.json";
        std::ofstream out(path, std::ios::binary);
        out << manifest.dump(2) << "\n";
    }

    const std::vector<FileEntry>& inventory() const { return inventory_; }

  private:
    static std::string now_iso() {
        const auto t = std::chrono::system_clock::now();
        const std::time_t tt = std::chrono::system_clock::to_time_t(t);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
        return buf;
    }
    std::string dir_;
    std::string started_;
    std::vector<FileEntry> inventory_;
};

inline std::string errors_csv(const lab::ConvergenceReport& r) {
    std::string out = "N,M,e,stderr,e_dt_half,dt_rel_change\n";
    for (const auto& p : r.points) {
        out += std::to_string(p.N) + "," + std::to_string(p.M) + "," + format_double(p.e) + "," +
               format_double(p.stderr_) + "," + format_double(p.e_dt_half) + "," +
               format_double(p.dt_rel_change) + "\n";
    }
    return out;
}

inline std::string wasserstein_csv(const lab::ConvergenceReport& r) {
    std::string out =
        "N,M,t,term_a,term_a_se,term_a_exact,term_a_spread,term_b,term_b_se,term_c,total,"
        "total_se,lp_d1,lp_d2,lp_d3,lp_total,triangle_gap\n";
    for (const auto& w : r.wrows) {
        out += std::to_string(w.N) + "," + std::to_string(w.M) + "," + format_double(w.t) + "," +
               format_double(w.term_a) + "," + format_double(w.term_a_se) + "," +
               format_double(w.term_a_exact) + "," + format_double(w.term_a_spread) + "," +
               format_double(w.term_b) + "," + format_double(w.term_b_se) + "," +
               format_double(w.term_c) + "," + format_double(w.total) + "," +
               format_double(w.total_se) + "," + format_double(w.lp_d1) + "," +
               format_double(w.lp_d2) + "," + format_double(w.lp_d3) + "," +
               format_double(w.lp_total) + "," + format_double(w.triangle_gap) + "\n";
    }
    return out;
}

inline std::string density_csv(const meanfield::DensityEvolution& f) {
    std::string out = "x_index,beta,u_center,mass,t\n";
    for (std::size_t rec = 0; rec < f.record_times.size(); ++rec)
        for (int p = 0; p < f.P(); ++p)
            for (int b = 0; b < f.B; ++b) {
                const double* m = f.node_masses(rec, p, b);
                for (int c = 0; c < f.ucells.n; ++c)
                    out += std::to_string(p) + "," + std::to_string(b) + "," +
                           format_double(f.ucells.center(c)) + "," + format_double(m[c]) + "," +
                           format_double(f.record_times[rec]) + "\n";
            }
    return out;
}

// parse a CSV cell table back into doubles (used by the round-trip checks)
inline std::vector<std::vector<double>> parse_csv(const std::string& text) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// plots

struct PlotSeries {
    std::vector<std::pair<double, double>> points;  // (scale, error), both positive
};

struct PlotStyle {
    std::string title = "convergence";
    bool draw_fit = false;
    double fit_slope = 0.0, fit_intercept = 0.0;  // in natural-log coordinates
    std::vector<double> guide_slopes;             // reference slopes, e.g. -0.5
};

// Log-log scatter with a fitted line and reference-slope guides, written as a
// deterministic static SVG. Scale metadata is embedded as a comment so tests
// can verify guide geometry from the emitted path data.
inline void render_plot(const PlotSeries& series, const PlotStyle& style,
                        const std::string& path) {
    if (series.points.empty()) throw std::invalid_argument("render_plot: empty series");
    for (const auto& [x, y] : series.points)
        if (!(x > 0.0) || !(y > 0.0))
            throw std::invalid_argument("render_plot: nonpositive value on a log axis");
    const double W = 640, H = 480, L = 70, R = 20, Tm = 30, Bm = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& [x, y] : series.points) {
        xmin = std::min(xmin, std::log10(x));
        xmax = std::max(xmax, std::log10(x));
        ymin = std::min(ymin, std::log10(y));
        ymax = std::max(ymax, std::log10(y));
    }
    if (xmax - xmin < 0.5) {
        xmin -= 0.25;
        xmax += 0.25;
    }
    if (ymax - ymin < 0.5) {
        ymin -= 0.25;
        ymax += 0.25;
    }
    const double padx = 0.08 * (xmax - xmin), pady = 0.08 * (ymax - ymin);
    xmin -= padx;
    xmax += padx;
    ymin -= pady;
    ymax += pady;
    const double sx = (W - L - R) / (xmax - xmin);
    const double sy = (H - Tm - Bm) / (ymax - ymin);
    auto px = [&](double lx) { return L + (lx - xmin) * sx; };
    auto py = [&](double ly) { return H - Bm - (ly - ymin) * sy; };
    char buf[256];
    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\">\n";
    std::snprintf(buf, sizeof(buf), "<!-- loglog sx=%.6f sy=%.6f xmin=%.6f ymin=%.6f -->\n", sx,
                  sy, xmin, ymin);
    svg += buf;
    svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.3f\" y=\"%.3f\" width=\"%.3f\" height=\"%.3f\" fill=\"none\" "
                  "stroke=\"black\"/>\n",
                  L, Tm, W - L - R, H - Tm - Bm);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.3f\" y=\"%.3f\" font-size=\"14\" text-anchor=\"middle\">%s"
                  "</text>\n",
                  W / 2, Tm - 10, style.title.c_str());
    svg += buf;
    // decade ticks
    for (int e = static_cast<int>(std::ceil(xmin)); e <= static_cast<int>(std::floor(xmax)); ++e) {
        std::snprintf(buf, sizeof(buf),
                      "<line x1=\"%.3f\" y1=\"%.3f\" x2=\"%.3f\" y2=\"%.3f\" stroke=\"#ccc\"/>\n",
                      px(e), Tm, px(e), H - Bm);
        svg += buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%.3f\" y=\"%.3f\" font-size=\"11\" text-anchor=\"middle\">1e%d"
                      "</text>\n",
                      px(e), H - Bm + 16, e);
        svg += buf;
    }
    for (int e = static_cast<int>(std::ceil(ymin)); e <= static_cast<int>(std::floor(ymax)); ++e) {
        std::snprintf(buf, sizeof(buf),
                      "<line x1=\"%.3f\" y1=\"%.3f\" x2=\"%.3f\" y2=\"%.3f\" stroke=\"#ccc\"/>\n",
                      L, py(e), W - R, py(e));
        svg += buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%.3f\" y=\"%.3f\" font-size=\"11\" text-anchor=\"end\">1e%d"
                      "</text>\n",
                      L - 4, py(e) + 4, e);
        svg += buf;
    }
    // guide slopes anchored at the first data point
    const double ax = std::log10(series.points.front().first);
    const double ay = std::log10(series.points.front().second);
    for (double g : style.guide_slopes) {
        const double x0 = xmin, x1 = xmax;
        const double y0 = ay + g * (x0 - ax), y1 = ay + g * (x1 - ax);
        std::snprintf(buf, sizeof(buf),
                      "<path class=\"guide\" data-slope=\"%.6f\" d=\"M %.3f %.3f L %.3f %.3f\" "
                      "stroke=\"#999\" stroke-dasharray=\"4 3\" fill=\"none\"/>\n",
                      g, px(x0), py(y0), px(x1), py(y1));
        svg += buf;
    }
    if (style.draw_fit) {
        // fit is in natural logs: log(e) = intercept + slope * log(s)
        const double lx0 = xmin, lx1 = xmax;
        auto fit_y = [&](double lx) {
            const double ln_s = lx * std::log(10.0);
            const double ln_e = style.fit_intercept + style.fit_slope * ln_s;
            return ln_e / std::log(10.0);
        };
        std::snprintf(buf, sizeof(buf),
                      "<path class=\"fit\" d=\"M %.3f %.3f L %.3f %.3f\" stroke=\"#c33\" "
                      "fill=\"none\"/>\n",
                      px(lx0), py(fit_y(lx0)), px(lx1), py(fit_y(lx1)));
        svg += buf;
    }
    for (const auto& [x, y] : series.points) {
        std::snprintf(buf, sizeof(buf),
                      "<circle class=\"pt\" cx=\"%.3f\" cy=\"%.3f\" r=\"4\" fill=\"#226\"/>\n",
                      px(std::log10(x)), py(std::log10(y)));
        svg += buf;
    }
    svg += "</svg>\n";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("render_plot: cannot open '" + path + "'");
    out << svg;
}

// ---------------------------------------------------------------------------
// one-call result persistence

inline std::vector<FileEntry> write_results(const lab::ConvergenceReport& report,
                                            const std::string& out_dir) {
    ResultWriter w(out_dir);
    w.write_text("errors.csv", errors_csv(report));
    if (!report.wrows.empty()) w.write_text("wasserstein.csv", wasserstein_csv(report));
    w.write_text("summary.json", lab::report_summary(report).dump(2) + "\n");
    w.write_text("rate_table.txt", lab::rate_table(report));
    if (!report.points.empty() && !report.slopes.empty()) {
        PlotSeries s;
        for (const auto& p : report.points)
            if (p.e > 0.0)
                s.points.emplace_back(
                    report.plan.slope_axis == "N" ? p.N : p.M, p.e);
        if (!s.points.empty()) {
            PlotStyle st;
            st.title = report.plan.name;
            const auto it = report.slopes.begin();
            st.draw_fit = true;
            st.fit_slope = it->second.slope;
            st.fit_intercept = it->second.intercept;
            st.guide_slopes = {-0.5, -report.plan.alpha / report.plan.d, -0.25};
            const std::string tmp = out_dir + "/rate.svg";
            render_plot(s, st, tmp);
            // fold the plot into the inventory
            std::ifstream in(tmp, std::ios::binary);
            std::stringstream ss;
            ss << in.rdbuf();
            w.write_text("rate.svg", ss.str());
        }
    }
    w.finalize(plan_to_json(report.plan), report.plan.master_seed);
    return w.inventory();
}

}  // namespace gridmf::io
