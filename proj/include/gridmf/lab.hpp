#pragma once

// Convergence experiments at desk scale: the coupled particle-vs-MV error
// e(N,M), the three-term Wasserstein splitting of the empirical-measure
// distance, log-log rate fits, and report assembly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gridmf/meanfield.hpp"
#include "gridmf/model.hpp"
#include "gridmf/noise.hpp"
#include "gridmf/parallel.hpp"
#include "gridmf/particles.hpp"
#include "gridmf/rng.hpp"
#include "gridmf/transport.hpp"

namespace gridmf::lab {

using model::Vec;

// ---------------------------------------------------------------------------
// model presets

struct RoughInput {
    double amplitude = 0.0;  // 0 disables the rough part
    double alpha = 0.5;      // Hoelder exponent of the profile
    int modes = 0;
};

struct ModelParams {
    std::string preset = "gridcell-concrete";  // | "ou-test" | "custom-linear-test"
    double sigma = 0.5;
    double tau = 1.0;
    double tau_slope = 0.0;  // tau(x) = tau + tau_slope * (x_1 - 1/2)
    double input_const = 0.4;
    RoughInput rough_input;
    double kernel_excite = 1.2, kernel_excite_width = 0.15;
    double kernel_inhibit = 1.0, kernel_inhibit_width = 0.3;
    double kernel_scale = 1.0;  // 0 switches the interaction off entirely
    double ou_target = 0.3;     // phi == const for the ou-test preset
    std::string firing = "softplus";  // | "relu" | "linear"
};

// Deterministic phases for the rough external-input profile; part of the
// model definition, independent of the run seed.
inline double rough_profile(double x1, double alpha, int modes) {
    double acc = 0.0;
    std::uint64_t state = 0x243f6a8885a308d3ull;
    for (int j = 1; j <= modes; ++j) {
        state = rng::mix64(state + j);
        const double phase =
            2.0 * std::numbers::pi * (static_cast<double>(state >> 11) * 0x1.0p-53);
        acc += std::pow(static_cast<double>(j), -(alpha + 0.5)) *
               std::cos(2.0 * std::numbers::pi * j * x1 + phase);
    }
    return acc;
}

inline model::ModelSpec make_model(int d, int B, const ModelParams& mp) {
    model::GridCellParams p;
    p.orientations = B;
    p.space_dim = d;
    p.noise_amplitude = mp.sigma;
    p.tau = [tau = mp.tau, slope = mp.tau_slope, B](const Vec& x) {
        return Vec(B, std::max(0.05, tau + slope * (x[0] - 0.5)));
    };
    if (mp.preset == "ou-test") {
        p.firing_rate = [c = mp.ou_target](double) { return c; };
    } else if (mp.firing == "relu") {
        p.firing_rate = [](double z) { return std::max(z, 0.0); };
    } else if (mp.firing == "linear") {
        p.firing_rate = [](double z) { return z; };
    } else {
        p.firing_rate = [](double z) { return model::softplus(z); };
    }
    const double ks = (mp.preset == "ou-test") ? 0.0 : mp.kernel_scale;
    for (int g = 0; g < B; ++g) {
        p.kernels.push_back([ks, ae = mp.kernel_excite, se = mp.kernel_excite_width,
                             ai = mp.kernel_inhibit, si = mp.kernel_inhibit_width](const Vec& z) {
            if (ks == 0.0) return 0.0;
            return ks * model::mexican_hat(z, ae, se, ai, si);
        });
    }
    p.external_input = [c = mp.input_const, rough = mp.rough_input, B](const Vec& x, double) {
        double v = c;
        if (rough.amplitude != 0.0 && rough.modes > 0)
            v += rough.amplitude * rough_profile(x[0], rough.alpha, rough.modes);
        return Vec(B, v);
    };
    model::ModelSpec m = build_concrete_model(p);
    m.lipschitz_L = std::max(1.0, 1.0 / std::max(0.05, mp.tau - std::abs(mp.tau_slope)));
    m.growth_C = 4.0;
    m.alpha = (mp.rough_input.amplitude != 0.0) ? mp.rough_input.alpha : 1.0;
    return m;
}

// ---------------------------------------------------------------------------
// experiment plans

struct EpsPolicy {
    bool n_linked = true;   // eps = factor * N^(-1/d); otherwise the fixed value
    double factor = 1.0 / 3.0;
    double value = 0.05;
    double eps_for(int N, int d) const {
        return n_linked ? factor * std::pow(static_cast<double>(N), -1.0 / d) : value;
    }
};

struct FpResolution {
    int P = 0;           // FP nodes; 0 = 5 * max(N)
    int n_u = 400;
    double dt_pde = 0.0;  // 0 = automatic from the CFL bound
    double u_max = 4.0;
    int moment_records = 257;
};

struct ExperimentPlan {
    std::string name = "custom";
    ModelParams model;
    int d = 1;
    int B = 1;
    double alpha = 1.0;      // initial-field Hoelder exponent
    int init_modes = 24;
    double init_amplitude = 1.0;
    std::vector<std::pair<int, int>> cells;  // (N, M)
    double T = 1.0;
    double dt = 0.0;  // 0 = T/4096
    EpsPolicy eps;
    int replicas = 64;
    std::uint64_t master_seed = 20240601;
    FpResolution fp;
    int record_count = 32;
    bool dt_check = true;
    bool fp_refine_check = true;
    int workers = 1;
    int subsample_budget = 192;
    int law_samples = 200000;
    std::string slope_axis = "M";  // | "N"

    double step() const { return dt > 0.0 ? dt : T / 4096.0; }
    int max_N() const {
        int m = 1;
        for (const auto& [n, _] : cells) m = std::max(m, n);
        return m;
    }
    std::vector<double> record_times() const {
        std::vector<double> t;
        for (int j = 0; j <= record_count; ++j)
            t.push_back(T * static_cast<double>(j) / record_count);
        return t;
    }

    void validate() const {
        if (d < 1 || B < 1) throw std::invalid_argument("plan: d and B must be positive");
        if (alpha <= 0.0 || alpha > 1.0)
            throw std::invalid_argument("plan: alpha must lie in (0,1]");
        if (cells.empty()) throw std::invalid_argument("plan: no (N,M) cells");
        for (const auto& [N, M] : cells) {
            if (M < 1) throw std::invalid_argument("plan: M must be positive");
            // N must be a perfect d-th power
            particles::grid_locations(N, d);
        }
        if (T <= 0.0) throw std::invalid_argument("plan: T must be positive");
        if (replicas < 8) throw std::invalid_argument("plan: at least 8 replicas required");
        if (record_count < 1) throw std::invalid_argument("plan: record_count must be >= 1");
        if (fp.n_u < 8) throw std::invalid_argument("plan: n_u too small");
        if (fp.u_max <= 0.0) throw std::invalid_argument("plan: u_max must be positive");
        if (!eps.n_linked && eps.value <= 0.0)
            throw std::invalid_argument("plan: fixed epsilon must be positive");
        if (subsample_budget < 8 || subsample_budget > transport::kExactAtomBudget)
            throw std::invalid_argument("plan: subsample budget out of range");
    }
};

inline ExperimentPlan preset_plan(const std::string& name) {
    ExperimentPlan p;
    p.name = name;
    if (name == "rate-in-M" || name == "empirical-measure") {
        p.d = 1;
        p.B = 1;
        p.alpha = 1.0;
        p.init_modes = 24;
        p.init_amplitude = 1.0;
        p.cells = {{64, 8}, {64, 16}, {64, 32}, {64, 64}, {64, 128}};
        p.T = 1.0;
        p.replicas = 64;
        p.slope_axis = "M";
        p.model.sigma = 0.5;
        p.model.kernel_scale = 2.0;
        p.model.input_const = 0.4;
        p.dt_check = (name == "rate-in-M");
    } else if (name == "rate-in-N") {
        p.d = 1;
        p.B = 1;
        p.alpha = 0.5;
        p.init_modes = 256;
        p.init_amplitude = 0.8;
        p.cells = {{4, 256}, {16, 256}, {64, 256}, {256, 256}};
        p.T = 1.0;
        p.replicas = 16;
        p.slope_axis = "N";
        p.model.sigma = 0.3;
        p.model.kernel_scale = 0.8;
        p.model.input_const = 0.3;
        p.model.rough_input = {0.5, 0.5, 512};
        p.eps.n_linked = false;
        p.eps.value = 0.0015;
        p.dt_check = false;
    } else if (name == "ou-test") {
        p.d = 1;
        p.B = 1;
        p.alpha = 1.0;
        p.init_modes = 0;  // constant initial field softplus(0)
        p.cells = {{1, 10000}};
        p.T = 10.0;
        p.dt = 1e-3;
        p.replicas = 8;
        p.model.preset = "ou-test";
        p.model.sigma = 0.5;
        p.model.ou_target = 0.3;
        p.fp.u_max = 3.0;
        p.record_count = 10;
        p.dt_check = false;
        p.fp_refine_check = false;
    } else if (name == "coupling-null") {
        p.d = 1;
        p.B = 1;
        p.alpha = 1.0;
        p.init_modes = 8;
        p.cells = {{4, 8}, {4, 16}, {16, 8}, {16, 16}};
        p.T = 0.5;
        p.dt = 0.5 / 256.0;
        p.replicas = 8;
        p.model.kernel_scale = 0.0;
        p.record_count = 8;
        p.dt_check = false;
        p.fp_refine_check = false;
        p.slope_axis = "none";
    } else if (name == "gridcell-concrete") {
        p.d = 2;
        p.B = 4;
        p.alpha = 1.0;
        p.init_modes = 12;
        p.cells = {{16, 8}};
        p.T = 0.5;
        p.dt = 0.5 / 512.0;
        p.replicas = 8;
        p.record_count = 8;
        p.dt_check = false;
        p.fp_refine_check = false;
        p.slope_axis = "none";
    } else {
        throw std::invalid_argument("unknown preset '" + name + "'");
    }
    return p;
}

// ---------------------------------------------------------------------------
// slope fitting

struct SlopePoint {
    double scale = 0.0;
    double error = 0.0;
    double stderr_ = 0.0;
};

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
    int n_points = 0;
};

// Weighted least squares on (log scale, log error); weights propagate from
// the error bars, var(log e) = (stderr/e)^2. Zero error bars fall back to
// equal weights.
inline SlopeFit fit_loglog_slope(const std::vector<SlopePoint>& points) {
    if (points.size() < 4)
        throw std::invalid_argument("fit_loglog_slope: at least 4 points required");
    std::vector<double> x, y, w;
    bool all_zero_se = true;
    for (const auto& p : points) {
        if (!(p.error > 0.0) || !(p.scale > 0.0))
            throw std::invalid_argument("fit_loglog_slope: scales and errors must be positive");
        if (p.stderr_ > 0.0) all_zero_se = false;
    }
    for (const auto& p : points) {
        x.push_back(std::log(p.scale));
        y.push_back(std::log(p.error));
        if (all_zero_se)
            w.push_back(1.0);
        else {
            const double var = std::pow(std::max(p.stderr_, 1e-300) / p.error, 2.0);
            w.push_back(1.0 / var);
        }
    }
    double sw = 0.0, swx = 0.0, swy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        swx += w[i] * x[i];
        swy += w[i] * y[i];
    }
    const double xb = swx / sw, yb = swy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += w[i] * (x[i] - xb) * (x[i] - xb);
        sxy += w[i] * (x[i] - xb) * (y[i] - yb);
    }
    SlopeFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = yb - fit.slope * xb;
    fit.slope_stderr = all_zero_se ? 0.0 : std::sqrt(1.0 / sxx);
    fit.n_points = static_cast<int>(points.size());
    return fit;
}

// ---------------------------------------------------------------------------
// reports

struct RatePoint {
    int N = 0, M = 0;
    double e = 0.0;
    double stderr_ = 0.0;
    double e_dt_half = -1.0;      // -1 when the dt check was not run
    double dt_rel_change = -1.0;
};

struct WassersteinRow {
    int N = 0, M = 0;
    double t = 0.0;
    double term_a = 0.0;        // coupling bound for W1(f_MN, f_MN-bar)
    double term_a_se = 0.0;
    double term_a_exact = -1.0;  // subsampled exact W1, mean of repetitions
    double term_a_spread = -1.0;
    double term_b = 0.0;        // per-node 1-D aggregation for W1(f_MN-bar, f_N-bar)
    double term_b_se = 0.0;
    double term_c = 0.0;        // deterministic Riemann term for W1(f_N-bar, f)
    double total = 0.0;         // a + b + c
    double total_se = 0.0;
    double lp_d1 = -1.0, lp_d2 = -1.0, lp_d3 = -1.0, lp_total = -1.0;
    double triangle_gap = 0.0;  // lp_total - (lp_d1+lp_d2+lp_d3); <= 0 up to solver round-off
};

struct ConvergenceReport {
    ExperimentPlan plan;
    std::vector<RatePoint> points;
    std::vector<WassersteinRow> wrows;
    std::map<std::string, SlopeFit> slopes;
    bool dt_check_ok = true;
    bool dt_check_ran = false;
    bool fp_refine_ok = true;
    double fp_refine_change = -1.0;
    bool valid = true;  // false when the dt-sensitivity check failed
    double min_u_seen = 0.0;
    long long complementarity_violations = 0;
    bool monotone_in_M = true;  // empirical-measure runs: totals nonincreasing within 2 SE
};

// ---------------------------------------------------------------------------
// internals shared by the two experiment drivers

namespace detail {

struct ReplicaOutcome {
    double mean_sq = 0.0;            // mean over particles of sup_t |u - u_mv|^2
    double min_u = 0.0;
    long long comp_violations = 0;
    // empirical-measure terms per record time (empty unless requested)
    std::vector<double> term_a, term_b;
};

inline std::vector<particles::HolderField> replica_fields(const ExperimentPlan& plan, int M,
                                                          std::uint64_t replica_seed) {
    std::vector<particles::HolderField> init;
    init.reserve(M);
    for (int k = 0; k < M; ++k)
        init.push_back(particles::holder_initial_field(plan.alpha, plan.B, plan.init_modes,
                                                       plan.init_amplitude, replica_seed, k,
                                                       plan.d));
    return init;
}

inline meanfield::DensityEvolution zero_reference(double T) {
    meanfield::DensityEvolution ref;
    ref.xgrid = particles::grid_locations(4, 1);
    ref.ucells = {1.0, 8};
    ref.B = 1;
    ref.moment_times = {0.0, T};
    ref.moments = {std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
    ref.coupling = {std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
    return ref;
}

// quantile compression of a cell-mass vector into q atoms of equal weight
inline std::vector<double> quantile_atoms(const double* masses, const meanfield::UCells& cells,
                                          int q) {
    std::vector<double> atoms;
    atoms.reserve(q);
    double cum = 0.0;
    int c = 0;
    double total = 0.0;
    for (int i = 0; i < cells.n; ++i) total += masses[i];
    for (int l = 0; l < q; ++l) {
        const double level = total * (l + 0.5) / q;
        while (c < cells.n - 1 && cum + masses[c] < level) {
            cum += masses[c];
            ++c;
        }
        atoms.push_back(cells.center(c));
    }
    return atoms;
}

}  // namespace detail

// Builds (or skips) the Fokker-Planck reference law for a plan. Public so the
// CLI solve-fp entry point can reuse it.
struct ReferenceBundle {
    model::ModelSpec mdl;
    meanfield::DensityEvolution reference;
    bool has_fp = false;
    bool refine_ok = true;
    double refine_change = -1.0;
};

inline ReferenceBundle build_reference(const ExperimentPlan& plan, bool with_densities) {
    ReferenceBundle out;
    out.mdl = make_model(plan.d, plan.B, plan.model);
    const bool interacting = plan.model.kernel_scale != 0.0 && plan.model.preset != "ou-test";
    const bool need_fp = interacting || with_densities;
    if (!need_fp) {
        out.reference = detail::zero_reference(plan.T);
        return out;
    }
    if (plan.d != 1)
        throw std::invalid_argument("fokker-planck reference requires d = 1");
    const int P = plan.fp.P > 0 ? plan.fp.P : 5 * plan.max_N();
    const particles::SpatialGrid xgrid = particles::grid_locations(P, 1);
    const meanfield::UCells cells{plan.fp.u_max, plan.fp.n_u};
    std::vector<double> law =
        (plan.init_modes > 0)
            ? meanfield::initial_law_cells(plan.alpha, plan.init_modes, plan.init_amplitude,
                                           cells, plan.law_samples, plan.master_seed)
            : [&] {
                  // constant field softplus(0): a point mass in the owning cell
                  std::vector<double> m(cells.n, 0.0);
                  int c = static_cast<int>(model::softplus(0.0) / cells.du());
                  c = std::min(c, cells.n - 1);
                  m[c] = 1.0;
                  return m;
              }();
    std::vector<double> f0(static_cast<std::size_t>(P) * plan.B * cells.n);
    for (int p = 0; p < P; ++p)
        for (int b = 0; b < plan.B; ++b)
            std::copy(law.begin(), law.end(),
                      f0.begin() + (static_cast<std::size_t>(p) * plan.B + b) * cells.n);

    const double v_bound = (cells.u_max + 6.0) / std::max(0.05, plan.model.tau);
    const double dtp = plan.fp.dt_pde > 0.0
                           ? plan.fp.dt_pde
                           : meanfield::auto_dt_pde(cells, std::max(0.05, plan.model.tau),
                                                    plan.model.sigma, v_bound);
    meanfield::FpOptions fo;
    fo.moment_records = plan.fp.moment_records;
    fo.record_times = with_densities ? plan.record_times() : std::vector<double>{0.0, plan.T};
    // align record times with the step grid
    const std::size_t steps = static_cast<std::size_t>(std::ceil(plan.T / dtp - 1e-12));
    const double dt_eff = plan.T / static_cast<double>(steps);
    for (double& t : fo.record_times) {
        const double k = std::round(t / dt_eff);
        t = k * dt_eff;
    }
    out.reference = meanfield::solve_marginal_fp(out.mdl, xgrid, cells, f0, plan.T, dtp, fo);
    out.has_fp = true;

    if (plan.fp_refine_check) {
        meanfield::UCells fine{cells.u_max, 2 * cells.n};
        std::vector<double> law_f =
            (plan.init_modes > 0)
                ? meanfield::initial_law_cells(plan.alpha, plan.init_modes, plan.init_amplitude,
                                               fine, plan.law_samples, plan.master_seed)
                : [&] {
                      std::vector<double> m(fine.n, 0.0);
                      int c = static_cast<int>(model::softplus(0.0) / fine.du());
                      c = std::min(c, fine.n - 1);
                      m[c] = 1.0;
                      return m;
                  }();
        std::vector<double> f0f(static_cast<std::size_t>(P) * plan.B * fine.n);
        for (int p = 0; p < P; ++p)
            for (int b = 0; b < plan.B; ++b)
                std::copy(law_f.begin(), law_f.end(),
                          f0f.begin() + (static_cast<std::size_t>(p) * plan.B + b) * fine.n);
        meanfield::FpOptions fof;
        fof.moment_records = 2;
        fof.record_times = {0.0, plan.T};
        const double dtpf = dtp / 4.0;
        meanfield::DensityEvolution fine_run =
            meanfield::solve_marginal_fp(out.mdl, xgrid, fine, f0f, plan.T, dtpf, fof);
        const auto mc = moment_field(out.reference, plan.T);
        const auto mf = moment_field(fine_run, plan.T);
        double rel = 0.0;
        for (std::size_t i = 0; i < mc.size(); ++i)
            rel = std::max(rel, std::abs(mc[i] - mf[i]) / std::max(1e-12, std::abs(mf[i])));
        out.refine_change = rel;
        out.refine_ok = rel < 0.01;
    }
    return out;
}

// Monte Carlo estimate of e(N,M) = sqrt(mean over replicas and particles of
// sup_t |u - u_mv|^2), with its standard error propagated from the replica
// scatter.
inline ConvergenceReport run_coupled_error(const ExperimentPlan& plan) {
    plan.validate();
    ConvergenceReport report;
    report.plan = plan;
    const ReferenceBundle bundle = build_reference(plan, false);
    report.fp_refine_ok = bundle.refine_ok;
    report.fp_refine_change = bundle.refine_change;

    const double dt = plan.step();
    const std::vector<double> recs = plan.record_times();
    const noise::Mollifier moll = noise::Mollifier::bump(plan.d);

    for (const auto& [N, M] : plan.cells) {
        const particles::SpatialGrid grid = particles::grid_locations(N, plan.d);
        const noise::CorrelatedNoiseField field = noise::build_field(
            grid.points, plan.eps.eps_for(N, plan.d), moll, plan.B, M);

        auto run_at = [&](double step_dt, std::vector<double>& out_means) {
            out_means.assign(plan.replicas, 0.0);
            std::vector<double> mins(plan.replicas, 0.0);
            std::vector<long long> viols(plan.replicas, 0);
            par::parallel_for(plan.replicas, plan.workers, [&](std::size_t r) {
                const std::uint64_t rseed = rng::sub_seed(plan.master_seed, r);
                const auto init = detail::replica_fields(plan, M, rseed);
                meanfield::CoupledOptions co;
                co.record_times = recs;
                const meanfield::CoupledResult res = meanfield::run_coupled_pair(
                    bundle.mdl, grid, M, field, init, bundle.reference, plan.T, step_dt, rseed,
                    co);
                double acc = 0.0;
                for (double v : res.sup_sq_diff) acc += v;
                out_means[r] = acc / static_cast<double>(res.sup_sq_diff.size());
                mins[r] = res.min_u_seen;
                viols[r] = res.complementarity_violations;
            });
            for (int r = 0; r < plan.replicas; ++r) {
                report.min_u_seen = std::min(report.min_u_seen, mins[r]);
                report.complementarity_violations += viols[r];
            }
        };

        std::vector<double> means;
        run_at(dt, means);
        double mean = 0.0;
        for (double v : means) mean += v;
        mean /= plan.replicas;
        double var = 0.0;
        for (double v : means) var += (v - mean) * (v - mean);
        var /= std::max(1, plan.replicas - 1);
        const double e = std::sqrt(mean);
        const double se_mean = std::sqrt(var / plan.replicas);
        const double se_e = (e > 0.0) ? se_mean / (2.0 * e) : 0.0;

        RatePoint pt;
        pt.N = N;
        pt.M = M;
        pt.e = e;
        pt.stderr_ = se_e;

        if (plan.dt_check) {
            report.dt_check_ran = true;
            std::vector<double> means_half;
            run_at(dt / 2.0, means_half);
            double mh = 0.0;
            for (double v : means_half) mh += v;
            mh /= plan.replicas;
            pt.e_dt_half = std::sqrt(mh);
            pt.dt_rel_change = (e > 0.0) ? std::abs(pt.e_dt_half - e) / e : 0.0;
            if (e > 0.0 && pt.dt_rel_change > 0.10) {
                report.dt_check_ok = false;
                report.valid = false;
            }
        }
        report.points.push_back(pt);
    }

    // slope over the varying axis
    if (plan.slope_axis == "M" || plan.slope_axis == "N") {
        std::vector<SlopePoint> pts;
        for (const auto& p : report.points) {
            if (p.e <= 0.0) continue;
            pts.push_back({static_cast<double>(plan.slope_axis == "M" ? p.M : p.N), p.e,
                           p.stderr_});
        }
        if (pts.size() >= 4)
            report.slopes["e_vs_" + plan.slope_axis] = fit_loglog_slope(pts);
    }
    return report;
}

// Three-term Wasserstein splitting. Per record time and replica:
//   (a) the diagonal coupling bound on W1(f_MN, f_MN-bar),
//   (b) per-node 1-D distances between the MV column samples and the
//       reference marginal (an admissible x-preserving coupling),
//   (c) the deterministic Riemann term between the node measure and the law.
// The total estimate is a+b+c. On replica 0 the four distances are also
// computed exactly (network flow) on budget-compressed measures, giving the
// triangle-inequality check at every record time.
inline ConvergenceReport run_empirical_measure(const ExperimentPlan& plan) {
    plan.validate();
    if (plan.B != 1)
        throw std::invalid_argument("run_empirical_measure: B = 1 required for the 1-D "
                                    "aggregation terms");
    ConvergenceReport report;
    report.plan = plan;
    const ReferenceBundle bundle = build_reference(plan, true);
    report.fp_refine_ok = bundle.refine_ok;
    report.fp_refine_change = bundle.refine_change;
    const meanfield::DensityEvolution& ref = bundle.reference;
    const meanfield::UCells& cells = ref.ucells;
    const int P = ref.P();

    const double dt = plan.step();
    const std::vector<double> recs = plan.record_times();
    const noise::Mollifier moll = noise::Mollifier::bump(plan.d);

    for (const auto& [N, M] : plan.cells) {
        const particles::SpatialGrid grid = particles::grid_locations(N, plan.d);
        const noise::CorrelatedNoiseField field = noise::build_field(
            grid.points, plan.eps.eps_for(N, plan.d), moll, plan.B, M);

        // term (c): deterministic, one value per record time
        std::vector<double> term_c(recs.size(), 0.0);
        std::vector<std::vector<double>> node_masses(recs.size() * 0);
        for (std::size_t rt = 0; rt < recs.size(); ++rt) {
            const std::size_t rec = ref.record_index(recs[rt]);
            double acc = 0.0;
            for (int p = 0; p < P; ++p) {
                const double y = ref.xgrid.points[p][0];
                int j = static_cast<int>(y * N);
                if (j >= N) j = N - 1;
                const double xj = grid.points[j][0];
                const std::vector<double> fx = ref.masses_at(rec, xj, 0);
                const double* fy = ref.node_masses(rec, p, 0);
                std::vector<double> centers(cells.n);
                for (int c = 0; c < cells.n; ++c) centers[c] = cells.center(c);
                const double w1 = transport::w1d_weighted(
                    centers, fx, centers, std::vector<double>(fy, fy + cells.n), 1);
                acc += std::abs(xj - y) + w1;
            }
            term_c[rt] = acc / P;
        }

        // replica loop: terms (a) and (b) per record time
        std::vector<std::vector<double>> A(plan.replicas), Bv(plan.replicas);
        std::vector<double> mins(plan.replicas, 0.0);
        // replica 0 keeps snapshots for the exact checks
        std::vector<std::vector<double>> snap_u, snap_mv;
        par::parallel_for(plan.replicas, plan.workers, [&](std::size_t r) {
            const std::uint64_t rseed = rng::sub_seed(plan.master_seed, r);
            const auto init = detail::replica_fields(plan, M, rseed);
            meanfield::CoupledOptions co;
            co.record_times = recs;
            co.keep_snapshots = true;
            const meanfield::CoupledResult res = meanfield::run_coupled_pair(
                bundle.mdl, grid, M, field, init, bundle.reference, plan.T, dt, rseed, co);
            mins[r] = res.min_u_seen;
            A[r].resize(recs.size());
            Bv[r].resize(recs.size());
            for (std::size_t rt = 0; rt < recs.size(); ++rt) {
                const auto& su = res.snapshots_u[rt];
                const auto& sv = res.snapshots_mv[rt];
                double a = 0.0;
                for (std::size_t idx = 0; idx < su.size(); ++idx)
                    a += std::abs(su[idx] - sv[idx]);
                A[r][rt] = a / static_cast<double>(su.size());
                // per-node 1-D distances of MV samples vs the reference marginal
                const std::size_t rec = ref.record_index(recs[rt]);
                double b = 0.0;
                std::vector<double> samples(M);
                std::vector<double> centers(cells.n);
                for (int c = 0; c < cells.n; ++c) centers[c] = cells.center(c);
                for (int i = 0; i < N; ++i) {
                    for (int k = 0; k < M; ++k)
                        samples[k] = sv[(static_cast<std::size_t>(k) * N + i)];
                    const std::vector<double> fx =
                        ref.masses_at(rec, grid.points[i][0], 0);
                    b += transport::w1d_weighted(samples, std::vector<double>(M, 1.0), centers,
                                                 fx, 1);
                }
                Bv[r][rt] = b / N;
            }
            if (r == 0) {
                snap_u = res.snapshots_u;
                snap_mv = res.snapshots_mv;
            }
        });
        for (double v : mins) report.min_u_seen = std::min(report.min_u_seen, v);

        for (std::size_t rt = 0; rt < recs.size(); ++rt) {
            WassersteinRow row;
            row.N = N;
            row.M = M;
            row.t = recs[rt];
            double ma = 0.0, mb = 0.0;
            for (int r = 0; r < plan.replicas; ++r) {
                ma += A[r][rt];
                mb += Bv[r][rt];
            }
            ma /= plan.replicas;
            mb /= plan.replicas;
            double va = 0.0, vb = 0.0, vt = 0.0;
            for (int r = 0; r < plan.replicas; ++r) {
                va += (A[r][rt] - ma) * (A[r][rt] - ma);
                vb += (Bv[r][rt] - mb) * (Bv[r][rt] - mb);
                const double tot = A[r][rt] + Bv[r][rt];
                vt += (tot - (ma + mb)) * (tot - (ma + mb));
            }
            const int dn = std::max(1, plan.replicas - 1);
            row.term_a = ma;
            row.term_a_se = std::sqrt(va / dn / plan.replicas);
            row.term_b = mb;
            row.term_b_se = std::sqrt(vb / dn / plan.replicas);
            row.term_c = term_c[rt];
            row.total = ma + mb + term_c[rt];
            row.total_se = std::sqrt(vt / dn / plan.replicas);

            // exact distances on budget-compressed measures (replica 0)
            const std::size_t rec = ref.record_index(recs[rt]);
            const int S = std::min(N * M, plan.subsample_budget);
            const std::uint64_t rseed = rng::sub_seed(plan.master_seed, 0);
            rng::CounterStream sub(rseed, rng::Stream::subsample, static_cast<std::uint32_t>(rt));
            // partial Fisher-Yates over the NM particle indices
            std::vector<int> perm(static_cast<std::size_t>(N) * M);
            std::iota(perm.begin(), perm.end(), 0);
            for (int s = 0; s < S; ++s) {
                const int j = s + static_cast<int>(sub.uniform(s) * (perm.size() - s));
                std::swap(perm[s], perm[std::min<std::size_t>(j, perm.size() - 1)]);
            }
            auto atom = [&](const std::vector<double>& flat, int idx) {
                const int i = idx % N;
                transport::Point pt(plan.d + 1);
                for (int a = 0; a < plan.d; ++a) pt[a] = grid.points[i][a];
                pt[plan.d] = flat[idx];
                return pt;
            };
            transport::DiscreteMeasure mu1, mu2, mu3, mu4;
            for (int s = 0; s < S; ++s) {
                mu1.points.push_back(atom(snap_u[rt], perm[s]));
                mu2.points.push_back(atom(snap_mv[rt], perm[s]));
            }
            mu1.weights.assign(S, 1.0 / S);
            mu2.weights.assign(S, 1.0 / S);
            // mu3: quantile atoms of the reference marginal at the particle nodes
            const int q3 = std::max(1, plan.subsample_budget / N);
            for (int i = 0; i < N; ++i) {
                const std::vector<double> fx = ref.masses_at(rec, grid.points[i][0], 0);
                for (double uq : detail::quantile_atoms(fx.data(), cells, q3)) {
                    transport::Point pt(plan.d + 1);
                    for (int a = 0; a < plan.d; ++a) pt[a] = grid.points[i][a];
                    pt[plan.d] = uq;
                    mu3.points.push_back(pt);
                }
            }
            mu3.weights.assign(mu3.points.size(), 1.0 / mu3.points.size());
            // mu4: median atoms on a stride of the FP nodes
            const int stride = std::max(1, (P + plan.subsample_budget - 1) /
                                               plan.subsample_budget);
            for (int p = stride / 2; p < P; p += stride) {
                const double* fy = ref.node_masses(rec, p, 0);
                const double uq = detail::quantile_atoms(fy, cells, 1)[0];
                transport::Point pt(plan.d + 1);
                pt[0] = ref.xgrid.points[p][0];
                pt[plan.d] = uq;
                mu4.points.push_back(pt);
            }
            mu4.weights.assign(mu4.points.size(), 1.0 / mu4.points.size());

            row.lp_d1 = transport::w1_product_space(mu1, mu2, plan.d);
            row.lp_d2 = transport::w1_product_space(mu2, mu3, plan.d);
            row.lp_d3 = transport::w1_product_space(mu3, mu4, plan.d);
            row.lp_total = transport::w1_product_space(mu1, mu4, plan.d);
            row.triangle_gap = row.lp_total - (row.lp_d1 + row.lp_d2 + row.lp_d3);

            // subsampled exact estimate of term (a), three repetitions
            double amean = 0.0, amin = 1e300, amax = -1e300;
            for (int rep = 0; rep < 3; ++rep) {
                rng::CounterStream sub2(rseed, rng::Stream::subsample,
                                        static_cast<std::uint32_t>(rt), 1 + rep);
                std::vector<int> perm2(static_cast<std::size_t>(N) * M);
                std::iota(perm2.begin(), perm2.end(), 0);
                for (int s = 0; s < S; ++s) {
                    const int j = s + static_cast<int>(sub2.uniform(s) * (perm2.size() - s));
                    std::swap(perm2[s], perm2[std::min<std::size_t>(j, perm2.size() - 1)]);
                }
                transport::DiscreteMeasure a1, a2;
                for (int s = 0; s < S; ++s) {
                    a1.points.push_back(atom(snap_u[rt], perm2[s]));
                    a2.points.push_back(atom(snap_mv[rt], perm2[s]));
                }
                a1.weights.assign(S, 1.0 / S);
                a2.weights.assign(S, 1.0 / S);
                const double w = transport::w1_product_space(a1, a2, plan.d);
                amean += w;
                amin = std::min(amin, w);
                amax = std::max(amax, w);
            }
            row.term_a_exact = amean / 3.0;
            row.term_a_spread = amax - amin;

            report.wrows.push_back(row);
        }
    }

    // monotonicity in M within 2 SE at every record time, and slope at t = T
    std::map<double, std::vector<const WassersteinRow*>> by_time;
    for (const auto& row : report.wrows) by_time[row.t].push_back(&row);
    for (auto& [t, rows] : by_time) {
        std::sort(rows.begin(), rows.end(),
                  [](const WassersteinRow* a, const WassersteinRow* b) { return a->M < b->M; });
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double allowed = 2.0 * std::sqrt(rows[i]->total_se * rows[i]->total_se +
                                                   rows[i - 1]->total_se * rows[i - 1]->total_se);
            if (rows[i]->total > rows[i - 1]->total + allowed) report.monotone_in_M = false;
        }
    }
    std::vector<SlopePoint> pts;
    for (const auto& row : report.wrows)
        if (std::abs(row.t - plan.T) < 1e-12)
            pts.push_back({static_cast<double>(row.M), row.total, row.total_se});
    if (pts.size() >= 4) report.slopes["w1_vs_M"] = fit_loglog_slope(pts);
    return report;
}

// ---------------------------------------------------------------------------
// rendering

inline nlohmann::json slope_to_json(const SlopeFit& s) {
    return {{"slope", s.slope},
            {"intercept", s.intercept},
            {"slope_stderr", s.slope_stderr},
            {"n_points", s.n_points}};
}

inline nlohmann::json report_summary(const ConvergenceReport& r) {
    nlohmann::json j;
    j["plan"] = r.plan.name;
    j["seed"] = r.plan.master_seed;
    j["replicas"] = r.plan.replicas;
    j["valid"] = r.valid;
    j["dt_check_ran"] = r.dt_check_ran;
    j["dt_check_ok"] = r.dt_check_ok;
    j["fp_refine_ok"] = r.fp_refine_ok;
    if (r.fp_refine_change >= 0.0) j["fp_refine_change"] = r.fp_refine_change;
    j["min_u_seen"] = r.min_u_seen;
    j["complementarity_violations"] = r.complementarity_violations;
    j["monotone_in_M"] = r.monotone_in_M;
    nlohmann::json slopes = nlohmann::json::object();
    for (const auto& [name, fit] : r.slopes) slopes[name] = slope_to_json(fit);
    j["slopes"] = slopes;
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.points)
        pts.push_back({{"N", p.N},
                       {"M", p.M},
                       {"e", p.e},
                       {"stderr", p.stderr_},
                       {"e_dt_half", p.e_dt_half},
                       {"dt_rel_change", p.dt_rel_change}});
    j["points"] = pts;
    return j;
}

// Deterministic fixed-width text table plus the machine-readable summary.
inline std::string rate_table(const ConvergenceReport& r) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "%6s %6s %24s %24s %12s\n", "N", "M", "e", "stderr",
                  "dt_change");
    out += line;
    for (const auto& p : r.points) {
        std::snprintf(line, sizeof(line), "%6d %6d %24.17g %24.17g %12.5g\n", p.N, p.M, p.e,
                      p.stderr_, p.dt_rel_change);
        out += line;
    }
    for (const auto& [name, fit] : r.slopes) {
        std::snprintf(line, sizeof(line), "# slope %s = %.17g +- %.17g (%d points)\n",
                      name.c_str(), fit.slope, fit.slope_stderr, fit.n_points);
        out += line;
    }
    return out;
}

}  // namespace gridmf::lab
