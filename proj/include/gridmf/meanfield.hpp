#pragma once

// The mean-field limit, two ways:
//  (1) a deterministic finite-volume solver for the nonlinear Fokker-Planck
//      system in marginal form (the concrete model's coupling uses only first
//      moments of the marginals, so the marginal system is closed), and
//  (2) McKean-Vlasov particles driven by the solved law, consuming increments
//      keyed identically to the paired particle system (Sznitman coupling).
//
// The u-fluxes use exponentially fitted (Scharfetter-Gummel) donor weights
// with explicit time stepping: conservative, positivity-preserving under the
// CFL guard, and exact for the discrete detailed balance, so stationary
// profiles are resolved to the cell-averaging error rather than first order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridmf/model.hpp"
#include "gridmf/noise.hpp"
#include "gridmf/particles.hpp"
#include "gridmf/rng.hpp"
#include "gridmf/sde.hpp"

namespace gridmf::meanfield {

using model::Vec;

struct UCells {
    double u_max = 3.0;
    int n = 400;
    double du() const { return u_max / n; }
    double center(int c) const { return (c + 0.5) * du(); }
    double edge(int e) const { return e * du(); }
};

// z / (e^z - 1); stable series near zero. The identity B(-z) = B(z) + z is
// used to keep the discrete detailed-balance ratio exactly e^z.
inline double bernoulli_ratio(double z) {
    if (std::abs(z) < 0.5) {
        const double z2 = z * z;
        const double z4 = z2 * z2;
        return 1.0 - 0.5 * z + z2 * (1.0 / 12.0) - z4 * (1.0 / 720.0) +
               z4 * z2 * (1.0 / 30240.0) - z4 * z4 * (1.0 / 1209600.0) +
               z4 * z4 * z2 * (1.0 / 47900160.0);
    }
    return z / std::expm1(z);
}

struct DensityEvolution {
    particles::SpatialGrid xgrid;  // P nodes
    UCells ucells;
    int B = 1;
    std::vector<double> record_times;                 // density snapshot times
    std::vector<std::vector<double>> densities;       // [rec][(p*B+b)*n_u + c] cell masses
    std::vector<double> moment_times;                 // dense moment/coupling records
    std::vector<std::vector<double>> moments;         // [mrec][p*B + b]
    std::vector<std::vector<double>> coupling;        // [mrec][p], kernel quadrature field
    double max_step_mass_drift = 0.0;
    double min_cell_mass = 0.0;
    double cfl_max = 0.0;

    int P() const { return xgrid.N; }
    const double* node_masses(std::size_t rec, int p, int b) const {
        return densities[rec].data() + (static_cast<std::size_t>(p) * B + b) * ucells.n;
    }
    std::size_t record_index(double t) const {
        for (std::size_t r = 0; r < record_times.size(); ++r)
            if (std::abs(record_times[r] - t) <= 1e-9) return r;
        throw std::invalid_argument("DensityEvolution: time " + std::to_string(t) +
                                    " is not a recorded time");
    }
    // d=1 only: cell masses linearly interpolated between the bracketing nodes
    std::vector<double> masses_at(std::size_t rec, double x, int b) const {
        if (xgrid.d != 1) throw std::invalid_argument("masses_at: d=1 only");
        const int P_ = P();
        const double pos = x * P_ - 0.5;
        int lo = static_cast<int>(std::floor(pos));
        double w = pos - lo;
        if (lo < 0) {
            lo = 0;
            w = 0.0;
        }
        if (lo >= P_ - 1) {
            lo = P_ - 2;
            w = 1.0;
        }
        std::vector<double> out(ucells.n);
        const double* a = node_masses(rec, lo, b);
        const double* c = node_masses(rec, lo + 1, b);
        for (int i = 0; i < ucells.n; ++i) out[i] = (1.0 - w) * a[i] + w * c[i];
        return out;
    }
    double second_moment(std::size_t rec) const {
        double s = 0.0;
        for (int p = 0; p < P(); ++p)
            for (int b = 0; b < B; ++b) {
                const double* m = node_masses(rec, p, b);
                for (int c = 0; c < ucells.n; ++c) s += m[c] * ucells.center(c) * ucells.center(c);
            }
        return s / P();
    }
};

// Moment field at a recorded time: per node and orientation, sum of
// cell-center times cell mass.
inline std::vector<double> moment_field(const DensityEvolution& f, double t) {
    for (std::size_t r = 0; r < f.moment_times.size(); ++r)
        if (std::abs(f.moment_times[r] - t) <= 1e-9) return f.moments[r];
    throw std::invalid_argument("moment_field: time " + std::to_string(t) + " is not recorded");
}

// Stationary law of du = (-u+c)/tau dt + (sigma/tau) dW reflected at 0:
// the normalized restriction of exp(-(u-c)^2 tau / sigma^2) to u >= 0,
// integrated per cell (error function form).
inline std::vector<double> reflected_ou_stationary(double c, double sigma, double tau,
                                                   const UCells& cells) {
    if (sigma <= 0.0) throw std::invalid_argument("reflected_ou_stationary: sigma > 0 required");
    if (tau <= 0.0) throw std::invalid_argument("reflected_ou_stationary: tau > 0 required");
    const double s = sigma / std::sqrt(tau);  // exp(-((u-c)/s)^2)
    auto primitive = [&](double u) { return std::erf((u - c) / s); };
    const double total = primitive(1e6) - primitive(0.0);
    std::vector<double> masses(cells.n);
    for (int i = 0; i < cells.n; ++i)
        masses[i] = (primitive(cells.edge(i + 1)) - primitive(cells.edge(i))) / total;
    return masses;
}

// Monte Carlo estimate of the t=0 law of the spectral initial field at a
// fixed point (the one-point law is the same at every x: the mode phases are
// uniform). Used as Fokker-Planck initial data.
inline std::vector<double> initial_law_cells(double alpha, int n_modes, double amplitude,
                                             const UCells& cells, int samples,
                                             std::uint64_t master_seed) {
    std::vector<double> masses(cells.n, 0.0);
    rng::CounterStream st(master_seed, rng::Stream::init_law);
    const double du = cells.du();
    for (int s = 0; s < samples; ++s) {
        double z = 0.0;
        const std::uint64_t base = 2ull * static_cast<std::uint64_t>(n_modes) * s;
        for (int j = 0; j < n_modes; ++j) {
            const double aj = std::pow(static_cast<double>(j + 1), -(alpha + 0.5));
            const double xi = st.normal(base + 2 * j);
            const double th = 2.0 * std::numbers::pi * st.uniform(base + 2 * j + 1);
            z += xi * aj * std::cos(th);
        }
        const double u = model::softplus(amplitude * z);
        int c = static_cast<int>(u / du);
        if (c < 0) c = 0;
        if (c >= cells.n) c = cells.n - 1;
        masses[c] += 1.0;
    }
    for (double& m : masses) m /= samples;
    return masses;
}

struct FpOptions {
    std::vector<double> record_times;  // density snapshots; empty = {0, T}
    int moment_records = 257;          // dense moment/coupling snapshots incl. endpoints
    bool picard = false;               // iterate the per-step nonlinearity to a fixed point
    double picard_tol = 1e-10;
    int picard_max_iter = 64;
    double max_mass_drift = 1e-10;     // per-step guard
};

namespace detail {

struct NodeTables {
    Eigen::MatrixXd kernel_sum;        // [P x P]: (1/B) sum_gamma K^gamma(y_p - y_q)
    std::vector<double> tau;           // [p*B+b]
    std::vector<double> input;         // [p*B+b]
    std::function<double(double)> phi;
    double sigma = 0.0;
};

inline NodeTables build_tables(const model::ModelSpec& m, const particles::SpatialGrid& xgrid) {
    if (!m.is_concrete)
        throw std::invalid_argument("fokker-planck solver: concrete model required");
    const auto& p = m.concrete;
    const int P = xgrid.N;
    const int B = p.orientations;
    NodeTables t;
    t.phi = p.firing_rate;
    t.sigma = p.noise_amplitude;
    t.kernel_sum = Eigen::MatrixXd::Zero(P, P);
    // the concrete coupling is gamma-summed against the gamma moments; when the
    // kernels differ per gamma we keep them separate
    t.tau.resize(static_cast<std::size_t>(P) * B);
    t.input.resize(static_cast<std::size_t>(P) * B);
    for (int i = 0; i < P; ++i) {
        const Vec ti = p.tau(xgrid.points[i]);
        const Vec bi = p.external_input(xgrid.points[i], 0.0);
        for (int b = 0; b < B; ++b) {
            t.tau[static_cast<std::size_t>(i) * B + b] = ti[b];
            t.input[static_cast<std::size_t>(i) * B + b] = bi[b];
        }
    }
    return t;
}

struct SubstepStats {
    double mass_before = 0.0;
    double mass_after = 0.0;
    double min_after = 0.0;
    double first_moment_after = 0.0;
    double cfl_max = 0.0;
};

// Donor coefficients per edge e = 0..n for the exponentially fitted flux
// F_e = cl_e m_{e-1} - cr_e m_e; boundary edges carry zero flux.
inline void sg_edge_coeffs(int n, double du, double g, double tau, double sigma,
                           std::vector<double>& cl, std::vector<double>& cr) {
    const double D = sigma * sigma / (2.0 * tau * tau);
    cl.resize(n + 1);
    cr.resize(n + 1);
    cl[0] = cr[0] = cl[n] = cr[n] = 0.0;
    if (D > 0.0) {
        const double dcoef = D / (du * du);
        const double zstep = -du * du / (D * tau);
        double z = (g - du) / tau * du / D;  // z at edge 1
        for (int e = 1; e < n; ++e, z += zstep) {
            const double bz = bernoulli_ratio(z);
            cr[e] = dcoef * bz;
            cl[e] = dcoef * (bz + z);  // B(-z) = B(z) + z
        }
    } else {
        for (int e = 1; e < n; ++e) {
            const double a = (g - e * du) / tau;
            cl[e] = std::max(a, 0.0) / du;
            cr[e] = std::max(-a, 0.0) / du;
        }
    }
}

// One conservative positivity-safe substep of the 1-D drift-diffusion flux on
// a single (node, orientation) marginal. masses has n cells; g is the firing
// value, so the edge velocity is a(u) = (-u + g)/tau. Mass sums, the minimum
// cell value, and the first moment are accumulated in the same pass.
inline SubstepStats sg_substep(double* masses, double* scratch, int n, double du, double dt,
                               double g, double tau, double sigma, int node, int beta) {
    thread_local std::vector<double> cl, cr;
    sg_edge_coeffs(n, du, g, tau, sigma, cl, cr);
    SubstepStats st;
    for (int i = 0; i < n; ++i) {
        const double out_coef = dt * (cl[i + 1] + cr[i]);
        if (out_coef > 1.0)
            throw std::runtime_error("fokker-planck CFL violation at node " +
                                     std::to_string(node) + " beta " + std::to_string(beta) +
                                     " cell " + std::to_string(i) +
                                     " (coef=" + std::to_string(out_coef) + ")");
        if (out_coef > st.cfl_max) st.cfl_max = out_coef;
        st.mass_before += masses[i];
        double v = masses[i] * (1.0 - out_coef);
        if (i + 1 < n) v += dt * cr[i + 1] * masses[i + 1];
        if (i > 0) v += dt * cl[i] * masses[i - 1];
        scratch[i] = v;
    }
    st.min_after = scratch[0];
    for (int i = 0; i < n; ++i) {
        const double v = scratch[i];
        masses[i] = v;
        st.mass_after += v;
        st.first_moment_after += (i + 0.5) * v;
        if (v < st.min_after) st.min_after = v;
    }
    st.first_moment_after *= du;
    return st;
}

}  // namespace detail

// Spec's CFL-style bound for explicit stepping; the sharp positivity guard is
// enforced per step inside the solver.
inline double auto_dt_pde(const UCells& cells, double tau_min, double sigma, double v_bound,
                          double safety = 0.9) {
    const double du = cells.du();
    double bound = std::numeric_limits<double>::infinity();
    if (sigma > 0.0) bound = std::min(bound, 0.5 * du * du * tau_min * tau_min / (sigma * sigma));
    if (v_bound > 0.0) bound = std::min(bound, 0.5 * du / v_bound);
    if (!std::isfinite(bound)) bound = 0.5 * du;
    return safety * bound;
}

// Marginal nonlinear Fokker-Planck system for the concrete model. f0 supplies
// per (node, orientation) cell masses; the x-coupling uses midpoint quadrature
// over the node cells (weight 1/P each), lagged by one step (or iterated to a
// fixed point in picard mode).
inline DensityEvolution solve_marginal_fp(const model::ModelSpec& m,
                                          const particles::SpatialGrid& xgrid, const UCells& cells,
                                          const std::vector<double>& f0, double T, double dt_pde,
                                          const FpOptions& options = {}) {
    const detail::NodeTables tables = detail::build_tables(m, xgrid);
    const auto& params = m.concrete;
    const int P = xgrid.N;
    const int B = params.orientations;
    const int n = cells.n;
    if (static_cast<int>(f0.size()) != P * B * n)
        throw std::invalid_argument("solve_marginal_fp: f0 size mismatch");
    if (T <= 0.0) throw std::invalid_argument("solve_marginal_fp: T > 0 required");

    // per-gamma kernel matrices over the nodes
    std::vector<Eigen::MatrixXd> K(B, Eigen::MatrixXd(P, P));
    for (int g = 0; g < B; ++g)
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < P; ++j) {
                Vec diff(xgrid.d);
                for (int a = 0; a < xgrid.d; ++a) diff[a] = xgrid.points[i][a] - xgrid.points[j][a];
                K[g](i, j) = params.kernels[g](diff);
            }

    if (dt_pde <= 0.0) {
        // automatic step from the CFL bound; the coupling magnitude never
        // exceeds the mean kernel row sum times u_max, so the firing value
        // is bounded on the reachable set and the per-step guard stays quiet
        double q_bound = 0.0;
        for (int p = 0; p < P; ++p) {
            double row = 0.0;
            for (int g = 0; g < B; ++g)
                for (int pp = 0; pp < P; ++pp) row += std::abs(K[g](p, pp));
            q_bound = std::max(q_bound, row / (static_cast<double>(B) * P) * cells.u_max);
        }
        double g_bound = 0.0, tau_min = 1e300;
        for (int p = 0; p < P; ++p)
            for (int b = 0; b < B; ++b) {
                const double inp = tables.input[static_cast<std::size_t>(p) * B + b];
                g_bound = std::max({g_bound, std::abs(tables.phi(inp + q_bound)),
                                    std::abs(tables.phi(inp - q_bound))});
                tau_min = std::min(tau_min, tables.tau[static_cast<std::size_t>(p) * B + b]);
            }
        const double v_bound = (cells.u_max + g_bound) / tau_min;
        dt_pde = auto_dt_pde(cells, tau_min, tables.sigma, v_bound);
    }
    const std::size_t steps = static_cast<std::size_t>(std::ceil(T / dt_pde - 1e-12));
    const double dt = T / static_cast<double>(steps);

    DensityEvolution out;
    out.xgrid = xgrid;
    out.ucells = cells;
    out.B = B;
    out.record_times = options.record_times.empty() ? std::vector<double>{0.0, T}
                                                    : options.record_times;
    out.min_cell_mass = 0.0;

    std::vector<std::size_t> rec_steps;
    for (double t : out.record_times) {
        const double fn = t / dt;
        rec_steps.push_back(static_cast<std::size_t>(std::llround(fn)));
        if (std::abs(fn - std::llround(fn)) > 1e-6)
            throw std::invalid_argument("solve_marginal_fp: record time not on the step grid");
    }
    const int mrec = std::max(2, options.moment_records);
    std::vector<std::size_t> moment_steps(mrec);
    for (int r = 0; r < mrec; ++r)
        moment_steps[r] = static_cast<std::size_t>(
            std::llround(static_cast<double>(r) * steps / (mrec - 1)));

    std::vector<double> masses = f0;
    std::vector<double> scratch(n);
    Eigen::VectorXd mom(P * B);
    Eigen::VectorXd q(P);

    auto compute_moments = [&](const std::vector<double>& mm, Eigen::VectorXd& dst) {
        for (int p = 0; p < P; ++p)
            for (int b = 0; b < B; ++b) {
                const double* cellm = mm.data() + (static_cast<std::size_t>(p) * B + b) * n;
                double s = 0.0;
                for (int c = 0; c < n; ++c) s += cells.center(c) * cellm[c];
                dst[p * B + b] = s;
            }
    };
    auto compute_coupling = [&](const Eigen::VectorXd& mo, Eigen::VectorXd& dst) {
        dst.setZero();
        for (int g = 0; g < B; ++g) {
            Eigen::VectorXd mg(P);
            for (int p = 0; p < P; ++p) mg[p] = mo[p * B + g];
            dst.noalias() += K[g] * mg;
        }
        dst *= 1.0 / (static_cast<double>(B) * P);
    };

    auto snapshot = [&](std::size_t step) {
        for (std::size_t r = 0; r < rec_steps.size(); ++r)
            if (rec_steps[r] == step) out.densities[r] = masses;
        for (int r = 0; r < mrec; ++r)
            if (moment_steps[r] == step) {
                out.moment_times.push_back(step * dt);
                std::vector<double> mv(mom.data(), mom.data() + P * B);
                out.moments.push_back(std::move(mv));
                std::vector<double> qv(q.data(), q.data() + P);
                out.coupling.push_back(std::move(qv));
            }
    };

    compute_moments(masses, mom);
    compute_coupling(mom, q);
    out.densities.resize(out.record_times.size());
    snapshot(0);

    std::vector<double> trial;
    Eigen::VectorXd mom_trial(P * B), q_used(P);
    for (std::size_t step = 0; step < steps; ++step) {
        q_used = q;  // lagged nonlinearity
        const int iterations = options.picard ? options.picard_max_iter : 1;
        double prev_change = std::numeric_limits<double>::infinity();
        double step_drift = 0.0, step_min = 0.0, step_cfl = 0.0;
        for (int it = 0; it < iterations; ++it) {
            trial = masses;
            step_drift = 0.0;
            step_min = 0.0;
            step_cfl = 0.0;
            for (int p = 0; p < P; ++p) {
                for (int b = 0; b < B; ++b) {
                    const std::size_t off = (static_cast<std::size_t>(p) * B + b);
                    const double g = tables.phi(tables.input[off] + q_used[p]);
                    const detail::SubstepStats st =
                        detail::sg_substep(trial.data() + off * n, scratch.data(), n, cells.du(),
                                           dt, g, tables.tau[off], tables.sigma, p, b);
                    step_drift = std::max(step_drift, std::abs(st.mass_after - st.mass_before));
                    step_min = std::min(step_min, st.min_after);
                    step_cfl = std::max(step_cfl, st.cfl_max);
                    mom_trial[static_cast<Eigen::Index>(off)] = st.first_moment_after;
                }
            }
            if (!options.picard) break;
            Eigen::VectorXd q_next(P);
            compute_coupling(mom_trial, q_next);
            const double change = (q_next - q_used).cwiseAbs().maxCoeff();
            q_used = q_next;
            if (change < options.picard_tol) break;
            if (it + 1 == iterations && change > prev_change)
                throw std::runtime_error("solve_marginal_fp: picard iteration did not converge");
            prev_change = change;
        }
        if (step_drift > out.max_step_mass_drift) out.max_step_mass_drift = step_drift;
        if (step_min < out.min_cell_mass) out.min_cell_mass = step_min;
        if (step_cfl > out.cfl_max) out.cfl_max = step_cfl;
        if (step_drift > options.max_mass_drift)
            throw std::runtime_error("solve_marginal_fp: per-step mass drift " +
                                     std::to_string(step_drift));
        masses.swap(trial);
        mom = mom_trial;
        compute_coupling(mom, q);
        snapshot(step + 1);
    }
    return out;
}

struct JointDensity {
    particles::SpatialGrid xgrid;
    UCells ucells;
    std::vector<double> record_times;
    std::vector<std::vector<double>> densities;  // [rec][p*n*n + c1*n + c2]
    double max_step_mass_drift = 0.0;
    double min_cell_mass = 0.0;
};

// Joint two-orientation solver; exists to check that product-form initial
// data stays (numerically) product-form, mirroring the closure of the
// marginal system.
//
// Two stencils. The dimension-split form applies identical 1-D flux
// arithmetic per axis, so it preserves tensor products exactly (to round-off)
// -- the right tool for the decoupled identity check. The unsplit single-stage
// form carries the usual O(dt) product-breaking cross term, which vanishes
// under mesh refinement -- the right tool for the refinement study. Their
// marginals coincide with the 1-D solver either way.
enum class JointScheme { split, unsplit };

inline JointDensity solve_joint_fp_small(const model::ModelSpec& m,
                                         const particles::SpatialGrid& xgrid, const UCells& cells,
                                         const std::vector<double>& f0_marginal_1,
                                         const std::vector<double>& f0_marginal_2, double T,
                                         double dt_pde, const FpOptions& options = {},
                                         JointScheme scheme = JointScheme::split) {
    const detail::NodeTables tables = detail::build_tables(m, xgrid);
    const auto& params = m.concrete;
    if (params.orientations != 2)
        throw std::invalid_argument("solve_joint_fp_small: exactly two orientations required");
    const int P = xgrid.N;
    const int n = cells.n;
    if (static_cast<int>(f0_marginal_1.size()) != P * n ||
        static_cast<int>(f0_marginal_2.size()) != P * n)
        throw std::invalid_argument("solve_joint_fp_small: marginal size mismatch");
    const std::size_t steps = static_cast<std::size_t>(std::ceil(T / dt_pde - 1e-12));
    const double dt = T / static_cast<double>(steps);

    std::vector<Eigen::MatrixXd> K(2, Eigen::MatrixXd(P, P));
    for (int g = 0; g < 2; ++g)
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < P; ++j) {
                Vec diff(xgrid.d);
                for (int a = 0; a < xgrid.d; ++a) diff[a] = xgrid.points[i][a] - xgrid.points[j][a];
                K[g](i, j) = params.kernels[g](diff);
            }

    JointDensity out;
    out.xgrid = xgrid;
    out.ucells = cells;
    out.record_times = options.record_times.empty() ? std::vector<double>{0.0, T}
                                                    : options.record_times;
    out.densities.resize(out.record_times.size());
    std::vector<std::size_t> rec_steps;
    for (double t : out.record_times)
        rec_steps.push_back(static_cast<std::size_t>(std::llround(t / dt)));

    std::vector<double> masses(static_cast<std::size_t>(P) * n * n);
    for (int p = 0; p < P; ++p)
        for (int c1 = 0; c1 < n; ++c1)
            for (int c2 = 0; c2 < n; ++c2)
                masses[(static_cast<std::size_t>(p) * n + c1) * n + c2] =
                    f0_marginal_1[static_cast<std::size_t>(p) * n + c1] *
                    f0_marginal_2[static_cast<std::size_t>(p) * n + c2];

    auto snapshot = [&](std::size_t step) {
        for (std::size_t r = 0; r < rec_steps.size(); ++r)
            if (rec_steps[r] == step) out.densities[r] = masses;
    };
    snapshot(0);

    std::vector<double> line(n), scratch(n);
    Eigen::VectorXd mom(2 * P), q(P);
    for (std::size_t step = 0; step < steps; ++step) {
        // first moments of both orientations from the joint masses
        for (int p = 0; p < P; ++p) {
            double m1 = 0.0, m2 = 0.0;
            const double* base = masses.data() + static_cast<std::size_t>(p) * n * n;
            for (int c1 = 0; c1 < n; ++c1)
                for (int c2 = 0; c2 < n; ++c2) {
                    const double mass = base[static_cast<std::size_t>(c1) * n + c2];
                    m1 += cells.center(c1) * mass;
                    m2 += cells.center(c2) * mass;
                }
            mom[p * 2 + 0] = m1;
            mom[p * 2 + 1] = m2;
        }
        q.setZero();
        for (int g = 0; g < 2; ++g) {
            Eigen::VectorXd mg(P);
            for (int p = 0; p < P; ++p) mg[p] = mom[p * 2 + g];
            q.noalias() += K[g] * mg;
        }
        q *= 1.0 / (2.0 * P);

        for (int p = 0; p < P; ++p) {
            double* base = masses.data() + static_cast<std::size_t>(p) * n * n;
            const double g1 = tables.phi(tables.input[static_cast<std::size_t>(p) * 2 + 0] + q[p]);
            const double g2 = tables.phi(tables.input[static_cast<std::size_t>(p) * 2 + 1] + q[p]);
            const double tau1 = tables.tau[static_cast<std::size_t>(p) * 2 + 0];
            const double tau2 = tables.tau[static_cast<std::size_t>(p) * 2 + 1];
            if (scheme == JointScheme::split) {
                // axis 1: for each fixed c2, update the c1-line
                for (int c2 = 0; c2 < n; ++c2) {
                    for (int c1 = 0; c1 < n; ++c1)
                        line[c1] = base[static_cast<std::size_t>(c1) * n + c2];
                    detail::sg_substep(line.data(), scratch.data(), n, cells.du(), dt, g1, tau1,
                                       tables.sigma, p, 0);
                    for (int c1 = 0; c1 < n; ++c1)
                        base[static_cast<std::size_t>(c1) * n + c2] = line[c1];
                }
                // axis 2: rows are contiguous
                for (int c1 = 0; c1 < n; ++c1)
                    detail::sg_substep(base + static_cast<std::size_t>(c1) * n, scratch.data(), n,
                                       cells.du(), dt, g2, tau2, tables.sigma, p, 1);
            } else {
                // single-stage stencil: both axis fluxes applied to the same
                // pre-step masses; combined donor CFL guards positivity
                thread_local std::vector<double> clx, crx, cly, cry, next;
                detail::sg_edge_coeffs(n, cells.du(), g1, tau1, tables.sigma, clx, crx);
                detail::sg_edge_coeffs(n, cells.du(), g2, tau2, tables.sigma, cly, cry);
                next.resize(static_cast<std::size_t>(n) * n);
                for (int c1 = 0; c1 < n; ++c1) {
                    for (int c2 = 0; c2 < n; ++c2) {
                        const double out_coef =
                            dt * ((clx[c1 + 1] + crx[c1]) + (cly[c2 + 1] + cry[c2]));
                        if (out_coef > 1.0)
                            throw std::runtime_error(
                                "joint CFL violation at node " + std::to_string(p) + " cell (" +
                                std::to_string(c1) + "," + std::to_string(c2) + ")");
                        double v = base[static_cast<std::size_t>(c1) * n + c2] * (1.0 - out_coef);
                        if (c1 > 0)
                            v += dt * clx[c1] * base[static_cast<std::size_t>(c1 - 1) * n + c2];
                        if (c1 + 1 < n)
                            v += dt * crx[c1 + 1] *
                                 base[static_cast<std::size_t>(c1 + 1) * n + c2];
                        if (c2 > 0)
                            v += dt * cly[c2] * base[static_cast<std::size_t>(c1) * n + c2 - 1];
                        if (c2 + 1 < n)
                            v += dt * cry[c2 + 1] *
                                 base[static_cast<std::size_t>(c1) * n + c2 + 1];
                        next[static_cast<std::size_t>(c1) * n + c2] = v;
                    }
                }
                std::copy(next.begin(), next.end(), base);
            }
        }
        // guards
        double total = 0.0, mn = masses[0];
        for (int p = 0; p < P; ++p) {
            const double* base = masses.data() + static_cast<std::size_t>(p) * n * n;
            double s = 0.0;
            for (std::size_t c = 0; c < static_cast<std::size_t>(n) * n; ++c) {
                s += base[c];
                mn = std::min(mn, base[c]);
            }
            total += s;
            const double drift = std::abs(s - 1.0);
            if (drift > out.max_step_mass_drift) out.max_step_mass_drift = drift;
        }
        (void)total;
        out.min_cell_mass = std::min(out.min_cell_mass, mn);
        snapshot(step + 1);
    }
    return out;
}

struct CoupledOptions {
    std::vector<double> record_times;
    std::vector<int> column_stream_map;
    bool keep_snapshots = false;  // store u-arrays of both systems at record times
    bool mv_only = false;         // skip the interacting system entirely
};

struct CoupledResult {
    particles::SpatialGrid grid;
    int M = 0, B = 0;
    double dt = 0.0;
    std::vector<double> record_times;
    // particle system and MV sides; empty when not tracked
    std::vector<std::vector<double>> snapshots_u;     // interacting system
    std::vector<std::vector<double>> snapshots_mv;    // MV particles
    std::vector<double> final_u, final_mv;
    std::vector<double> sup_sq_diff;   // per particle: sup_t |u - u_mv|^2
    std::vector<double> sup_norm2_u;   // per particle: sup_t |u|^2 (interacting)
    double min_u_seen = 0.0;
    long long complementarity_violations = 0;

    std::size_t index(int i, int k, int b) const {
        return (static_cast<std::size_t>(k) * grid.N + i) * B + b;
    }
};

// Lockstep Sznitman coupling: both systems consume the identical increment
// stream; with the kernels identically zero the two updates are the same
// arithmetic expression, so the coupled error is exactly zero.
inline CoupledResult run_coupled_pair(const model::ModelSpec& m, const particles::SpatialGrid& grid,
                                      int M, const noise::CorrelatedNoiseField& field,
                                      const std::vector<particles::HolderField>& init,
                                      const DensityEvolution& reference, double T, double dt,
                                      std::uint64_t master_seed,
                                      const CoupledOptions& options = {}) {
    if (!m.is_concrete)
        throw std::invalid_argument("run_coupled_pair: concrete model required");
    const int N = grid.N;
    const int B = m.orientations;
    const std::size_t steps = static_cast<std::size_t>(std::round(T / dt));
    if (std::abs(steps * dt - T) > 1e-9 * std::max(1.0, T))
        throw std::invalid_argument("run_coupled_pair: dt must divide T");
    if (field.size() != N) throw std::invalid_argument("run_coupled_pair: field/grid mismatch");
    if (static_cast<int>(init.size()) != M)
        throw std::invalid_argument("run_coupled_pair: one initial field per column required");

    std::vector<double> record_times = options.record_times;
    if (record_times.empty()) record_times = {T};
    const std::vector<std::size_t> rec_steps = particles::detail::record_steps(record_times, dt, T);
    std::vector<int> column_map = options.column_stream_map;
    if (column_map.empty()) {
        column_map.resize(M);
        for (int k = 0; k < M; ++k) column_map[k] = k;
    }

    particles::ConcreteEvaluator eval(m.concrete, grid.points);

    // interpolation tables: the reference coupling field q lives on the FP
    // grid; the kernel quadrature is smooth in x, so linear interpolation in x
    // (and in t between records) is second order. External input and tau are
    // evaluated exactly at the particle nodes.
    const int P = reference.P();
    std::vector<int> x_lo(N);
    std::vector<double> x_w(N);
    for (int i = 0; i < N; ++i) {
        const double pos = grid.points[i][0] * P - 0.5;  // d=1 reference grids
        int lo = static_cast<int>(std::floor(pos));
        double w = pos - lo;
        if (lo < 0) {
            lo = 0;
            w = 0.0;
        }
        if (lo >= P - 1) {
            lo = P - 2;
            w = 1.0;
        }
        x_lo[i] = lo;
        x_w[i] = w;
    }
    if (grid.d != 1 && !reference.coupling.empty())
        throw std::invalid_argument("run_coupled_pair: reference coupling requires d=1");
    const auto& mtimes = reference.moment_times;
    if (mtimes.size() < 2 || mtimes.front() > 1e-12 || mtimes.back() < T - 1e-9)
        throw std::invalid_argument("run_coupled_pair: reference records must span [0,T]");

    auto q_at = [&](double t, int i) {
        // locate the bracketing moment records (uniform spacing)
        const double span = mtimes.back() - mtimes.front();
        double pos = (t - mtimes.front()) / span * (mtimes.size() - 1);
        int lo = static_cast<int>(std::floor(pos));
        if (lo < 0) lo = 0;
        if (lo >= static_cast<int>(mtimes.size()) - 1) lo = static_cast<int>(mtimes.size()) - 2;
        const double tw = std::min(1.0, std::max(0.0, (t - mtimes[lo]) /
                                                          (mtimes[lo + 1] - mtimes[lo])));
        const auto& qa = reference.coupling[lo];
        const auto& qb = reference.coupling[lo + 1];
        const double qlo = (1.0 - x_w[i]) * qa[x_lo[i]] + x_w[i] * qa[x_lo[i] + 1];
        const double qhi = (1.0 - x_w[i]) * qb[x_lo[i]] + x_w[i] * qb[x_lo[i] + 1];
        return (1.0 - tw) * qlo + tw * qhi;
    };

    CoupledResult out;
    out.grid = grid;
    out.M = M;
    out.B = B;
    out.dt = dt;
    out.record_times = record_times;
    if (options.keep_snapshots) {
        out.snapshots_u.resize(record_times.size());
        out.snapshots_mv.resize(record_times.size());
    }

    const std::size_t total = static_cast<std::size_t>(N) * M * B;
    std::vector<double> u(total), umv(total), tv(total, 0.0), tvmv(total, 0.0);
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < N; ++i) {
            const Vec u0 = init[k].eval(grid.points[i]);
            for (int b = 0; b < B; ++b) {
                u[(static_cast<std::size_t>(k) * N + i) * B + b] = u0[b];
                umv[(static_cast<std::size_t>(k) * N + i) * B + b] = u0[b];
            }
        }
    out.sup_sq_diff.assign(static_cast<std::size_t>(N) * M, 0.0);
    out.sup_norm2_u.assign(static_cast<std::size_t>(N) * M, 0.0);

    const bool with_particles_track = !options.mv_only;
    auto track = [&](int i, int k) {
        double d2 = 0.0, n2 = 0.0;
        for (int b = 0; b < B; ++b) {
            const std::size_t idx = (static_cast<std::size_t>(k) * N + i) * B + b;
            const double dd = u[idx] - umv[idx];
            d2 += dd * dd;
            const double nv = with_particles_track ? u[idx] : umv[idx];
            n2 += nv * nv;
        }
        auto& rd = out.sup_sq_diff[static_cast<std::size_t>(k) * N + i];
        if (d2 > rd) rd = d2;
        auto& rn = out.sup_norm2_u[static_cast<std::size_t>(k) * N + i];
        if (n2 > rn) rn = n2;
    };
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < N; ++i) track(i, k);

    auto snapshot_if_due = [&](std::size_t step) {
        if (!options.keep_snapshots) return;
        for (std::size_t r = 0; r < rec_steps.size(); ++r)
            if (rec_steps[r] == step) {
                out.snapshots_u[r] = u;
                out.snapshots_mv[r] = umv;
            }
    };
    snapshot_if_due(0);

    std::vector<double> col_mean(static_cast<std::size_t>(N) * B);
    std::vector<double> s_node(N), q_node(N);
    std::vector<double> dw(static_cast<std::size_t>(N) * B);

    const bool with_particles = !options.mv_only;
    for (std::size_t n = 0; n < steps; ++n) {
        const double t = n * dt;
        if (with_particles) {
            std::fill(col_mean.begin(), col_mean.end(), 0.0);
            for (int k = 0; k < M; ++k) {
                const double* base = u.data() + static_cast<std::size_t>(k) * N * B;
                for (std::size_t idx = 0; idx < static_cast<std::size_t>(N) * B; ++idx)
                    col_mean[idx] += base[idx];
            }
            const double inv_m = 1.0 / M;
            for (auto& v : col_mean) v *= inv_m;
            eval.interaction(col_mean, s_node);
        }
        for (int i = 0; i < N; ++i) q_node[i] = q_at(t, i);

        for (int k = 0; k < M; ++k) {
            field.sample_increments_into(dt, column_map[k], static_cast<std::uint32_t>(n),
                                         master_seed, dw.data());
            for (int i = 0; i < N; ++i) {
                const std::size_t base = (static_cast<std::size_t>(k) * N + i) * B;
                for (int b = 0; b < B; ++b) {
                    const double diff = eval.diffusion(i, b);
                    if (with_particles) {
                        const double drift = eval.drift(i, b, u[base + b], s_node[i]);
                        const double p = u[base + b] + drift * dt + diff * dw[i * B + b];
                        if (!std::isfinite(p))
                            throw std::runtime_error("run_coupled_pair: non-finite state (i=" +
                                                     std::to_string(i) + ",k=" + std::to_string(k) +
                                                     ",n=" + std::to_string(n) + ")");
                        const double inc = sde::step_component(u[base + b], tv[base + b], drift,
                                                               diff, dw[i * B + b], dt);
                        if (inc > 0.0 && u[base + b] != 0.0) ++out.complementarity_violations;
                    }
                    const double drift_mv = eval.drift(i, b, umv[base + b], q_node[i]);
                    const double pmv = umv[base + b] + drift_mv * dt + diff * dw[i * B + b];
                    if (!std::isfinite(pmv))
                        throw std::runtime_error("run_coupled_pair: non-finite MV state (i=" +
                                                 std::to_string(i) + ",k=" + std::to_string(k) +
                                                 ",n=" + std::to_string(n) + ")");
                    const double incmv = sde::step_component(umv[base + b], tvmv[base + b],
                                                             drift_mv, diff, dw[i * B + b], dt);
                    if (incmv > 0.0 && umv[base + b] != 0.0) ++out.complementarity_violations;
                }
                track(i, k);
            }
        }
        snapshot_if_due(n + 1);
    }
    out.min_u_seen = std::min(*std::min_element(u.begin(), u.end()),
                              *std::min_element(umv.begin(), umv.end()));
    out.final_u = std::move(u);
    out.final_mv = std::move(umv);
    return out;
}

// McKean-Vlasov particles at the grid nodes, driven by the reference law's
// coupling field (no interaction between particles). Increments are keyed
// exactly as in the paired particle-system run.
inline particles::SimResult simulate_coupled_mv(const model::ModelSpec& m,
                                                const particles::SpatialGrid& grid, int M,
                                                const noise::CorrelatedNoiseField& field,
                                                const std::vector<particles::HolderField>& init,
                                                const DensityEvolution& reference, double T,
                                                double dt, std::uint64_t master_seed,
                                                const CoupledOptions& options = {}) {
    CoupledOptions opts = options;
    opts.mv_only = true;
    opts.keep_snapshots = true;
    const CoupledResult r =
        run_coupled_pair(m, grid, M, field, init, reference, T, dt, master_seed, opts);
    particles::SimResult out;
    out.grid = r.grid;
    out.M = r.M;
    out.B = r.B;
    out.dt = r.dt;
    out.record_times = r.record_times;
    out.snapshots_u = r.snapshots_mv;
    out.snapshots_ell_tv.resize(r.record_times.size());
    out.final_u = r.final_mv;
    out.min_u_seen = r.min_u_seen;
    out.complementarity_violations = r.complementarity_violations;
    out.sup_norm2 = r.sup_norm2_u;
    return out;
}

}  // namespace gridmf::meanfield
