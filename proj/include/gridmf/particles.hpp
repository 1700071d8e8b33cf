#pragma once

// The N x M interacting particle system: spatial grids, alpha-Hoelder random
// initial fields, the reflected Euler simulation loop, and empirical measures.
//
// For the concrete grid-cell model the interaction integrand is linear in v,
// so the empirical-measure integral collapses to a kernel average of per-column
// means: cost O(N^2 B + N M B) per step instead of O((NM)^2 B). The generic
// path (arbitrary b1/sigma1) evaluates the full double sum and is meant for
// small instances; equality of the two routes is asserted in the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridmf/model.hpp"
#include "gridmf/noise.hpp"
#include "gridmf/rng.hpp"
#include "gridmf/sde.hpp"

namespace gridmf::particles {

using model::Vec;

struct SpatialGrid {
    int N = 0;
    int d = 1;
    int per_axis = 0;  // N = per_axis^d
    std::vector<Vec> points;
    double cell_measure = 0.0;
    double cell_diameter = 0.0;
};

// Cell centers of the equispaced partition of [0,1]^d into N = m^d cells.
inline SpatialGrid grid_locations(int N, int d) {
    if (N < 1 || d < 1) throw std::invalid_argument("grid_locations: N and d must be positive");
    int m = static_cast<int>(std::round(std::pow(static_cast<double>(N), 1.0 / d)));
    // guard the rounding
    auto ipow = [](int base, int exp) {
        long long r = 1;
        for (int i = 0; i < exp; ++i) r *= base;
        return r;
    };
    if (ipow(m, d) != N && ipow(m + 1, d) == N) ++m;
    if (ipow(m, d) != N)
        throw std::invalid_argument("grid_locations: N=" + std::to_string(N) +
                                    " is not a perfect " + std::to_string(d) + "-th power");
    SpatialGrid g;
    g.N = N;
    g.d = d;
    g.per_axis = m;
    g.cell_measure = 1.0 / N;
    g.cell_diameter = std::sqrt(static_cast<double>(d)) / m;
    g.points.reserve(N);
    std::vector<int> idx(d, 0);
    for (int n = 0; n < N; ++n) {
        Vec x(d);
        int rem = n;
        for (int a = d - 1; a >= 0; --a) {
            x[a] = (rem % m + 0.5) / m;
            rem /= m;
        }
        g.points.push_back(std::move(x));
    }
    return g;
}

struct HolderField {
    double alpha = 1.0;
    int components = 1;  // B
    int n_modes = 0;
    double amplitude = 1.0;
    double declared_seminorm = 0.0;  // analytic bound on the alpha-Hoelder quotient
    // per component, per mode
    std::vector<std::vector<double>> xi;
    std::vector<std::vector<double>> theta;
    std::vector<std::vector<Vec>> w;  // unit directions

    Vec eval(const Vec& x) const {
        Vec out(components);
        for (int b = 0; b < components; ++b) {
            double z = 0.0;
            for (int j = 0; j < n_modes; ++j) {
                const double aj = std::pow(static_cast<double>(j + 1), -(alpha + 0.5));
                double dot = 0.0;
                for (std::size_t a = 0; a < x.size(); ++a) dot += w[b][j][a] * x[a];
                z += xi[b][j] * aj *
                     std::cos(2.0 * std::numbers::pi * (j + 1) * dot + theta[b][j]);
            }
            out[b] = model::softplus(amplitude * z);
        }
        return out;
    }
};

// Spectral synthesis of a nonnegative alpha-Hoelder random field:
//   u(x) = softplus( amplitude * sum_j xi_j j^-(alpha+1/2) cos(2 pi j <w_j,x> + theta_j) ),
// with (xi_j, theta_j, w_j) drawn from the stream (master_seed, init, k);
// i.i.d. across the column index k. The j^-(alpha+1/2) decay gives Hoelder
// regularity alpha; softplus keeps the data in the orthant.
inline HolderField holder_initial_field(double alpha, int B, int n_modes, double amplitude,
                                        std::uint64_t master_seed, int k, int space_dim = 1) {
    if (alpha <= 0.0 || alpha > 1.0)
        throw std::invalid_argument("holder_initial_field: alpha must lie in (0,1]");
    if (n_modes < 0) throw std::invalid_argument("holder_initial_field: n_modes must be >= 0");
    HolderField f;
    f.alpha = alpha;
    f.components = B;
    f.n_modes = n_modes;
    f.amplitude = amplitude;
    f.xi.assign(B, std::vector<double>(n_modes));
    f.theta.assign(B, std::vector<double>(n_modes));
    f.w.assign(B, std::vector<Vec>(n_modes, Vec(space_dim)));
    double seminorm = 0.0;
    for (int b = 0; b < B; ++b) {
        rng::CounterStream st(master_seed, rng::Stream::init_field, static_cast<std::uint32_t>(k),
                              static_cast<std::uint32_t>(b));
        for (int j = 0; j < n_modes; ++j) {
            const std::uint64_t base = 8ull * static_cast<std::uint64_t>(j);
            f.xi[b][j] = st.normal(base);
            f.theta[b][j] = 2.0 * std::numbers::pi * st.uniform(base + 1);
            double norm = 0.0;
            for (int a = 0; a < space_dim; ++a) {
                f.w[b][j][a] = st.normal(base + 2 + a);
                norm += f.w[b][j][a] * f.w[b][j][a];
            }
            norm = std::sqrt(norm);
            if (norm < 1e-14) {
                f.w[b][j].assign(space_dim, 0.0);
                f.w[b][j][0] = 1.0;
            } else {
                for (int a = 0; a < space_dim; ++a) f.w[b][j][a] /= norm;
            }
            // |cos A - cos B| <= 2^(1-alpha) |A - B|^alpha with |A-B| = 2 pi j |w.dx|
            const double aj = std::pow(static_cast<double>(j + 1), -(alpha + 0.5));
            seminorm += std::abs(f.xi[b][j]) * aj * std::pow(2.0, 1.0 - alpha) *
                        std::pow(2.0 * std::numbers::pi * (j + 1), alpha);
        }
    }
    f.declared_seminorm = std::abs(amplitude) * seminorm;  // softplus is 1-Lipschitz
    return f;
}

struct EmpiricalMeasure {
    std::vector<Vec> x;  // grid point per atom
    std::vector<Vec> u;  // value per atom
    double t = 0.0;

    std::size_t size() const { return x.size(); }
    model::MeasureView view() const {
        model::MeasureView f;
        const double w = 1.0 / static_cast<double>(x.size());
        f.atoms.reserve(x.size());
        for (std::size_t a = 0; a < x.size(); ++a) f.atoms.push_back({x[a], u[a], w});
        return f;
    }
    template <typename Fn>
    double integrate(Fn&& g) const {
        double s = 0.0;
        for (std::size_t a = 0; a < x.size(); ++a) s += g(x[a], u[a]);
        return s / static_cast<double>(x.size());
    }
};

// Flat ensemble state; layout u[(k*N + i)*B + b].
struct ParticleEnsemble {
    SpatialGrid grid;
    int M = 0;
    int B = 0;
    double t = 0.0;
    std::vector<double> u;
    std::vector<double> ell_tv;

    std::size_t index(int i, int k, int b) const {
        return (static_cast<std::size_t>(k) * grid.N + i) * B + b;
    }
};

inline EmpiricalMeasure empirical_measure(const ParticleEnsemble& e) {
    EmpiricalMeasure f;
    f.t = e.t;
    f.x.reserve(static_cast<std::size_t>(e.grid.N) * e.M);
    f.u.reserve(f.x.capacity());
    for (int k = 0; k < e.M; ++k)
        for (int i = 0; i < e.grid.N; ++i) {
            f.x.push_back(e.grid.points[i]);
            Vec v(e.B);
            for (int b = 0; b < e.B; ++b) v[b] = e.u[e.index(i, k, b)];
            f.u.push_back(std::move(v));
        }
    return f;
}

// Precomputed node tables for the concrete model: kernel matrix over grid
// nodes, external input and relaxation times at nodes.
struct ConcreteEvaluator {
    int N = 0, B = 0;
    std::vector<double> kernel;  // [gamma][i][j] = K^gamma(X_i - X_j)
    std::vector<double> tau;     // [i][b]
    std::vector<double> input;   // [i][b] at r = 0 (presets use time-invariant input)
    double sigma = 0.0;
    std::function<double(double)> phi;

    ConcreteEvaluator() = default;
    ConcreteEvaluator(const model::GridCellParams& p, const std::vector<Vec>& points) {
        N = static_cast<int>(points.size());
        B = p.orientations;
        sigma = p.noise_amplitude;
        phi = p.firing_rate;
        const int d = p.space_dim;
        kernel.resize(static_cast<std::size_t>(B) * N * N);
        for (int g = 0; g < B; ++g)
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < N; ++j) {
                    Vec diff(d);
                    for (int a = 0; a < d; ++a) diff[a] = points[i][a] - points[j][a];
                    kernel[(static_cast<std::size_t>(g) * N + i) * N + j] = p.kernels[g](diff);
                }
        tau.resize(static_cast<std::size_t>(N) * B);
        input.resize(static_cast<std::size_t>(N) * B);
        for (int i = 0; i < N; ++i) {
            const Vec ti = p.tau(points[i]);
            const Vec bi = p.external_input(points[i], 0.0);
            for (int b = 0; b < B; ++b) {
                tau[static_cast<std::size_t>(i) * B + b] = ti[b];
                input[static_cast<std::size_t>(i) * B + b] = bi[b];
            }
        }
    }

    // kernel average of column means: s_i = (1/(B N)) sum_gamma sum_j K^gamma(X_i-X_j) mean_j^gamma
    void interaction(const std::vector<double>& col_mean /*[i][gamma]*/,
                     std::vector<double>& s_out) const {
        s_out.assign(N, 0.0);
        for (int g = 0; g < B; ++g) {
            const double* kg = kernel.data() + static_cast<std::size_t>(g) * N * N;
            for (int i = 0; i < N; ++i) {
                double acc = 0.0;
                const double* row = kg + static_cast<std::size_t>(i) * N;
                for (int j = 0; j < N; ++j) acc += row[j] * col_mean[static_cast<std::size_t>(j) * B + g];
                s_out[i] += acc;
            }
        }
        const double scale = 1.0 / (static_cast<double>(B) * N);
        for (int i = 0; i < N; ++i) s_out[i] *= scale;
    }

    double drift(int i, int b, double u, double s) const {
        const double t = tau[static_cast<std::size_t>(i) * B + b];
        return (-u + phi(input[static_cast<std::size_t>(i) * B + b] + s)) / t;
    }
    double diffusion(int i, int b) const {
        return sigma / tau[static_cast<std::size_t>(i) * B + b];
    }
};

struct SimOptions {
    std::vector<double> record_times;     // must be multiples of dt
    std::vector<int> column_stream_map;   // noise stream index per column; default identity
    bool force_generic_path = false;      // evaluate the full double sum (small instances)
};

struct SimResult {
    SpatialGrid grid;
    int M = 0, B = 0;
    double dt = 0.0;
    std::vector<double> record_times;
    std::vector<std::vector<double>> snapshots_u;       // per record, flat [(k*N+i)*B+b]
    std::vector<std::vector<double>> snapshots_ell_tv;  // per record
    std::vector<double> final_u;
    std::vector<double> final_ell_tv;
    std::vector<double> sup_norm2;  // per particle [(k*N+i)]: sup over steps of |u|^2
    double min_u_seen = 0.0;
    long long complementarity_violations = 0;

    std::size_t index(int i, int k, int b) const {
        return (static_cast<std::size_t>(k) * grid.N + i) * B + b;
    }
    EmpiricalMeasure measure_at(std::size_t record) const {
        EmpiricalMeasure f;
        f.t = record_times[record];
        const auto& u = snapshots_u[record];
        for (int k = 0; k < M; ++k)
            for (int i = 0; i < grid.N; ++i) {
                f.x.push_back(grid.points[i]);
                Vec v(B);
                for (int b = 0; b < B; ++b) v[b] = u[index(i, k, b)];
                f.u.push_back(std::move(v));
            }
        return f;
    }
};

namespace detail {

inline std::vector<std::size_t> record_steps(const std::vector<double>& record_times, double dt,
                                             double T) {
    std::vector<std::size_t> steps;
    for (double t : record_times) {
        if (t < -1e-12 || t > T + 1e-9)
            throw std::invalid_argument("record time outside [0,T]");
        const double n = t / dt;
        const double rn = std::round(n);
        if (std::abs(n - rn) > 1e-6)
            throw std::invalid_argument("dt must divide record time " + std::to_string(t));
        steps.push_back(static_cast<std::size_t>(rn));
    }
    return steps;
}

}  // namespace detail

// Simulates the full particle system. Noise increments are keyed by
// (master_seed, column, step); with the kernel identically zero every
// particle's path is independent of M by construction.
inline SimResult simulate_system(const model::ModelSpec& m, const SpatialGrid& grid, int M,
                                 const noise::CorrelatedNoiseField& field,
                                 const std::vector<HolderField>& init, double T, double dt,
                                 std::uint64_t master_seed, const SimOptions& options = {}) {
    if (dt <= 0.0 || T <= 0.0) throw std::invalid_argument("simulate_system: T, dt > 0 required");
    if (field.size() != grid.N)
        throw std::invalid_argument("simulate_system: noise locations must match the grid");
    if (static_cast<int>(init.size()) != M)
        throw std::invalid_argument("simulate_system: need one initial field per column");
    const int N = grid.N;
    const int B = m.orientations;
    const std::size_t steps = static_cast<std::size_t>(std::round(T / dt));
    if (std::abs(steps * dt - T) > 1e-9 * std::max(1.0, T))
        throw std::invalid_argument("simulate_system: dt must divide T");

    std::vector<double> record_times = options.record_times;
    if (record_times.empty()) record_times = {T};
    const std::vector<std::size_t> rec_steps = detail::record_steps(record_times, dt, T);

    std::vector<int> column_map = options.column_stream_map;
    if (column_map.empty()) {
        column_map.resize(M);
        for (int k = 0; k < M; ++k) column_map[k] = k;
    }

    const bool fast = m.is_concrete && !options.force_generic_path;
    ConcreteEvaluator eval;
    if (fast) eval = ConcreteEvaluator(m.concrete, grid.points);

    SimResult out;
    out.grid = grid;
    out.M = M;
    out.B = B;
    out.dt = dt;
    out.record_times = record_times;
    out.snapshots_u.resize(record_times.size());
    out.snapshots_ell_tv.resize(record_times.size());

    std::vector<double> u(static_cast<std::size_t>(N) * M * B);
    std::vector<double> tv(u.size(), 0.0);
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < N; ++i) {
            const Vec u0 = init[k].eval(grid.points[i]);
            for (int b = 0; b < B; ++b) u[(static_cast<std::size_t>(k) * N + i) * B + b] = u0[b];
        }
    out.sup_norm2.assign(static_cast<std::size_t>(N) * M, 0.0);
    auto update_sup = [&](int i, int k) {
        double s = 0.0;
        for (int b = 0; b < B; ++b) {
            const double v = u[(static_cast<std::size_t>(k) * N + i) * B + b];
            s += v * v;
        }
        auto& ref = out.sup_norm2[static_cast<std::size_t>(k) * N + i];
        if (s > ref) ref = s;
    };
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < N; ++i) update_sup(i, k);

    auto snapshot_if_due = [&](std::size_t step) {
        for (std::size_t r = 0; r < rec_steps.size(); ++r)
            if (rec_steps[r] == step) {
                out.snapshots_u[r] = u;
                out.snapshots_ell_tv[r] = tv;
            }
    };
    snapshot_if_due(0);

    std::vector<double> col_mean(static_cast<std::size_t>(N) * B);
    std::vector<double> s_node(N);
    std::vector<double> dw(static_cast<std::size_t>(N) * B);
    EmpiricalMeasure emp;

    for (std::size_t n = 0; n < steps; ++n) {
        const double t = n * dt;
        if (fast) {
            // column means over k, then the kernel average
            std::fill(col_mean.begin(), col_mean.end(), 0.0);
            for (int k = 0; k < M; ++k) {
                const double* base = u.data() + static_cast<std::size_t>(k) * N * B;
                for (std::size_t idx = 0; idx < static_cast<std::size_t>(N) * B; ++idx)
                    col_mean[idx] += base[idx];
            }
            const double inv_m = 1.0 / M;
            for (auto& v : col_mean) v *= inv_m;
            eval.interaction(col_mean, s_node);
        } else {
            ParticleEnsemble snap;
            snap.grid = grid;
            snap.M = M;
            snap.B = B;
            snap.t = t;
            snap.u = u;
            emp = empirical_measure(snap);
        }

        for (int k = 0; k < M; ++k) {
            field.sample_increments_into(dt, column_map[k], static_cast<std::uint32_t>(n),
                                         master_seed, dw.data());
            for (int i = 0; i < N; ++i) {
                double* uik = u.data() + (static_cast<std::size_t>(k) * N + i) * B;
                double* tvik = tv.data() + (static_cast<std::size_t>(k) * N + i) * B;
                if (fast) {
                    const double s = s_node[i];
                    for (int b = 0; b < B; ++b) {
                        const double drift = eval.drift(i, b, uik[b], s);
                        const double diff = eval.diffusion(i, b);
                        const double p = uik[b] + drift * dt + diff * dw[i * B + b];
                        if (!std::isfinite(p))
                            throw std::runtime_error("simulate_system: non-finite state at (i=" +
                                                     std::to_string(i) + ",k=" + std::to_string(k) +
                                                     ",n=" + std::to_string(n) + ")");
                        const double inc = sde::step_component(uik[b], tvik[b], drift, diff,
                                                               dw[i * B + b], dt);
                        if (inc > 0.0 && uik[b] != 0.0) ++out.complementarity_violations;
                    }
                } else {
                    Vec uv(B);
                    for (int b = 0; b < B; ++b) uv[b] = uik[b];
                    const model::MeasureView f = emp.view();
                    const Vec drift = model::eval_drift(m, grid.points[i], t, uv, f);
                    const Vec diff = model::eval_diffusion(m, grid.points[i], t, uv, f);
                    for (int b = 0; b < B; ++b) {
                        const double p = uik[b] + drift[b] * dt + diff[b] * dw[i * B + b];
                        if (!std::isfinite(p))
                            throw std::runtime_error("simulate_system: non-finite state at (i=" +
                                                     std::to_string(i) + ",k=" + std::to_string(k) +
                                                     ",n=" + std::to_string(n) + ")");
                        const double inc = sde::step_component(uik[b], tvik[b], drift[b], diff[b],
                                                               dw[i * B + b], dt);
                        if (inc > 0.0 && uik[b] != 0.0) ++out.complementarity_violations;
                    }
                }
                update_sup(i, k);
            }
        }
        snapshot_if_due(n + 1);
    }

    out.min_u_seen = *std::min_element(u.begin(), u.end());
    for (const auto& snap : out.snapshots_u)
        if (!snap.empty()) out.min_u_seen = std::min(out.min_u_seen, *std::min_element(snap.begin(), snap.end()));
    out.final_u = std::move(u);
    out.final_ell_tv = std::move(tv);
    return out;
}

}  // namespace gridmf::particles
