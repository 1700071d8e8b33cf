#pragma once

// Structural form of the drift and diffusion coefficients, the concrete
// grid-cell instantiation, and Monte Carlo validation of the Lipschitz /
// Hoelder / growth hypotheses the convergence theory rests on.
//
// Evaluation contract (per orientation beta):
//   drift(x,r,u,f)     = b0[beta](x,r,u)
//                        + post_scale[beta](x) * phi_b[beta]( input_shift[beta](x,r)
//                                                  + Integral b1[beta](x,y,r,u,v) f(dy,dv) )
//   diffusion(x,r,u,f) = sigma0[beta](x,r,u)
//                        + post_scale[beta](x) * phi_sigma[beta]( Integral sigma1[beta] f )
// The outer nonlinearities phi_* are plain R -> R maps; the x- and r-dependent
// pieces of the composition (the external input and the 1/tau scaling of the
// grid-cell model) live in the dedicated input_shift / post_scale slots so the
// phi's stay globally Lipschitz functions of one variable.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridmf/rng.hpp"

namespace gridmf::model {

using Vec = std::vector<double>;

inline double softplus(double z) {
    // log(1+exp(z)) without overflow; globally 1-Lipschitz
    if (z > 30.0) return z;
    if (z < -30.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

inline double mexican_hat(const Vec& x, double A_e, double s_e, double A_i, double s_i) {
    if (s_e <= 0.0 || s_i <= 0.0)
        throw std::invalid_argument("mexican_hat: widths must be positive");
    double r2 = 0.0;
    for (double xi : x) r2 += xi * xi;
    return A_e * std::exp(-r2 / (s_e * s_e)) - A_i * std::exp(-r2 / (s_i * s_i));
}

// A finite weighted point set on Q x R^B; weights nonnegative, sum to 1.
struct MeasureView {
    struct Atom {
        Vec y;  // location in Q
        Vec v;  // value in R^B
        double w = 0.0;
    };
    std::vector<Atom> atoms;

    void validate() const {
        double total = 0.0;
        for (const auto& a : atoms) {
            if (a.w < 0.0) throw std::invalid_argument("MeasureView: negative weight");
            total += a.w;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("MeasureView: weights sum to " + std::to_string(total));
    }

    template <typename Fn>
    double integrate(Fn&& g) const {
        double s = 0.0;
        for (const auto& a : atoms) s += a.w * g(a.y, a.v);
        return s;
    }

    static MeasureView point_mass(Vec y, Vec v) {
        MeasureView f;
        f.atoms.push_back({std::move(y), std::move(v), 1.0});
        return f;
    }
};

struct GridCellParams {
    int orientations = 4;
    int space_dim = 1;
    std::function<Vec(const Vec&)> tau;                    // relaxation times tau^beta(x)
    std::function<double(double)> firing_rate;             // phi, globally Lipschitz
    std::vector<std::function<double(const Vec&)>> kernels;  // K^gamma : R^d -> R
    std::function<Vec(const Vec&, double)> external_input;   // B^beta(x, r)
    double noise_amplitude = 0.0;                            // sigma >= 0

    void validate() const {
        if (orientations < 1) throw std::invalid_argument("GridCellParams: orientations >= 1");
        if (space_dim < 1) throw std::invalid_argument("GridCellParams: space_dim >= 1");
        if (noise_amplitude < 0.0)
            throw std::invalid_argument("GridCellParams: noise amplitude must be >= 0");
        if (static_cast<int>(kernels.size()) != orientations)
            throw std::invalid_argument("GridCellParams: need one kernel per orientation");
        if (!tau || !firing_rate || !external_input)
            throw std::invalid_argument("GridCellParams: missing callables");
        // tau bounds probed on a small sample of Q
        for (int i = 0; i <= 8; ++i) {
            Vec x(space_dim, (i + 0.5) / 9.0);
            const Vec t = tau(x);
            for (double tv : t)
                if (!(tv > 0.0) || !std::isfinite(tv))
                    throw std::invalid_argument("GridCellParams: tau must be positive and finite");
        }
    }
};

struct ModelSpec {
    int orientations = 4;
    int space_dim = 1;
    std::function<Vec(const Vec&, double, const Vec&)> b0;      // (x, r, u) -> R^B
    std::function<Vec(const Vec&, double, const Vec&)> sigma0;  // (x, r, u) -> R^B
    // interaction integrands; empty std::function means identically zero
    std::function<Vec(const Vec&, const Vec&, double, const Vec&, const Vec&)> b1;
    std::function<Vec(const Vec&, const Vec&, double, const Vec&, const Vec&)> sigma1;
    std::vector<std::function<double(double)>> phi_b;      // per orientation, R -> R
    std::vector<std::function<double(double)>> phi_sigma;  // per orientation, R -> R
    std::function<Vec(const Vec&, double)> input_shift;    // added inside phi_b; empty = 0
    std::function<Vec(const Vec&)> post_scale;             // multiplies phi term; empty = 1

    double lipschitz_L = 1.0;
    double growth_C = 1.0;
    double alpha = 1.0;  // Hoelder exponent in x, in (0,1]

    bool is_concrete = false;  // grid-cell instantiation: sigma constant, b1 linear in v
    GridCellParams concrete;

    void validate() const {
        if (alpha <= 0.0 || alpha > 1.0)
            throw std::invalid_argument("ModelSpec: alpha must lie in (0,1]");
        if (lipschitz_L <= 0.0 || growth_C <= 0.0)
            throw std::invalid_argument("ModelSpec: declared constants must be positive");
        if (!b0 || !sigma0) throw std::invalid_argument("ModelSpec: b0 and sigma0 required");
    }
};

// Grid-cell model:
//   tau^beta(x) b^beta = -u^beta + phi(B^beta(x,r) + (1/B) sum_gamma K^gamma(x-y)-average of v^gamma)
//   tau^beta(x) sigma^beta = sigma (constant), sigma1 = 0.
inline ModelSpec build_concrete_model(const GridCellParams& params) {
    params.validate();
    ModelSpec m;
    const int B = params.orientations;
    m.orientations = B;
    m.space_dim = params.space_dim;
    m.is_concrete = true;
    m.concrete = params;

    m.b0 = [tau = params.tau, B](const Vec& x, double, const Vec& u) {
        const Vec t = tau(x);
        Vec out(B);
        for (int b = 0; b < B; ++b) out[b] = -u[b] / t[b];
        return out;
    };
    m.sigma0 = [tau = params.tau, B, s = params.noise_amplitude](const Vec& x, double,
                                                                 const Vec&) {
        const Vec t = tau(x);
        Vec out(B);
        for (int b = 0; b < B; ++b) out[b] = s / t[b];
        return out;
    };
    m.b1 = [kernels = params.kernels, B, d = params.space_dim](const Vec& x, const Vec& y, double,
                                                               const Vec&, const Vec& v) {
        Vec diff(d);
        for (int i = 0; i < d; ++i) diff[i] = x[i] - y[i];
        double s = 0.0;
        for (int g = 0; g < B; ++g) s += kernels[g](diff) * v[g];
        s /= B;
        return Vec(B, s);  // the kernel average is shared by all orientations
    };
    m.phi_b.assign(B, params.firing_rate);
    m.phi_sigma.clear();  // identically zero
    m.input_shift = params.external_input;
    m.post_scale = [tau = params.tau, B](const Vec& x) {
        const Vec t = tau(x);
        Vec out(B);
        for (int b = 0; b < B; ++b) out[b] = 1.0 / t[b];
        return out;
    };
    return m;
}

namespace detail {

inline void check_finite(const Vec& v, const char* what) {
    for (std::size_t b = 0; b < v.size(); ++b)
        if (!std::isfinite(v[b]))
            throw std::runtime_error(std::string(what) + ": non-finite value in component " +
                                     std::to_string(b));
}

inline Vec integrated_interaction(
    const std::function<Vec(const Vec&, const Vec&, double, const Vec&, const Vec&)>& g,
    int B, const Vec& x, double r, const Vec& u, const MeasureView& f) {
    Vec acc(B, 0.0);
    if (!g) return acc;
    for (const auto& atom : f.atoms) {
        const Vec val = g(x, atom.y, r, u, atom.v);
        for (int b = 0; b < B; ++b) acc[b] += atom.w * val[b];
    }
    return acc;
}

}  // namespace detail

inline Vec eval_drift(const ModelSpec& m, const Vec& x, double r, const Vec& u,
                      const MeasureView& f) {
    const int B = m.orientations;
    Vec out = m.b0(x, r, u);
    detail::check_finite(out, "eval_drift: b0");
    const Vec inner = detail::integrated_interaction(m.b1, B, x, r, u, f);
    detail::check_finite(inner, "eval_drift: interaction integral");
    const Vec shift = m.input_shift ? m.input_shift(x, r) : Vec(B, 0.0);
    const Vec scale = m.post_scale ? m.post_scale(x) : Vec(B, 1.0);
    for (int b = 0; b < B; ++b) {
        if (!m.phi_b.empty()) out[b] += scale[b] * m.phi_b[b](shift[b] + inner[b]);
    }
    detail::check_finite(out, "eval_drift");
    return out;
}

inline Vec eval_diffusion(const ModelSpec& m, const Vec& x, double r, const Vec& u,
                          const MeasureView& f) {
    const int B = m.orientations;
    Vec out = m.sigma0(x, r, u);
    detail::check_finite(out, "eval_diffusion: sigma0");
    if (!m.phi_sigma.empty()) {
        const Vec inner = detail::integrated_interaction(m.sigma1, B, x, r, u, f);
        detail::check_finite(inner, "eval_diffusion: interaction integral");
        const Vec scale = m.post_scale ? m.post_scale(x) : Vec(B, 1.0);
        for (int b = 0; b < B; ++b) out[b] += scale[b] * m.phi_sigma[b](inner[b]);
    }
    detail::check_finite(out, "eval_diffusion");
    return out;
}

struct RegularityReport {
    double L_hat = 0.0;  // largest Lipschitz/Hoelder quotient observed
    double C_hat = 0.0;  // largest growth quotient |coef| / (1+|u|) observed
    bool alpha_consistency = true;
    int lipschitz_violations = 0;
    int holder_violations = 0;
    int growth_violations = 0;
};

// Monte Carlo scan of the structural hypotheses: Lipschitz quotients in u,v,
// Hoelder quotients in x (including near-coincident pairs, where a wrong
// declared alpha shows up), and the sublinear growth ratio over two nested
// u-ranges. Violations are flagged against the declared constants with a
// 1.05 slack factor; the report never throws.
inline RegularityReport estimate_regularity_constants(const ModelSpec& m, int sample_budget,
                                                      std::uint64_t seed) {
    if (sample_budget < 100)
        throw std::invalid_argument("estimate_regularity_constants: budget must be >= 100");
    m.validate();
    const int B = m.orientations;
    const int d = m.space_dim;
    rng::CounterStream st(seed, rng::Stream::regularity);
    std::uint64_t idx = 0;
    auto next_uniform = [&]() { return st.uniform(idx++); };

    auto rand_x = [&]() {
        Vec x(d);
        for (int i = 0; i < d; ++i) x[i] = next_uniform();
        return x;
    };
    auto rand_u = [&](double range) {
        Vec u(B);
        for (int b = 0; b < B; ++b) u[b] = range * next_uniform();
        return u;
    };
    auto inf_norm_diff = [&](const Vec& a, const Vec& b) {
        double s = 0.0;
        for (int i = 0; i < B; ++i) s = std::max(s, std::abs(a[i] - b[i]));
        return s;
    };
    auto norm2 = [](const Vec& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };

    RegularityReport rep;
    const double slack = 1.05;
    const double L_cap = m.lipschitz_L * slack;
    const double C_cap = m.growth_C * slack;
    const double r = 0.5;

    for (int it = 0; it < sample_budget; ++it) {
        const Vec x = rand_x();
        Vec x2 = rand_x();
        // half the pairs nearly coincident: separation 10^-(1..6)
        if (it % 2 == 0) {
            const double sep = std::pow(10.0, -1.0 - 5.0 * next_uniform());
            for (int i = 0; i < d; ++i) x2[i] = std::min(1.0, std::max(0.0, x[i] + sep / std::sqrt(d)));
        }
        const double range = (it % 3 == 0) ? 8.0 : 2.0;
        const Vec u = rand_u(range);
        const Vec u2 = rand_u(range);
        const Vec v = rand_u(range);
        const Vec v2 = rand_u(range);

        const Vec b0a = m.b0(x, r, u), b0b = m.b0(x, r, u2);
        const Vec s0a = m.sigma0(x, r, u), s0b = m.sigma0(x, r, u2);
        const double du = norm2([&] { Vec t(B); for (int i = 0; i < B; ++i) t[i] = u[i] - u2[i]; return t; }());
        if (du > 1e-12) {
            const double q = (inf_norm_diff(b0a, b0b) + inf_norm_diff(s0a, s0b)) / du;
            rep.L_hat = std::max(rep.L_hat, q);
            if (q > L_cap) ++rep.lipschitz_violations;
        }
        const Vec b0x = m.b0(x2, r, u), s0x = m.sigma0(x2, r, u);
        double dx = 0.0;
        for (int i = 0; i < d; ++i) dx += (x[i] - x2[i]) * (x[i] - x2[i]);
        dx = std::sqrt(dx);
        if (dx > 1e-14) {
            const double q =
                (inf_norm_diff(b0a, b0x) + inf_norm_diff(s0a, s0x)) / std::pow(dx, m.alpha);
            rep.L_hat = std::max(rep.L_hat, q);
            if (q > L_cap) ++rep.holder_violations;
        }
        {
            const double q = (inf_norm_diff(b0a, Vec(B, 0.0)) + inf_norm_diff(s0a, Vec(B, 0.0))) /
                             (1.0 + norm2(u));
            rep.C_hat = std::max(rep.C_hat, q);
            if (q > C_cap) ++rep.growth_violations;
        }
        if (m.b1 || m.sigma1) {
            const Vec y = rand_x();
            auto b1v = [&](const Vec& uu, const Vec& vv) {
                return m.b1 ? m.b1(x, y, r, uu, vv) : Vec(B, 0.0);
            };
            auto s1v = [&](const Vec& uu, const Vec& vv) {
                return m.sigma1 ? m.sigma1(x, y, r, uu, vv) : Vec(B, 0.0);
            };
            const double duv = std::sqrt(du * du + std::pow(norm2([&] {
                                             Vec t(B);
                                             for (int i = 0; i < B; ++i) t[i] = v[i] - v2[i];
                                             return t;
                                         }()),
                                                            2));
            if (duv > 1e-12) {
                const double q = (inf_norm_diff(b1v(u, v), b1v(u2, v2)) +
                                  inf_norm_diff(s1v(u, v), s1v(u2, v2))) /
                                 duv;
                rep.L_hat = std::max(rep.L_hat, q);
                if (q > L_cap) ++rep.lipschitz_violations;
            }
            const double q = (inf_norm_diff(b1v(u, v), Vec(B, 0.0)) +
                              inf_norm_diff(s1v(u, v), Vec(B, 0.0))) /
                             (1.0 + norm2(u) + norm2(v));
            rep.C_hat = std::max(rep.C_hat, q);
            if (q > C_cap) ++rep.growth_violations;
        }
    }
    rep.alpha_consistency =
        rep.lipschitz_violations == 0 && rep.holder_violations == 0 && rep.growth_violations == 0;
    return rep;
}

}  // namespace gridmf::model
