#pragma once

// Projected Euler-Maruyama stepping for SDEs reflected on the positive
// orthant, with exact bookkeeping of the reflection term l and its total
// variation |l|. The half-space geometry makes the projection componentwise:
//   p = u + b dt + s dW,  u' = max(p, 0),  d|l| = max(-p, 0),  l = -|l|.
// Positivity and the ledger identity hold exactly, not up to tolerance.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridmf::sde {

struct ReflectedState {
    std::vector<double> u;       // activity levels, u[beta] >= 0
    std::vector<double> ell;     // reflection term, ell[beta] = -ell_tv[beta]
    std::vector<double> ell_tv;  // total variation |l|, nondecreasing
    double t = 0.0;

    explicit ReflectedState(std::size_t components = 0)
        : u(components, 0.0), ell(components, 0.0), ell_tv(components, 0.0) {}
    static ReflectedState at(std::vector<double> u0, double t0 = 0.0) {
        ReflectedState s(u0.size());
        s.u = std::move(u0);
        s.t = t0;
        return s;
    }
    std::size_t components() const { return u.size(); }
};

// Single-component projected step. Returns the |l| increment (0 when the
// proposal stays in the orthant). The increment is nonzero exactly when the
// post-step value is pinned at 0.
inline double step_component(double& u, double& ell_tv, double drift, double diffusion,
                             double dW, double dt) {
    const double p = u + drift * dt + diffusion * dW;
    if (p >= 0.0) {
        u = p;
        return 0.0;
    }
    u = 0.0;
    ell_tv += -p;
    return -p;
}

inline ReflectedState reflected_euler_step(const ReflectedState& state,
                                           const std::vector<double>& drift,
                                           const std::vector<double>& diffusion,
                                           const std::vector<double>& dW, double dt) {
    if (dt <= 0.0) throw std::invalid_argument("reflected_euler_step: dt must be positive");
    const std::size_t B = state.components();
    if (drift.size() != B || diffusion.size() != B || dW.size() != B)
        throw std::invalid_argument("reflected_euler_step: component count mismatch");
    ReflectedState next = state;
    for (std::size_t b = 0; b < B; ++b) {
        const double p = state.u[b] + drift[b] * dt + diffusion[b] * dW[b];
        if (!std::isfinite(p))
            throw std::runtime_error("reflected_euler_step: non-finite proposal in component " +
                                     std::to_string(b) + " at t=" + std::to_string(state.t));
        step_component(next.u[b], next.ell_tv[b], drift[b], diffusion[b], dW[b], dt);
        next.ell[b] = -next.ell_tv[b];
    }
    next.t = state.t + dt;
    return next;
}

enum class RecordPolicy { none, every_step, final_only };

struct Trajectory {
    std::vector<ReflectedState> states;  // recorded states (per policy)
    ReflectedState final_state{0};
    double running_max_norm = 0.0;  // sup over steps of |u| (Euclidean)
};

// Integrates one reflected path given exogenous coefficient callables.
// increments[n] supplies the dW vector for step n.
template <typename DriftFn, typename DiffusionFn>
Trajectory integrate_path(const ReflectedState& initial, DriftFn&& drift_fn,
                          DiffusionFn&& diffusion_fn,
                          const std::vector<std::vector<double>>& increments, double dt,
                          RecordPolicy record = RecordPolicy::every_step) {
    Trajectory out;
    ReflectedState state = initial;
    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    out.running_max_norm = norm(state.u);
    if (record == RecordPolicy::every_step) out.states.push_back(state);
    for (std::size_t n = 0; n < increments.size(); ++n) {
        const std::vector<double> b = drift_fn(state);
        const std::vector<double> s = diffusion_fn(state);
        state = reflected_euler_step(state, b, s, increments[n], dt);
        out.running_max_norm = std::max(out.running_max_norm, norm(state.u));
        if (record == RecordPolicy::every_step) out.states.push_back(state);
    }
    out.final_state = state;
    if (record == RecordPolicy::final_only) out.states.push_back(state);
    return out;
}

}  // namespace gridmf::sde
