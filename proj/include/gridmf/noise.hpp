#pragma once

// Spatially correlated Gaussian noise with correlation length epsilon.
//
// The field is white noise convolved with an epsilon-rescaled radial mollifier
// rho supported in the unit ball, normalized so that each fixed point sees a
// standard Brownian motion. With rho_eps(z) = eps^-d rho(z/eps), the per-unit-
// time covariance reduces by the substitution w = (z-x)/eps to
//   cov(x,y) = C_rho * Integral rho(w) rho(w - s e1) dw,   s = |x-y|/eps,
// with C_rho = (Integral rho^2)^-1, so cov(x,x) = 1 and cov = 0 for s >= 2.
// Sampling at a finite location set uses the Cholesky factor of the covariance
// matrix; all increments are keyed by (seed, column k, step n, component beta).

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridmf/rng.hpp"

namespace gridmf::noise {

struct Mollifier {
    std::string name;
    std::function<double(double)> profile;  // radial value at r in [0,1], profile(1) = 0
    int space_dim = 1;
    double c_rho = 0.0;  // (Integral of rho^2)^-1, computed once by quadrature

    static Mollifier bump(int d);
    static Mollifier quartic(int d);  // (1 - r^2)^2; polynomial, exact quadrature is easy
};

namespace detail {

// Tensor-product trapezoid quadrature of f(w) = rho(|w|) rho(|w - s e1|) over
// the intersection of the two unit-ball supports: w1 in [s-1, 1], others in
// [-1, 1]. The integrand is smooth with compact support, so refinement
// converges fast; node count doubles per level until the stated tolerance.
inline double overlap_integral(const std::function<double(double)>& profile, int d, double s,
                               double rel_tol, double abs_floor = 0.0) {
    if (d < 1 || d > 3) throw std::invalid_argument("overlap_integral: space_dim must be 1..3");
    if (s >= 2.0) return 0.0;
    auto rho = [&profile](double r2) {
        if (r2 >= 1.0) return 0.0;
        return profile(std::sqrt(r2));
    };
    auto evaluate = [&](int n) {
        const double a1 = s - 1.0, b1 = 1.0;
        double total = 0.0;
        const double h1 = (b1 - a1) / n;
        if (d == 1) {
            for (int i = 0; i <= n; ++i) {
                const double w1 = a1 + i * h1;
                const double f = rho(w1 * w1) * rho((w1 - s) * (w1 - s));
                total += ((i == 0 || i == n) ? 0.5 : 1.0) * f;
            }
            return total * h1;
        }
        const double h = 2.0 / n;
        if (d == 2) {
            for (int i = 0; i <= n; ++i) {
                const double w1 = a1 + i * h1;
                const double wi1 = (i == 0 || i == n) ? 0.5 : 1.0;
                double row = 0.0;
                for (int j = 0; j <= n; ++j) {
                    const double w2 = -1.0 + j * h;
                    const double r2a = w1 * w1 + w2 * w2;
                    const double r2b = (w1 - s) * (w1 - s) + w2 * w2;
                    row += ((j == 0 || j == n) ? 0.5 : 1.0) * rho(r2a) * rho(r2b);
                }
                total += wi1 * row;
            }
            return total * h1 * h;
        }
        for (int i = 0; i <= n; ++i) {
            const double w1 = a1 + i * h1;
            const double wi1 = (i == 0 || i == n) ? 0.5 : 1.0;
            for (int j = 0; j <= n; ++j) {
                const double w2 = -1.0 + j * h;
                const double wj = (j == 0 || j == n) ? 0.5 : 1.0;
                double row = 0.0;
                for (int k = 0; k <= n; ++k) {
                    const double w3 = -1.0 + k * h;
                    const double r2a = w1 * w1 + w2 * w2 + w3 * w3;
                    const double r2b = (w1 - s) * (w1 - s) + w2 * w2 + w3 * w3;
                    row += ((k == 0 || k == n) ? 0.5 : 1.0) * rho(r2a) * rho(r2b);
                }
                total += wi1 * wj * row;
            }
        }
        return total * h1 * h * h;
    };

    int n = 16;
    double prev = evaluate(n);
    const int max_levels = (d == 1) ? 16 : (d == 2 ? 10 : 7);
    for (int level = 0; level < max_levels; ++level) {
        n *= 2;
        const double cur = evaluate(n);
        const double tol = std::max(rel_tol * std::abs(cur), abs_floor);
        if (std::abs(cur - prev) <= tol) return cur;
        prev = cur;
    }
    throw std::runtime_error("overlap_integral: quadrature did not converge at s=" +
                             std::to_string(s));
}

}  // namespace detail

inline Mollifier Mollifier::bump(int d) {
    Mollifier m;
    m.name = "bump";
    m.space_dim = d;
    m.profile = [](double r) {
        if (r >= 1.0) return 0.0;
        return std::exp(1.0 - 1.0 / (1.0 - r * r));
    };
    m.c_rho = 1.0 / detail::overlap_integral(m.profile, d, 0.0, 1e-12);
    return m;
}

inline Mollifier Mollifier::quartic(int d) {
    Mollifier m;
    m.name = "quartic";
    m.space_dim = d;
    m.profile = [](double r) {
        if (r >= 1.0) return 0.0;
        const double q = 1.0 - r * r;
        return q * q;
    };
    m.c_rho = 1.0 / detail::overlap_integral(m.profile, d, 0.0, 1e-12);
    return m;
}

inline double distance(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dxi = x[i] - y[i];
        s += dxi * dxi;
    }
    return std::sqrt(s);
}

// Per-unit-time covariance of the field between two points. Exactly 0 beyond
// separation 2 eps.
inline double covariance(const std::vector<double>& x, const std::vector<double>& y,
                         double epsilon, const Mollifier& mollifier, double rel_tol = 1e-8) {
    if (epsilon <= 0.0) throw std::invalid_argument("covariance: epsilon must be positive");
    if (x.size() != y.size() || static_cast<int>(x.size()) != mollifier.space_dim)
        throw std::invalid_argument("covariance: dimension mismatch");
    const double s = distance(x, y) / epsilon;
    if (s >= 2.0) return 0.0;
    const double abs_floor = 1e-13 / mollifier.c_rho;
    return mollifier.c_rho *
           detail::overlap_integral(mollifier.profile, mollifier.space_dim, s, rel_tol, abs_floor);
}

struct CorrelatedNoiseField {
    double epsilon = 0.0;
    Mollifier mollifier;
    std::vector<std::vector<double>> locations;
    Eigen::MatrixXd sigma;   // analytic covariance per unit time
    Eigen::MatrixXd factor;  // lower-triangular G with G G^T = sigma (+jitter)
    bool identity = false;   // covariance is the identity; sampling skips the matvec
    double jitter = 0.0;
    int orientations = 4;
    int columns = 1;

    int size() const { return static_cast<int>(locations.size()); }

    // Brownian increments over dt for column k at step n: an N x B matrix,
    // column beta distributed N(0, dt * sigma), independent across (beta,k,n).
    // Deterministic in (master_seed, k, n, beta) regardless of call order.
    void sample_increments_into(double dt, int k, std::uint32_t n, std::uint64_t master_seed,
                                double* out /* N*B, row-major [i][beta] */) const {
        const int N = size();
        const int B = orientations;
        if (dt < 0.0) throw std::invalid_argument("sample_increments: dt must be nonnegative");
        const double scale = std::sqrt(dt);
        thread_local std::vector<double> z;
        z.resize(static_cast<std::size_t>(N));
        for (int beta = 0; beta < B; ++beta) {
            rng::CounterStream stream(master_seed, rng::Stream::noise, static_cast<std::uint32_t>(k),
                                      n, static_cast<std::uint32_t>(beta));
            stream.fill_normals(z.data(), static_cast<std::size_t>(N));
            if (identity) {
                for (int i = 0; i < N; ++i) out[i * B + beta] = scale * z[i];
            } else {
                // y = G z with G lower-triangular
                for (int i = 0; i < N; ++i) {
                    double acc = 0.0;
                    const double* g = factor.row(i).data();
                    for (int j = 0; j <= i; ++j) acc += factor(i, j) * z[j];
                    (void)g;
                    out[i * B + beta] = scale * acc;
                }
            }
        }
    }

    Eigen::MatrixXd sample_increments(double dt, int k, std::uint32_t n,
                                      std::uint64_t master_seed) const {
        Eigen::MatrixXd out(size(), orientations);
        thread_local std::vector<double> buf;
        buf.resize(static_cast<std::size_t>(size()) * orientations);
        sample_increments_into(dt, k, n, master_seed, buf.data());
        for (int i = 0; i < size(); ++i)
            for (int b = 0; b < orientations; ++b) out(i, b) = buf[i * orientations + b];
        return out;
    }
};

inline CorrelatedNoiseField build_field(const std::vector<std::vector<double>>& locations,
                                        double epsilon, const Mollifier& mollifier,
                                        int orientations, int columns) {
    if (epsilon <= 0.0) throw std::invalid_argument("build_field: epsilon must be positive");
    const int N = static_cast<int>(locations.size());
    if (N == 0) throw std::invalid_argument("build_field: empty location set");
    for (int i = 0; i < N; ++i)
        for (int j = i + 1; j < N; ++j)
            if (distance(locations[i], locations[j]) == 0.0)
                throw std::invalid_argument("build_field: locations must be pairwise distinct");

    CorrelatedNoiseField field;
    field.epsilon = epsilon;
    field.mollifier = mollifier;
    field.locations = locations;
    field.orientations = orientations;
    field.columns = columns;
    field.sigma.resize(N, N);

    // Covariance depends on the separation only; cache by distance (grids
    // repeat separations heavily). Tight tolerance keeps the matrix PSD up to
    // jitter-level perturbations.
    std::map<double, double> by_distance;
    bool any_offdiag = false;
    for (int i = 0; i < N; ++i) {
        for (int j = i; j < N; ++j) {
            const double dist = distance(locations[i], locations[j]);
            double value;
            if (dist >= 2.0 * epsilon) {
                value = 0.0;
            } else {
                auto it = by_distance.find(dist);
                if (it == by_distance.end()) {
                    value = covariance(locations[i], locations[j], epsilon, mollifier, 1e-10);
                    by_distance.emplace(dist, value);
                } else {
                    value = it->second;
                }
            }
            field.sigma(i, j) = value;
            field.sigma(j, i) = value;
            if (i != j && value != 0.0) any_offdiag = true;
        }
    }

    if (!any_offdiag) {
        field.identity = true;
        field.factor = Eigen::MatrixXd::Identity(N, N);
        return field;
    }

    // PSD up to quadrature round-off; escalate diagonal jitter 1e-12 -> 1e-8.
    double jitter = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt) {
        Eigen::MatrixXd trial = field.sigma;
        if (jitter > 0.0) trial.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(trial);
        if (llt.info() == Eigen::Success) {
            field.factor = llt.matrixL();
            field.jitter = jitter;
            return field;
        }
        jitter = (jitter == 0.0) ? 1e-12 : jitter * 10.0;
        if (jitter > 1e-8) break;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(field.sigma);
    throw std::runtime_error("build_field: factorization failed after max jitter; smallest "
                             "eigenvalue estimate " +
                             std::to_string(es.eigenvalues().minCoeff()));
}

struct NoiseStatsReport {
    double max_cov_error = 0.0;       // max |empirical - analytic| covariance entry (per unit t)
    double max_far_corr = 0.0;        // max |corr| over pairs separated by more than 2 eps
    bool qv_ratio_bound_ok = true;    // difference-variance bound against the analytic constant
    bool cov_within_3se = true;       // every entry within 3 standard errors of analytic
    double c_check = 0.0;             // sup over pairs of 2(1-Sigma_xy) eps^2 / |x-y|^2
    double worst_pair_sep = 0.0;
    double diag_min = 0.0;            // smallest empirical same-point variance per unit time
    double diag_max = 0.0;            // largest
    int samples = 0;
};

// Draws n_samples keyed increments and checks the empirical second moments
// against the analytic covariance. All orientations are pooled (they are
// independent copies).
inline NoiseStatsReport verify_statistics(const CorrelatedNoiseField& field, double dt,
                                          int n_samples, std::uint64_t master_seed) {
    if (n_samples < 10000)
        throw std::invalid_argument("verify_statistics: n_samples must be at least 10^4");
    const int N = field.size();
    const int B = field.orientations;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(N, N);
    Eigen::MatrixXd sumsq = Eigen::MatrixXd::Zero(N, N);
    std::vector<double> buf(static_cast<std::size_t>(N) * B);
    for (int n = 0; n < n_samples; ++n) {
        field.sample_increments_into(dt, 0, static_cast<std::uint32_t>(n), master_seed, buf.data());
        for (int beta = 0; beta < B; ++beta) {
            for (int i = 0; i < N; ++i) {
                const double xi = buf[i * B + beta];
                for (int j = i; j < N; ++j) {
                    const double p = xi * buf[j * B + beta];
                    sum(i, j) += p;
                    sumsq(i, j) += p * p;
                }
            }
        }
    }
    const double count = static_cast<double>(n_samples) * B;
    NoiseStatsReport report;
    report.samples = n_samples;

    // Analytic constant for the difference-variance bound, from the recomposed
    // covariance integral: per unit time Var[W(x)-W(y)] = 2(1 - Sigma_xy).
    for (int i = 0; i < N; ++i) {
        for (int j = i + 1; j < N; ++j) {
            const double sep = distance(field.locations[i], field.locations[j]);
            const double ratio = 2.0 * (1.0 - field.sigma(i, j)) * field.epsilon * field.epsilon /
                                 (sep * sep);
            report.c_check = std::max(report.c_check, ratio);
        }
    }

    report.diag_min = 1e300;
    report.diag_max = -1e300;
    for (int i = 0; i < N; ++i) {
        for (int j = i; j < N; ++j) {
            const double mean = sum(i, j) / count;             // E[dWi dWj]
            const double emp = mean / dt;                      // per unit time
            const double var = sumsq(i, j) / count - mean * mean;
            const double se = std::sqrt(std::max(var, 0.0) / count) / dt;
            const double err = std::abs(emp - field.sigma(i, j));
            report.max_cov_error = std::max(report.max_cov_error, err);
            if (err > 3.0 * se) report.cov_within_3se = false;
            if (i == j) {
                report.diag_min = std::min(report.diag_min, emp);
                report.diag_max = std::max(report.diag_max, emp);
            }

            if (i != j) {
                const double sep = distance(field.locations[i], field.locations[j]);
                if (sep > 2.0 * field.epsilon) {
                    const double di = sum(i, i) / count, dj = sum(j, j) / count;
                    const double corr = mean / std::sqrt(di * dj);
                    if (std::abs(corr) > report.max_far_corr) {
                        report.max_far_corr = std::abs(corr);
                        report.worst_pair_sep = sep;
                    }
                }
                // Empirical difference variance per unit time vs the bound
                // C_check |x-y|^2 / eps^2, with a 3-SE allowance.
                const double emp_diff =
                    (sum(i, i) + sum(j, j) - 2.0 * sum(i, j)) / count / dt;
                const double se_diff = 3.0 * (std::sqrt(std::max(sumsq(i, i), sumsq(j, j)) / count) /
                                              std::sqrt(count)) / dt;
                const double bound = report.c_check * sep * sep /
                                     (field.epsilon * field.epsilon);
                if (emp_diff > bound + 3.0 * se_diff + 1e-12) report.qv_ratio_bound_ok = false;
            }
        }
    }
    return report;
}

}  // namespace gridmf::noise
