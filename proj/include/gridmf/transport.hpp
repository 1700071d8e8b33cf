#pragma once

// Wasserstein distances: exact 1-D distances via quantile functions, exact
// discrete optimal transport on small instances via successive shortest
// augmenting paths with potentials (an exact network-flow method for the
// transportation LP), product-metric W1 on Q x R^B, and the diagonal coupling
// upper bound.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridmf::transport {

using Point = std::vector<double>;

struct DiscreteMeasure {
    std::vector<Point> points;
    std::vector<double> weights;

    std::size_t size() const { return points.size(); }
    void validate() const {
        if (points.size() != weights.size())
            throw std::invalid_argument("DiscreteMeasure: point/weight count mismatch");
        if (points.empty()) throw std::invalid_argument("DiscreteMeasure: empty measure");
        double total = 0.0;
        for (double w : weights) {
            if (w <= 0.0) throw std::invalid_argument("DiscreteMeasure: weights must be positive");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("DiscreteMeasure: weights sum to " + std::to_string(total));
    }
};

// Exact 1-D Wasserstein of order m between weighted atom sets, by walking the
// merged quantile functions. Exact for m = 1 and m = 2 (both quantile
// functions are step functions, so |qa - qb|^m integrates segment by segment).
inline double w1d_weighted(std::vector<double> pa, std::vector<double> wa, std::vector<double> pb,
                           std::vector<double> wb, int order) {
    if (order != 1 && order != 2) throw std::invalid_argument("w1d_weighted: order must be 1 or 2");
    auto drop_zeros = [](std::vector<double>& p, std::vector<double>& w) {
        std::size_t out = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (w[i] < 0.0) throw std::invalid_argument("w1d_weighted: negative weight");
            if (w[i] > 0.0) {
                p[out] = p[i];
                w[out] = w[i];
                ++out;
            }
        }
        p.resize(out);
        w.resize(out);
    };
    drop_zeros(pa, wa);
    drop_zeros(pb, wb);
    if (pa.empty() || pb.empty()) throw std::invalid_argument("w1d_weighted: empty input");
    auto sort_by_point = [](std::vector<double>& p, std::vector<double>& w) {
        std::vector<std::size_t> idx(p.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
        std::vector<double> ps(p.size()), ws(p.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            ps[i] = p[idx[i]];
            ws[i] = w[idx[i]];
        }
        p = std::move(ps);
        w = std::move(ws);
    };
    const double ta = std::accumulate(wa.begin(), wa.end(), 0.0);
    const double tb = std::accumulate(wb.begin(), wb.end(), 0.0);
    for (double& w : wa) w /= ta;
    for (double& w : wb) w /= tb;
    sort_by_point(pa, wa);
    sort_by_point(pb, wb);

    std::size_t i = 0, j = 0;
    double ca = wa[0], cb = wb[0], prev = 0.0, acc = 0.0;
    while (true) {
        const double level = std::min(ca, cb);
        const double seg = level - prev;
        if (seg > 0.0) {
            const double diff = std::abs(pa[i] - pb[j]);
            acc += seg * (order == 1 ? diff : diff * diff);
        }
        prev = level;
        if (prev >= 1.0 - 1e-15) break;
        if (ca <= cb) {
            ++i;
            if (i >= pa.size()) break;
            ca += wa[i];
        } else {
            ++j;
            if (j >= pb.size()) break;
            cb += wb[j];
        }
    }
    return order == 1 ? acc : std::sqrt(acc);
}

// Sample-based 1-D distance: sorted-difference formula for equal counts,
// common quantile refinement otherwise.
inline double w_sorted_1d(std::vector<double> a, std::vector<double> b, int order) {
    if (a.empty() || b.empty()) throw std::invalid_argument("w_sorted_1d: empty sample set");
    if (a.size() == b.size()) {
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = std::abs(a[i] - b[i]);
            acc += (order == 1) ? d : d * d;
        }
        acc /= static_cast<double>(a.size());
        return order == 1 ? acc : std::sqrt(acc);
    }
    return w1d_weighted(a, std::vector<double>(a.size(), 1.0), b,
                        std::vector<double>(b.size(), 1.0), order);
}

struct TransportPlan {
    struct Entry {
        int i, j;
        double mass;
    };
    std::vector<Entry> entries;
    double cost = 0.0;      // sum of mass * metric^m
    double distance = 0.0;  // cost^(1/m)
};

namespace detail {

// Successive shortest augmenting paths with potentials on the complete
// bipartite transportation graph. Exact optimum; reduced costs are clamped at
// zero against round-off. Nodes 0..n-1 are sources, n..n+m-1 sinks.
inline TransportPlan solve_transport(const std::vector<double>& supply,
                                     const std::vector<double>& demand,
                                     const std::function<double(int, int)>& cost) {
    const int n = static_cast<int>(supply.size());
    const int m = static_cast<int>(demand.size());
    const int V = n + m;
    std::vector<double> ra = supply, rb = demand;
    std::vector<double> pot(V, 0.0);
    std::vector<std::vector<double>> flow(n, std::vector<double>(m, 0.0));
    std::vector<std::vector<double>> c(n, std::vector<double>(m));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) c[i][j] = cost(i, j);

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(V);
    std::vector<int> parent(V);
    std::vector<char> done(V);

    auto total_remaining = [&]() {
        double sa = 0.0, sb = 0.0;
        for (double v : ra) sa += v;
        for (double v : rb) sb += v;
        return std::min(sa, sb);
    };

    const double eps_mass = 1e-14;
    int guard = 0;
    const int guard_max = 8 * V + 512;
    while (total_remaining() > 1e-13) {
        if (++guard > guard_max)
            throw std::runtime_error("solve_transport: augmentation limit exceeded");
        // multi-source Dijkstra in reduced costs from all sources with supply
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(parent.begin(), parent.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        for (int i = 0; i < n; ++i)
            if (ra[i] > eps_mass) dist[i] = 0.0;
        int target = -1;
        for (int iter = 0; iter < V; ++iter) {
            int u = -1;
            double best = inf;
            for (int v = 0; v < V; ++v)
                if (!done[v] && dist[v] < best) {
                    best = dist[v];
                    u = v;
                }
            if (u < 0) break;
            done[u] = 1;
            if (u >= n && rb[u - n] > eps_mass) {
                target = u;
                break;
            }
            if (u < n) {
                for (int j = 0; j < m; ++j) {
                    const double rc = std::max(0.0, c[u][j] + pot[u] - pot[n + j]);
                    if (dist[u] + rc < dist[n + j]) {
                        dist[n + j] = dist[u] + rc;
                        parent[n + j] = u;
                    }
                }
            } else {
                const int j = u - n;
                for (int i = 0; i < n; ++i) {
                    if (flow[i][j] > eps_mass) {
                        const double rc = std::max(0.0, -(c[i][j] + pot[i] - pot[n + j]));
                        if (dist[u] + rc < dist[i]) {
                            dist[i] = dist[u] + rc;
                            parent[i] = u;
                        }
                    }
                }
            }
        }
        if (target < 0) throw std::runtime_error("solve_transport: no augmenting path");

        // bottleneck along the path
        double amount = rb[target - n];
        for (int v = target; parent[v] >= 0; v = parent[v]) {
            const int p = parent[v];
            if (v >= n) {
                // forward arc p -> v, no capacity bound
            } else {
                amount = std::min(amount, flow[v][p - n]);  // reverse of arc v -> (p-n)
            }
            if (parent[p] < 0 && p < n) amount = std::min(amount, ra[p]);
        }
        // augment
        for (int v = target; parent[v] >= 0; v = parent[v]) {
            const int p = parent[v];
            if (v >= n)
                flow[p][v - n] += amount;
            else
                flow[v][p - n] -= amount;
        }
        int root = target;
        while (parent[root] >= 0) root = parent[root];
        ra[root] -= amount;
        rb[target - n] -= amount;
        if (ra[root] < 0.0) ra[root] = 0.0;
        if (rb[target - n] < 0.0) rb[target - n] = 0.0;
        // potential update keeps all reduced costs nonnegative
        const double dmax = dist[target];
        for (int v = 0; v < V; ++v) pot[v] += std::min(dist[v], dmax);
    }

    TransportPlan plan;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            if (flow[i][j] > 0.0) {
                plan.entries.push_back({i, j, flow[i][j]});
                plan.cost += flow[i][j] * c[i][j];
            }
    return plan;
}

}  // namespace detail

constexpr int kExactAtomBudget = 512;

// Exact transport LP between small discrete measures. Returns the distance
// and an optimal plan whose marginals reproduce the inputs within 1e-10.
inline TransportPlan w_discrete_exact(const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                                      const std::function<double(const Point&, const Point&)>& metric,
                                      int order = 1) {
    mu.validate();
    nu.validate();
    if (order != 1 && order != 2)
        throw std::invalid_argument("w_discrete_exact: order must be 1 or 2");
    if (static_cast<int>(mu.size()) > kExactAtomBudget ||
        static_cast<int>(nu.size()) > kExactAtomBudget)
        throw std::invalid_argument("w_discrete_exact: atom budget " +
                                    std::to_string(kExactAtomBudget) + " exceeded");
    auto cost = [&](int i, int j) {
        const double d = metric(mu.points[i], nu.points[j]);
        return order == 1 ? d : d * d;
    };
    TransportPlan plan = detail::solve_transport(mu.weights, nu.weights, cost);
    plan.distance = (order == 1) ? plan.cost : std::sqrt(plan.cost);

    // marginal feasibility check
    std::vector<double> row(mu.size(), 0.0), col(nu.size(), 0.0);
    for (const auto& e : plan.entries) {
        row[e.i] += e.mass;
        col[e.j] += e.mass;
    }
    for (std::size_t i = 0; i < mu.size(); ++i)
        if (std::abs(row[i] - mu.weights[i]) > 1e-10)
            throw std::runtime_error("w_discrete_exact: row marginal violation");
    for (std::size_t j = 0; j < nu.size(); ++j)
        if (std::abs(col[j] - nu.weights[j]) > 1e-10)
            throw std::runtime_error("w_discrete_exact: column marginal violation");
    return plan;
}

inline double euclidean(const Point& a, const Point& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Ground metric on Q x R^B for atoms stored as concatenated (x|u):
// |x - y| + |u - v| with Euclidean norms on each factor.
inline double product_metric(const Point& a, const Point& b, int split) {
    double sx = 0.0, su = 0.0;
    for (int i = 0; i < split; ++i) {
        const double d = a[i] - b[i];
        sx += d * d;
    }
    for (std::size_t i = split; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        su += d * d;
    }
    return std::sqrt(sx) + std::sqrt(su);
}

// Exact W1 on the product space; atoms are concatenated (x|u) vectors with
// the first `space_dim` coordinates in Q.
inline double w1_product_space(const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                               int space_dim) {
    auto metric = [space_dim](const Point& a, const Point& b) {
        return product_metric(a, b, space_dim);
    };
    return w_discrete_exact(mu, nu, metric, 1).distance;
}

// Diagonal coupling bound: mean of |x-y| + |u-v| over an explicit pairing of
// atoms with uniform weights. Feasibility of the pairing makes this an upper
// bound for W1 on the product space.
inline double coupling_upper_bound(
    const std::vector<std::pair<Point, Point>>& paired_atoms, int space_dim) {
    if (paired_atoms.empty()) throw std::invalid_argument("coupling_upper_bound: empty pairing");
    double acc = 0.0;
    for (const auto& [a, b] : paired_atoms) acc += product_metric(a, b, space_dim);
    return acc / static_cast<double>(paired_atoms.size());
}

// Checked variant: verifies the pairing covers both measures' atoms exactly
// once (as multisets) before returning the bound.
inline double coupling_upper_bound(const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                                   const std::vector<std::pair<int, int>>& pairing,
                                   int space_dim) {
    if (pairing.size() != mu.size() || pairing.size() != nu.size())
        throw std::invalid_argument("coupling_upper_bound: pairing must cover both atom sets");
    std::vector<char> seen_mu(mu.size(), 0), seen_nu(nu.size(), 0);
    std::vector<std::pair<Point, Point>> pairs;
    pairs.reserve(pairing.size());
    for (const auto& [i, j] : pairing) {
        if (i < 0 || j < 0 || i >= static_cast<int>(mu.size()) || j >= static_cast<int>(nu.size()) ||
            seen_mu[i] || seen_nu[j])
            throw std::invalid_argument("coupling_upper_bound: mismatched atom multisets");
        seen_mu[i] = seen_nu[j] = 1;
        pairs.emplace_back(mu.points[i], nu.points[j]);
    }
    return coupling_upper_bound(pairs, space_dim);
}

}  // namespace gridmf::transport
