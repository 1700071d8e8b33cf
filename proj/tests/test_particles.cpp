#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gridmf/model.hpp"
#include "gridmf/noise.hpp"
#include "gridmf/particles.hpp"
#include "gridmf/rng.hpp"

using namespace gridmf;
using model::Vec;
using particles::HolderField;

namespace {

model::GridCellParams relax_params(int B, double sigma, double kernel_scale) {
    model::GridCellParams p;
    p.orientations = B;
    p.space_dim = 1;
    p.noise_amplitude = sigma;
    p.tau = [B](const Vec&) { return Vec(B, 1.0); };
    p.firing_rate = [](double z) { return model::softplus(z); };
    for (int g = 0; g < B; ++g)
        p.kernels.push_back([kernel_scale](const Vec& z) {
            if (kernel_scale == 0.0) return 0.0;
            return kernel_scale * model::mexican_hat(z, 1.2, 0.15, 1.0, 0.3);
        });
    p.external_input = [B](const Vec&, double) { return Vec(B, 0.3); };
    return p;
}

std::vector<HolderField> fields(double alpha, int B, int modes, double amp, std::uint64_t seed,
                                int M, int d = 1) {
    std::vector<HolderField> out;
    for (int k = 0; k < M; ++k)
        out.push_back(particles::holder_initial_field(alpha, B, modes, amp, seed, k, d));
    return out;
}

}  // namespace

TEST_CASE("grid locations") {
    auto g1 = particles::grid_locations(1, 1);
    CHECK(g1.points.size() == 1);
    CHECK(g1.points[0][0] == Catch::Approx(0.5));

    auto g4 = particles::grid_locations(4, 2);
    REQUIRE(g4.points.size() == 4);
    std::vector<std::pair<double, double>> got;
    for (const auto& p : g4.points) got.emplace_back(p[0], p[1]);
    std::sort(got.begin(), got.end());
    const std::vector<std::pair<double, double>> want = {
        {0.25, 0.25}, {0.25, 0.75}, {0.75, 0.25}, {0.75, 0.75}};
    for (int i = 0; i < 4; ++i) {
        CHECK(got[i].first == Catch::Approx(want[i].first));
        CHECK(got[i].second == Catch::Approx(want[i].second));
    }

    auto g8 = particles::grid_locations(8, 1);
    double min_dist = 1.0;
    for (int i = 0; i < 8; ++i)
        for (int j = i + 1; j < 8; ++j)
            min_dist = std::min(min_dist, std::abs(g8.points[i][0] - g8.points[j][0]));
    CHECK(min_dist == Catch::Approx(0.125));
    CHECK(g8.cell_diameter == Catch::Approx(0.125));
    CHECK(g8.cell_measure == Catch::Approx(0.125));

    CHECK_THROWS_AS(particles::grid_locations(10, 2), std::invalid_argument);
}

TEST_CASE("holder field: zero modes is the softplus(0) constant") {
    auto f = particles::holder_initial_field(0.7, 2, 0, 1.0, 5, 0, 1);
    const Vec v = f.eval({0.3});
    CHECK(v[0] == Catch::Approx(std::log(2.0)));
    CHECK(v[1] == Catch::Approx(std::log(2.0)));
}

TEST_CASE("holder field: determinism and distinctness across k") {
    auto a = particles::holder_initial_field(0.5, 1, 16, 1.0, 7, 3, 1);
    auto b = particles::holder_initial_field(0.5, 1, 16, 1.0, 7, 3, 1);
    auto c = particles::holder_initial_field(0.5, 1, 16, 1.0, 7, 4, 1);
    bool any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const Vec x = {i / 100.0};
        CHECK(a.eval(x)[0] == b.eval(x)[0]);
        if (a.eval(x)[0] != c.eval(x)[0]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("holder field: values nonnegative and quotients below the declared seminorm") {
    auto f = particles::holder_initial_field(0.5, 1, 32, 1.0, 21, 0, 1);
    rng::CounterStream st(3, rng::Stream::scratch);
    double max_q = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double x = st.uniform(2 * i), y = st.uniform(2 * i + 1);
        const double ux = f.eval({x})[0], uy = f.eval({y})[0];
        CHECK(ux >= 0.0);
        if (std::abs(x - y) > 1e-12)
            max_q = std::max(max_q, std::abs(ux - uy) / std::pow(std::abs(x - y), 0.5));
    }
    CHECK(max_q <= 1.05 * f.declared_seminorm);
    CHECK(max_q > 0.0);
}

TEST_CASE("holder quotient scan: alpha=1 quotient grows as pairs shrink, alpha=0.5 stays flat") {
    auto f = particles::holder_initial_field(0.5, 1, 64, 1.0, 33, 0, 1);
    rng::CounterStream st(4, rng::Stream::scratch);
    auto scan = [&](double sep, double expo) {
        double q = 0.0;
        for (int i = 0; i < 300; ++i) {
            const double x = 0.1 + 0.8 * st.uniform(i);
            const double y = x + sep;
            const double ux = f.eval({x})[0], uy = f.eval({y})[0];
            q = std::max(q, std::abs(ux - uy) / std::pow(sep, expo));
        }
        return q;
    };
    const double lip_coarse = scan(0.25, 1.0);
    const double lip_fine = scan(1.0 / 64.0, 1.0);
    const double hold_coarse = scan(0.25, 0.5);
    const double hold_fine = scan(1.0 / 64.0, 0.5);
    CHECK(lip_fine > 2.0 * lip_coarse);          // Lipschitz quotient blows up
    CHECK(hold_fine < 3.0 * hold_coarse + 1.0);  // alpha = 1/2 quotient stays bounded
}

TEST_CASE("empirical measure: single atom, normalization, component averages") {
    particles::ParticleEnsemble e;
    e.grid = particles::grid_locations(1, 1);
    e.M = 1;
    e.B = 2;
    e.u = {0.4, 0.9};
    e.ell_tv = {0.0, 0.0};
    auto f = particles::empirical_measure(e);
    CHECK(f.size() == 1);
    CHECK(f.integrate([](const Vec&, const Vec&) { return 1.0; }) == Catch::Approx(1.0));

    particles::ParticleEnsemble e2;
    e2.grid = particles::grid_locations(4, 1);
    e2.M = 3;
    e2.B = 1;
    e2.u.resize(12);
    for (int i = 0; i < 12; ++i) e2.u[i] = 0.1 * i;
    e2.ell_tv.assign(12, 0.0);
    auto f2 = particles::empirical_measure(e2);
    CHECK(f2.size() == 12);
    const double mean = f2.integrate([](const Vec&, const Vec& v) { return v[0]; });
    double direct = 0.0;
    for (int i = 0; i < 12; ++i) direct += 0.1 * i;
    direct /= 12.0;
    CHECK(mean == Catch::Approx(direct).margin(1e-14));
    CHECK(f2.view().atoms.size() == 12);
    CHECK_NOTHROW(f2.view().validate());
}

TEST_CASE("single decoupled particle follows the relaxation ODE") {
    auto p = relax_params(1, 0.0, 0.0);
    p.firing_rate = [](double) { return 0.0; };  // pure relaxation
    p.external_input = [](const Vec&, double) { return Vec(1, 0.0); };
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(1, 1);
    auto field = noise::build_field(grid.points, 0.1, noise::Mollifier::bump(1), 1, 1);
    // constant initial field softplus(0) = log 2; oracle u(T) = log(2) e^{-T}
    auto init = fields(1.0, 1, 0, 1.0, 9, 1);
    particles::SimOptions opts;
    opts.record_times = {1.0};
    auto res = particles::simulate_system(m, grid, 1, field, init, 1.0, 1e-4, 9, opts);
    CHECK(std::abs(res.final_u[0] - std::log(2.0) * std::exp(-1.0)) < 1e-3);
}

TEST_CASE("keyed streams decouple columns: M=2 run contains the M=1 paths") {
    auto p = relax_params(1, 0.4, 0.0);  // no interaction
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    auto field1 = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 1, 1);
    auto field2 = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 1, 2);
    auto init2 = fields(1.0, 1, 8, 0.7, 123, 2);
    std::vector<HolderField> init1 = {init2[0]};
    particles::SimOptions opts;
    opts.record_times = {0.25};
    auto r1 = particles::simulate_system(m, grid, 1, field1, init1, 0.25, 1.0 / 512.0, 55, opts);
    auto r2 = particles::simulate_system(m, grid, 2, field2, init2, 0.25, 1.0 / 512.0, 55, opts);
    for (int i = 0; i < 4; ++i)
        CHECK(r1.final_u[r1.index(i, 0, 0)] == r2.final_u[r2.index(i, 0, 0)]);  // bit identical
}

TEST_CASE("exchangeability in k: permuting noise and initial streams permutes paths") {
    auto p = relax_params(1, 0.3, 1.0);  // interacting
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    const int M = 3;
    auto field = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 1, M);
    const std::uint64_t seed = 314;
    auto base_fields = fields(1.0, 1, 8, 0.7, seed, M);
    const std::vector<int> perm = {2, 0, 1};
    std::vector<HolderField> perm_fields = {base_fields[perm[0]], base_fields[perm[1]],
                                            base_fields[perm[2]]};
    particles::SimOptions oa;
    oa.record_times = {0.25};
    auto ra = particles::simulate_system(m, grid, M, field, base_fields, 0.25, 1.0 / 512.0, seed,
                                         oa);
    particles::SimOptions ob;
    ob.record_times = {0.25};
    ob.column_stream_map = perm;
    auto rb = particles::simulate_system(m, grid, M, field, perm_fields, 0.25, 1.0 / 512.0, seed,
                                         ob);
    // column k of run B carries the streams of column perm[k] of run A, and
    // the empirical measure is permutation-invariant, so paths match exactly
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < 4; ++i)
            CHECK(rb.final_u[rb.index(i, k, 0)] == ra.final_u[ra.index(i, perm[k], 0)]);
}

TEST_CASE("reflection invariants lift to the ensemble") {
    auto p = relax_params(2, 0.8, 0.5);
    p.external_input = [](const Vec&, double) { return Vec(2, -0.5); };  // pushes toward 0
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    auto field = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 2, 4);
    auto init = fields(1.0, 2, 8, 0.5, 77, 4);
    particles::SimOptions opts;
    opts.record_times = {0.125, 0.25};
    auto res = particles::simulate_system(m, grid, 4, field, init, 0.25, 1.0 / 1024.0, 77, opts);
    CHECK(res.min_u_seen >= 0.0);
    CHECK(res.complementarity_violations == 0);
    for (const auto& snap : res.snapshots_u)
        for (double v : snap) CHECK(v >= 0.0);
    // the downward input makes some component touch the boundary
    double total_tv = 0.0;
    for (double v : res.final_ell_tv) total_tv += v;
    CHECK(total_tv > 0.0);
}

TEST_CASE("fast path equals the generic double-sum path") {
    auto p = relax_params(2, 0.0, 1.0);
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    auto field = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 2, 2);
    auto init = fields(1.0, 2, 6, 0.8, 2024, 2);
    particles::SimOptions fast_opts;
    fast_opts.record_times = {0.05};
    particles::SimOptions slow_opts = fast_opts;
    slow_opts.force_generic_path = true;
    auto rf = particles::simulate_system(m, grid, 2, field, init, 0.05, 0.05 / 32.0, 11, fast_opts);
    auto rs = particles::simulate_system(m, grid, 2, field, init, 0.05, 0.05 / 32.0, 11, slow_opts);
    for (std::size_t i = 0; i < rf.final_u.size(); ++i)
        CHECK(std::abs(rf.final_u[i] - rs.final_u[i]) < 1e-14);
}

TEST_CASE("drift against the empirical measure equals the explicit double sum") {
    auto p = relax_params(1, 0.0, 1.3);
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    const int M = 3, N = 4;
    rng::CounterStream st(6, rng::Stream::scratch);
    particles::ParticleEnsemble e;
    e.grid = grid;
    e.M = M;
    e.B = 1;
    e.u.resize(N * M);
    for (std::size_t i = 0; i < e.u.size(); ++i) e.u[i] = st.uniform(i);
    e.ell_tv.assign(N * M, 0.0);
    auto f = particles::empirical_measure(e).view();
    const int i = 2;
    const Vec u_ik = {e.u[e.index(i, 1, 0)]};
    const Vec via_measure = model::eval_drift(m, grid.points[i], 0.0, u_ik, f);
    // explicit double sum over columns and neurons
    double inner = 0.0;
    for (int j = 0; j < N; ++j)
        for (int k = 0; k < M; ++k)
            inner +=
                p.kernels[0]({grid.points[i][0] - grid.points[j][0]}) * e.u[e.index(j, k, 0)];
    inner /= (N * M);
    const double expected = -u_ik[0] + model::softplus(0.3 + inner);
    CHECK(via_measure[0] == Catch::Approx(expected).margin(1e-14));
}

TEST_CASE("second-moment stability under M doubling") {
    auto p = relax_params(1, 0.5, 1.0);
    model::ModelSpec m = model::build_concrete_model(p);
    auto grid = particles::grid_locations(4, 1);
    auto sup2 = [&](int M) {
        auto field = noise::build_field(grid.points, 0.05, noise::Mollifier::bump(1), 1, M);
        auto init = fields(1.0, 1, 8, 0.7, 999, M);
        particles::SimOptions opts;
        opts.record_times = {0.5};
        auto res =
            particles::simulate_system(m, grid, M, field, init, 0.5, 1.0 / 1024.0, 999, opts);
        double acc = 0.0;
        for (double v : res.sup_norm2) acc += v;
        return acc / res.sup_norm2.size();
    };
    const double m8 = sup2(8);
    const double m16 = sup2(16);
    const double m32 = sup2(32);
    CHECK(m16 < 2.0 * m8 + 0.5);
    CHECK(m32 < 2.0 * m8 + 0.5);  // bounded, no growth with M
}
