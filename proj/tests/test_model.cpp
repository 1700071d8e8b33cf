#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gridmf/model.hpp"
#include "gridmf/rng.hpp"

using namespace gridmf;
using model::GridCellParams;
using model::MeasureView;
using model::ModelSpec;
using model::Vec;

namespace {

GridCellParams basic_params(int B, double sigma, double tau_val,
                            std::function<double(double)> phi) {
    GridCellParams p;
    p.orientations = B;
    p.space_dim = 1;
    p.noise_amplitude = sigma;
    p.tau = [tau_val, B](const Vec&) { return Vec(B, tau_val); };
    p.firing_rate = std::move(phi);
    for (int g = 0; g < B; ++g) p.kernels.push_back([](const Vec&) { return 0.0; });
    p.external_input = [B](const Vec&, double) { return Vec(B, 0.0); };
    return p;
}

}  // namespace

TEST_CASE("mexican hat values") {
    CHECK(model::mexican_hat({0.0}, 1.0, 0.2, 1.0, 0.4) == 0.0);
    CHECK(model::mexican_hat({0.0}, 2.0, 0.2, 1.0, 0.4) == Catch::Approx(1.0));
    // Gaussian decay far out
    CHECK(std::abs(model::mexican_hat({5.0}, 1.0, 0.2, 1.0, 0.4)) < 1e-12);
    CHECK_THROWS_AS(model::mexican_hat({0.0}, 1.0, -0.1, 1.0, 0.4), std::invalid_argument);
}

TEST_CASE("pure relaxation: linear phi, zero input and kernels") {
    auto p = basic_params(2, 0.0, 1.0, [](double z) { return z; });
    ModelSpec m = model::build_concrete_model(p);
    const MeasureView f = MeasureView::point_mass({0.5}, {1.0, 1.0});
    const Vec drift = model::eval_drift(m, {0.5}, 0.0, {1.0, 1.0}, f);
    CHECK(drift[0] == Catch::Approx(-1.0));
    CHECK(drift[1] == Catch::Approx(-1.0));
}

TEST_CASE("diffusion is sigma/tau, independent of u and the measure") {
    auto p = basic_params(3, 0.5, 2.0, [](double z) { return model::softplus(z); });
    ModelSpec m = model::build_concrete_model(p);
    rng::CounterStream st(31, rng::Stream::scratch);
    Vec first;
    for (int trial = 0; trial < 100; ++trial) {
        Vec u(3);
        for (int b = 0; b < 3; ++b) u[b] = 2.0 * st.uniform(trial * 8 + b);
        MeasureView f;
        f.atoms.push_back({{st.uniform(trial * 8 + 3)}, {u[2], u[0], u[1]}, 0.5});
        f.atoms.push_back({{st.uniform(trial * 8 + 4)}, {u[1], u[2], u[0]}, 0.5});
        const Vec d = model::eval_diffusion(m, {0.3}, 0.0, u, f);
        if (trial == 0)
            first = d;
        else
            for (int b = 0; b < 3; ++b) CHECK(d[b] == first[b]);  // bit-identical
        for (int b = 0; b < 3; ++b) CHECK(d[b] == Catch::Approx(0.25));
    }
}

TEST_CASE("kernel vanishing at zero leaves only the external input") {
    auto p = basic_params(1, 0.0, 1.0, [](double z) { return model::softplus(z); });
    p.kernels[0] = [](const Vec& z) { return model::mexican_hat(z, 1.0, 0.2, 1.0, 0.4); };
    p.external_input = [](const Vec&, double) { return Vec(1, 0.7); };
    ModelSpec m = model::build_concrete_model(p);
    // measure concentrated at y = x: K(0) = 0, so the argument is just B
    const MeasureView f = MeasureView::point_mass({0.5}, {2.0});
    const Vec drift = model::eval_drift(m, {0.5}, 0.0, {0.3}, f);
    CHECK(drift[0] == Catch::Approx(-0.3 + model::softplus(0.7)).epsilon(1e-14));
}

TEST_CASE("rectifier clamps negative input") {
    auto p = basic_params(1, 0.0, 2.0, [](double z) { return std::max(z, 0.0); });
    p.external_input = [](const Vec&, double) { return Vec(1, -1.0); };
    ModelSpec m = model::build_concrete_model(p);
    const MeasureView f = MeasureView::point_mass({0.5}, {0.0});
    const Vec drift = model::eval_drift(m, {0.5}, 0.0, {0.3}, f);
    CHECK(drift[0] == Catch::Approx(-0.3 / 2.0));
}

TEST_CASE("point mass with zero b1 reduces to b0 plus phi(shift)") {
    ModelSpec m;
    m.orientations = 1;
    m.space_dim = 1;
    m.b0 = [](const Vec&, double, const Vec& u) { return Vec{-0.5 * u[0]}; };
    m.sigma0 = [](const Vec&, double, const Vec&) { return Vec{0.1}; };
    m.phi_b = {[](double z) { return std::tanh(z); }};
    const MeasureView f = MeasureView::point_mass({0.2}, {1.0});
    const Vec d = model::eval_drift(m, {0.2}, 0.0, {2.0}, f);
    CHECK(d[0] == Catch::Approx(-1.0 + std::tanh(0.0)));
}

TEST_CASE("two-atom interaction equals the hand-summed quadrature") {
    auto p = basic_params(1, 0.0, 1.0, [](double z) { return model::softplus(z); });
    p.kernels[0] = [](const Vec& z) { return model::mexican_hat(z, 1.3, 0.2, 0.9, 0.5); };
    p.external_input = [](const Vec&, double) { return Vec(1, 0.25); };
    ModelSpec m = model::build_concrete_model(p);
    MeasureView f;
    f.atoms.push_back({{0.2}, {0.8}, 0.5});
    f.atoms.push_back({{0.7}, {1.4}, 0.5});
    const Vec x = {0.4};
    const Vec u = {0.6};
    // direct two-term sum, written out by hand
    const double k1 = model::mexican_hat({0.4 - 0.2}, 1.3, 0.2, 0.9, 0.5);
    const double k2 = model::mexican_hat({0.4 - 0.7}, 1.3, 0.2, 0.9, 0.5);
    const double inner = 0.5 * k1 * 0.8 + 0.5 * k2 * 1.4;
    const double expected = -0.6 + model::softplus(0.25 + inner);
    const Vec drift = model::eval_drift(m, x, 0.0, u, f);
    CHECK(drift[0] == Catch::Approx(expected).margin(1e-14));
}

TEST_CASE("general sigma1 as the v-mean against a three-atom hand sum") {
    ModelSpec m;
    m.orientations = 1;
    m.space_dim = 1;
    m.b0 = [](const Vec&, double, const Vec& u) { return Vec{-u[0]}; };
    m.sigma0 = [](const Vec&, double, const Vec&) { return Vec{0.2}; };
    m.sigma1 = [](const Vec&, const Vec&, double, const Vec&, const Vec& v) { return Vec{v[0]}; };
    m.phi_sigma = {[](double z) { return 0.5 * z; }};
    MeasureView f;
    f.atoms.push_back({{0.1}, {0.3}, 0.25});
    f.atoms.push_back({{0.5}, {0.9}, 0.25});
    f.atoms.push_back({{0.9}, {1.5}, 0.5});
    const double mean_v = 0.25 * 0.3 + 0.25 * 0.9 + 0.5 * 1.5;
    const Vec d = model::eval_diffusion(m, {0.5}, 0.0, {1.0}, f);
    CHECK(d[0] == Catch::Approx(0.2 + 0.5 * mean_v).margin(1e-14));
}

TEST_CASE("measure view validation") {
    MeasureView f;
    f.atoms.push_back({{0.5}, {1.0}, 0.6});
    f.atoms.push_back({{0.6}, {2.0}, 0.4});
    CHECK_NOTHROW(f.validate());
    CHECK(f.integrate([](const Vec&, const Vec&) { return 1.0; }) ==
          Catch::Approx(1.0).margin(1e-12));
    f.atoms[0].w = 0.7;
    CHECK_THROWS_AS(f.validate(), std::invalid_argument);
    f.atoms[0].w = -0.1;
    CHECK_THROWS_AS(f.validate(), std::invalid_argument);
}

TEST_CASE("regularity estimates: well-behaved construction passes") {
    auto p = basic_params(1, 0.3, 1.0, [](double z) { return model::softplus(z); });
    p.kernels[0] = [](const Vec& z) { return model::mexican_hat(z, 1.0, 0.2, 1.0, 0.4); };
    ModelSpec m = model::build_concrete_model(p);
    m.lipschitz_L = 2.0;  // generous declared constants for the scan
    m.growth_C = 3.0;
    m.alpha = 1.0;
    auto rep = model::estimate_regularity_constants(m, 2000, 11);
    CHECK(rep.alpha_consistency);
    CHECK(rep.L_hat > 0.0);
    CHECK(rep.L_hat <= 2.0 * 1.05);
}

TEST_CASE("regularity estimates: quadratic growth is flagged") {
    ModelSpec m;
    m.orientations = 1;
    m.space_dim = 1;
    m.b0 = [](const Vec&, double, const Vec& u) { return Vec{u[0] * u[0]}; };
    m.sigma0 = [](const Vec&, double, const Vec&) { return Vec{0.1}; };
    m.lipschitz_L = 100.0;  // growth is the failing hypothesis here
    m.growth_C = 1.0;
    m.alpha = 1.0;
    auto rep = model::estimate_regularity_constants(m, 2000, 12);
    CHECK_FALSE(rep.alpha_consistency);
    CHECK(rep.growth_violations > 0);
    CHECK(rep.C_hat > 1.05);
}

TEST_CASE("regularity estimates: sqrt x-dependence breaks declared alpha = 1") {
    ModelSpec m;
    m.orientations = 1;
    m.space_dim = 1;
    m.b0 = [](const Vec& x, double, const Vec&) { return Vec{std::sqrt(std::abs(x[0]))}; };
    m.sigma0 = [](const Vec&, double, const Vec&) { return Vec{0.1}; };
    m.lipschitz_L = 2.0;
    m.growth_C = 3.0;
    m.alpha = 1.0;  // declared full Lipschitz in x; actual regularity is 1/2
    auto rep = model::estimate_regularity_constants(m, 4000, 13);
    CHECK_FALSE(rep.alpha_consistency);
    CHECK(rep.holder_violations > 0);
}

TEST_CASE("drift is Lipschitz in u with a stable constant") {
    auto p = basic_params(2, 0.2, 1.0, [](double z) { return model::softplus(z); });
    p.kernels[0] = p.kernels[1] = [](const Vec& z) {
        return model::mexican_hat(z, 1.0, 0.2, 1.0, 0.4);
    };
    ModelSpec m = model::build_concrete_model(p);
    MeasureView f;
    f.atoms.push_back({{0.3}, {0.5, 0.7}, 0.5});
    f.atoms.push_back({{0.8}, {1.0, 0.2}, 0.5});
    rng::CounterStream st(5, rng::Stream::scratch);
    auto max_quotient = [&](int samples) {
        double q = 0.0;
        for (int i = 0; i < samples; ++i) {
            Vec u1 = {3.0 * st.uniform(4 * i), 3.0 * st.uniform(4 * i + 1)};
            Vec u2 = {3.0 * st.uniform(4 * i + 2), 3.0 * st.uniform(4 * i + 3)};
            const Vec d1 = model::eval_drift(m, {0.5}, 0.0, u1, f);
            const Vec d2 = model::eval_drift(m, {0.5}, 0.0, u2, f);
            double nd = 0.0, nu = 0.0;
            for (int b = 0; b < 2; ++b) {
                nd += (d1[b] - d2[b]) * (d1[b] - d2[b]);
                nu += (u1[b] - u2[b]) * (u1[b] - u2[b]);
            }
            if (nu > 1e-12) q = std::max(q, std::sqrt(nd / nu));
        }
        return q;
    };
    const double q1 = max_quotient(400);
    const double q2 = max_quotient(800);
    CHECK(q1 > 0.0);
    CHECK(q2 <= 1.2 * q1 + 0.1);  // stable under sample doubling
    CHECK(q2 < 2.0);              // relaxation dominates: quotient close to 1
}
