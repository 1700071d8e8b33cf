#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gridmf/lab.hpp"
#include "gridmf/rng.hpp"

using namespace gridmf;
using lab::ExperimentPlan;
using lab::SlopePoint;

namespace {

ExperimentPlan small_interacting_plan() {
    ExperimentPlan p = lab::preset_plan("rate-in-M");
    p.cells = {{4, 4}, {4, 8}, {4, 16}, {4, 32}};
    p.T = 0.25;
    p.dt = 0.25 / 256.0;
    p.replicas = 8;
    p.record_count = 4;
    p.init_modes = 8;
    p.fp_refine_check = false;
    p.dt_check = false;
    p.law_samples = 40000;
    p.fp.n_u = 200;
    p.master_seed = 777;
    return p;
}

}  // namespace

TEST_CASE("slope fit: exact power law and constants") {
    std::vector<SlopePoint> pts;
    for (double s : {8.0, 16.0, 32.0, 64.0, 128.0})
        pts.push_back({s, std::pow(s, -0.5), 0.01 * std::pow(s, -0.5)});
    const auto fit = lab::fit_loglog_slope(pts);
    CHECK(fit.slope == Catch::Approx(-0.5).margin(1e-12));
    CHECK(fit.n_points == 5);

    std::vector<SlopePoint> flat;
    for (double s : {1.0, 2.0, 4.0, 8.0}) flat.push_back({s, 3.7, 0.0});
    CHECK(lab::fit_loglog_slope(flat).slope == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("slope fit: synthetic noisy quarter rate lands in the window") {
    rng::CounterStream st(1, rng::Stream::scratch);
    std::vector<SlopePoint> pts;
    int i = 0;
    for (double s : {16.0, 32.0, 64.0, 128.0, 256.0, 512.0}) {
        const double noise = 1.0 + 0.01 * (2.0 * st.uniform(i++) - 1.0);
        pts.push_back({s, 3.0 * std::pow(s, -0.25) * noise, 0.01});
    }
    const auto fit = lab::fit_loglog_slope(pts);
    CHECK(fit.slope > -0.27);
    CHECK(fit.slope < -0.23);
}

TEST_CASE("slope fit input validation") {
    std::vector<SlopePoint> three = {{1, 1, 0}, {2, 1, 0}, {4, 1, 0}};
    CHECK_THROWS_AS(lab::fit_loglog_slope(three), std::invalid_argument);
    std::vector<SlopePoint> bad = {{1, 1, 0}, {2, 0.0, 0}, {4, 1, 0}, {8, 1, 0}};
    CHECK_THROWS_AS(lab::fit_loglog_slope(bad), std::invalid_argument);
}

TEST_CASE("rate table rendering and bit-exact json round trip") {
    lab::ConvergenceReport empty;
    empty.plan = lab::preset_plan("coupling-null");
    const std::string t0 = lab::rate_table(empty);
    CHECK(t0.find("N") != std::string::npos);
    CHECK(std::count(t0.begin(), t0.end(), '\n') == 1);  // header only

    lab::ConvergenceReport one = empty;
    lab::RatePoint p;
    p.N = 64;
    p.M = 32;
    p.e = 0.012345678901234567;
    p.stderr_ = 1.9876543210987654e-4;
    one.points.push_back(p);
    const std::string t1 = lab::rate_table(one);
    CHECK(std::count(t1.begin(), t1.end(), '\n') == 2);

    const nlohmann::json j = lab::report_summary(one);
    const nlohmann::json j2 = nlohmann::json::parse(j.dump());
    CHECK(j2["points"][0]["e"].get<double>() == p.e);            // bit exact
    CHECK(j2["points"][0]["stderr"].get<double>() == p.stderr_);
}

TEST_CASE("plan presets validate; bad plans are rejected") {
    for (const char* name :
         {"rate-in-M", "rate-in-N", "empirical-measure", "ou-test", "coupling-null"}) {
        CHECK_NOTHROW(lab::preset_plan(name).validate());
    }
    CHECK_THROWS_AS(lab::preset_plan("no-such-preset"), std::invalid_argument);

    ExperimentPlan p = lab::preset_plan("rate-in-M");
    p.replicas = 4;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = lab::preset_plan("rate-in-M");
    p.cells = {{10, 8}};
    p.d = 2;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = lab::preset_plan("rate-in-M");
    p.alpha = 1.5;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("zero kernel gives exactly zero coupled error") {
    ExperimentPlan p = lab::preset_plan("coupling-null");
    p.replicas = 8;
    p.T = 0.25;
    p.dt = 0.25 / 128.0;
    p.cells = {{4, 4}, {4, 8}, {16, 4}};
    auto report = lab::run_coupled_error(p);
    REQUIRE(report.points.size() == 3);
    for (const auto& pt : report.points) {
        CHECK(pt.e == 0.0);
        CHECK(pt.stderr_ == 0.0);
    }
    CHECK(report.min_u_seen >= 0.0);
    CHECK(report.complementarity_violations == 0);
}

TEST_CASE("interacting coupled error is positive and stable under dt halving") {
    ExperimentPlan p = small_interacting_plan();
    p.cells = {{4, 4}, {4, 8}, {4, 16}, {4, 32}};
    p.dt_check = true;
    auto report = lab::run_coupled_error(p);
    REQUIRE(report.points.size() == 4);
    for (const auto& pt : report.points) {
        CHECK(pt.e > 0.0);
        CHECK(pt.stderr_ > 0.0);
        CHECK(pt.stderr_ < pt.e);
        CHECK(pt.dt_rel_change >= 0.0);
    }
    CHECK(report.dt_check_ran);
    CHECK(report.dt_check_ok);  // the coupled difference subtracts the bias
    CHECK(report.valid);
    // error decreases with M overall
    CHECK(report.points.back().e < report.points.front().e);
    REQUIRE(report.slopes.count("e_vs_M") == 1);
    CHECK(report.slopes.at("e_vs_M").slope < 0.0);
}

TEST_CASE("empirical measure splitting: triangle inequality and structure") {
    ExperimentPlan p = small_interacting_plan();
    auto report = lab::run_empirical_measure(p);
    REQUIRE(!report.wrows.empty());
    for (const auto& row : report.wrows) {
        CHECK(row.term_a >= 0.0);
        CHECK(row.term_b >= 0.0);
        CHECK(row.term_c >= 0.0);
        CHECK(row.total == Catch::Approx(row.term_a + row.term_b + row.term_c));
        // exact distances on the compressed measures obey the triangle bound
        CHECK(row.triangle_gap <= 1e-9);
        CHECK(row.lp_d1 >= 0.0);
        CHECK(row.lp_total >= 0.0);
        // the diagonal coupling bound dominates the exact subsampled distance
        if (row.term_a_exact >= 0.0) CHECK(row.term_a_exact <= row.term_a + 3.0 * row.term_a_se + 1e-9);
    }
    // term (c) is deterministic and identical across rows with the same (N,t)
    for (const auto& a : report.wrows)
        for (const auto& b : report.wrows)
            if (a.N == b.N && a.t == b.t) CHECK(a.term_c == b.term_c);
    REQUIRE(report.slopes.count("w1_vs_M") == 1);
}
