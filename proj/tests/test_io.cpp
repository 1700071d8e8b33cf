#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gridmf/io.hpp"

using namespace gridmf;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string write_tmp(const std::string& name, const std::string& content) {
    const std::string path = std::string("/tmp/gridmf_io_") + name;
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("minimal config: preset only gives documented defaults") {
    const auto path = write_tmp("minimal.json", R"({"preset": "rate-in-M"})");
    const auto plan = io::load_config(path);
    CHECK(plan.d == 1);
    CHECK(plan.B == 1);
    CHECK(plan.cells.size() == 5);
    CHECK(plan.replicas == 64);
    CHECK(plan.alpha == 1.0);
}

TEST_CASE("config validation errors name the field") {
    const auto p1 = write_tmp("badN.json", R"({"preset": "rate-in-M", "d": 2, "N": 10, "M": 8})");
    CHECK_THROWS_WITH(io::load_config(p1),
                      Catch::Matchers::ContainsSubstring("perfect d-th power"));
    const auto p2 = write_tmp("badalpha.json", R"({"preset": "rate-in-M", "alpha": 1.5})");
    CHECK_THROWS_WITH(io::load_config(p2), Catch::Matchers::ContainsSubstring("alpha"));
    const auto p3 = write_tmp("unknown.json", R"({"preset": "rate-in-M", "frobnicate": 1})");
    CHECK_THROWS_WITH(io::load_config(p3), Catch::Matchers::ContainsSubstring("frobnicate"));
    const auto p4 = write_tmp("parse.json", "{not json");
    CHECK_THROWS_WITH(io::load_config(p4), Catch::Matchers::ContainsSubstring("parse error"));
    const auto p5 =
        write_tmp("badeps.json", R"({"preset": "rate-in-M", "epsilon": "sometimes"})");
    CHECK_THROWS_WITH(io::load_config(p5), Catch::Matchers::ContainsSubstring("epsilon"));
    const auto p6 = write_tmp("badmodel.json",
                              R"({"preset": "rate-in-M", "model": {"kernel_scales": 1}})");
    CHECK_THROWS_WITH(io::load_config(p6), Catch::Matchers::ContainsSubstring("kernel_scales"));
}

TEST_CASE("N and M lists build the cell table") {
    const auto path = write_tmp(
        "cells.json", R"({"preset": "rate-in-M", "N": 16, "M": [4, 8, 16, 32], "replicas": 8})");
    const auto plan = io::load_config(path);
    REQUIRE(plan.cells.size() == 4);
    for (const auto& [n, m] : plan.cells) CHECK(n == 16);
    CHECK(plan.cells[2].second == 16);
}

TEST_CASE("config round trip: serialize then reload yields an equal plan") {
    auto plan = lab::preset_plan("rate-in-N");
    plan.master_seed = 987654321;
    plan.workers = 3;
    const json j = io::plan_to_json(plan);
    const auto again = io::plan_from_json(j);
    CHECK(io::plan_to_json(again) == j);
}

TEST_CASE("csv round trip is bit exact") {
    lab::ConvergenceReport r;
    r.plan = lab::preset_plan("coupling-null");
    lab::RatePoint p;
    p.N = 64;
    p.M = 128;
    p.e = 0.1234567890123456789;  // rounds to binary64
    p.stderr_ = 3.3306690738754696e-16;
    p.e_dt_half = 1.0 / 3.0;
    p.dt_rel_change = 0.017;
    r.points.push_back(p);
    const std::string csv = io::errors_csv(r);
    const auto rows = io::parse_csv(csv);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0][2] == p.e);
    CHECK(rows[0][3] == p.stderr_);
    CHECK(rows[0][4] == p.e_dt_half);
    CHECK(rows[0][5] == p.dt_rel_change);
}

TEST_CASE("manifest checksums match the written files") {
    const std::string dir = "/tmp/gridmf_io_results";
    std::filesystem::remove_all(dir);
    io::ResultWriter w(dir);
    w.write_text("a.csv", "x,y\n1,2\n");
    w.write_text("b.txt", "hello");
    w.finalize(json{{"preset", "test"}}, 42);
    const json manifest = json::parse(slurp(dir + "/manifest.json"));
    REQUIRE(manifest["files"].size() == 2);
    for (const auto& f : manifest["files"]) {
        const std::string content = slurp(dir + "/" + f["name"].get<std::string>());
        CHECK(io::hex64(io::fnv1a64(content)) == f["fnv64"].get<std::string>());
        CHECK(content.size() == f["bytes"].get<std::size_t>());
    }
    CHECK(manifest["master_seed"] == 42);
}

TEST_CASE("plot: single point, determinism, and validation") {
    io::PlotSeries s;
    s.points = {{16.0, 0.25}};
    io::PlotStyle st;
    st.title = "single";
    const std::string p1 = "/tmp/gridmf_plot1.svg";
    const std::string p2 = "/tmp/gridmf_plot2.svg";
    io::render_plot(s, st, p1);
    io::render_plot(s, st, p2);
    const std::string svg = slurp(p1);
    CHECK(svg == slurp(p2));  // byte identical
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(std::count(svg.begin(), svg.end(), '\n') > 3);
    std::size_t markers = 0, pos = 0;
    while ((pos = svg.find("class=\"pt\"", pos)) != std::string::npos) {
        ++markers;
        pos += 1;
    }
    CHECK(markers == 1);

    io::PlotSeries bad;
    bad.points = {{16.0, -0.25}};
    CHECK_THROWS_AS(io::render_plot(bad, st, p1), std::invalid_argument);
    io::PlotSeries empty;
    CHECK_THROWS_AS(io::render_plot(empty, st, p1), std::invalid_argument);
}

TEST_CASE("plot: guide line has the correct rise over run") {
    io::PlotSeries s;
    s.points = {{8.0, 0.5}, {16.0, 0.35}, {32.0, 0.25}, {64.0, 0.18}};
    io::PlotStyle st;
    st.guide_slopes = {-0.5};
    const std::string path = "/tmp/gridmf_plot_guide.svg";
    io::render_plot(s, st, path);
    const std::string svg = slurp(path);
    // scale metadata
    double sx = 0, sy = 0;
    {
        const auto pos = svg.find("loglog sx=");
        REQUIRE(pos != std::string::npos);
        std::sscanf(svg.c_str() + pos, "loglog sx=%lf sy=%lf", &sx, &sy);
    }
    const auto gpos = svg.find("class=\"guide\"");
    REQUIRE(gpos != std::string::npos);
    double gslope = 0, x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    std::sscanf(svg.c_str() + svg.find("data-slope=", gpos), "data-slope=\"%lf\" d=\"M %lf %lf L %lf %lf\"",
                &gslope, &x0, &y0, &x1, &y1);
    CHECK(gslope == Catch::Approx(-0.5));
    // screen rise/run = -slope * sy / sx (SVG y grows downward)
    const double rise_run = (y1 - y0) / (x1 - x0);
    CHECK(rise_run == Catch::Approx(-gslope * sy / sx).margin(2e-3));
}

TEST_CASE("write_results produces the full inventory plus manifest") {
    lab::ConvergenceReport r;
    r.plan = lab::preset_plan("coupling-null");
    const std::string dir = "/tmp/gridmf_io_full";
    std::filesystem::remove_all(dir);
    auto inv = io::write_results(r, dir);
    CHECK(std::filesystem::exists(dir + "/errors.csv"));
    CHECK(std::filesystem::exists(dir + "/summary.json"));
    CHECK(std::filesystem::exists(dir + "/manifest.json"));
    CHECK(!inv.empty());
    // empty report: header-only csv
    const auto rows = io::parse_csv(slurp(dir + "/errors.csv"));
    CHECK(rows.empty());
}
