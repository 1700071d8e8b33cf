// Command-line driver for the grid-cell mean-field laboratory.
//
// Subcommands map onto the library entry points:
//   noise-check   correlated-noise statistics against the analytic covariance
//   simulate      interacting particle system, empirical-measure snapshots
//   solve-fp      marginal Fokker-Planck solve, density CSV
//   rate-m        coupled particle-vs-MV error rate in M
//   rate-n        coupled particle-vs-MV error rate in N
//   empirical     three-term Wasserstein splitting of the empirical measure
//   oracle-ou     reflected Ornstein-Uhlenbeck oracle comparison
//
// Exit codes: 0 ok, 1 validation error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "gridmf/io.hpp"
#include "gridmf/lab.hpp"
#include "gridmf/meanfield.hpp"
#include "gridmf/noise.hpp"
#include "gridmf/particles.hpp"
#include "gridmf/transport.hpp"

using namespace gridmf;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config;
    std::string out = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "JSON config file");
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--seed", args.seed, "master seed override")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--workers", args.workers, "worker thread count");
}

lab::ExperimentPlan plan_for(const CommonArgs& args, const std::string& fallback_preset) {
    lab::ExperimentPlan plan = args.config.empty() ? lab::preset_plan(fallback_preset)
                                                   : io::load_config(args.config);
    if (args.seed_set) plan.master_seed = args.seed;
    if (args.workers > 0) plan.workers = args.workers;
    plan.validate();
    return plan;
}

int run_noise_check(const CommonArgs& args, double epsilon, int nodes, double dt, int samples) {
    auto grid = particles::grid_locations(nodes, 1);
    const auto moll = noise::Mollifier::bump(1);
    auto field = noise::build_field(grid.points, epsilon, moll, 1, 1);
    const std::uint64_t seed = args.seed_set ? args.seed : 20240601;
    const auto rep = noise::verify_statistics(field, dt, samples, seed);
    json j;
    j["epsilon"] = epsilon;
    j["nodes"] = nodes;
    j["dt"] = dt;
    j["samples"] = rep.samples;
    j["max_cov_error"] = rep.max_cov_error;
    j["max_far_corr"] = rep.max_far_corr;
    j["cov_within_3se"] = rep.cov_within_3se;
    j["qv_ratio_bound_ok"] = rep.qv_ratio_bound_ok;
    j["c_check"] = rep.c_check;
    io::ResultWriter w(args.out);
    w.write_text("noise_check.json", j.dump(2) + "\n");
    w.finalize(json{{"command", "noise-check"}, {"epsilon", epsilon}, {"nodes", nodes}}, seed);
    std::printf("noise-check: max_cov_error=%.4g max_far_corr=%.4g within_3se=%s qv_ok=%s\n",
                rep.max_cov_error, rep.max_far_corr, rep.cov_within_3se ? "yes" : "no",
                rep.qv_ratio_bound_ok ? "yes" : "no");
    return (rep.cov_within_3se && rep.qv_ratio_bound_ok) ? 0 : 2;
}

int run_simulate(const CommonArgs& args) {
    auto plan = plan_for(args, "gridcell-concrete");
    const auto [N, M] = plan.cells.front();
    auto model = lab::make_model(plan.d, plan.B, plan.model);
    auto grid = particles::grid_locations(N, plan.d);
    auto field = noise::build_field(grid.points, plan.eps.eps_for(N, plan.d),
                                    noise::Mollifier::bump(plan.d), plan.B, M);
    std::vector<particles::HolderField> init;
    for (int k = 0; k < M; ++k)
        init.push_back(particles::holder_initial_field(plan.alpha, plan.B, plan.init_modes,
                                                       plan.init_amplitude, plan.master_seed, k,
                                                       plan.d));
    particles::SimOptions opts;
    opts.record_times = plan.record_times();
    auto res = particles::simulate_system(model, grid, M, field, init, plan.T, plan.step(),
                                          plan.master_seed, opts);
    // measure snapshots: one row per atom per record time
    std::string csv = "t";
    for (int a = 0; a < plan.d; ++a) csv += ",x" + std::to_string(a);
    for (int b = 0; b < plan.B; ++b) csv += ",u" + std::to_string(b);
    csv += "\n";
    for (std::size_t r = 0; r < res.record_times.size(); ++r) {
        auto f = res.measure_at(r);
        for (std::size_t aidx = 0; aidx < f.size(); ++aidx) {
            csv += io::format_double(f.t);
            for (int a = 0; a < plan.d; ++a) csv += "," + io::format_double(f.x[aidx][a]);
            for (int b = 0; b < plan.B; ++b) csv += "," + io::format_double(f.u[aidx][b]);
            csv += "\n";
        }
    }
    io::ResultWriter w(args.out);
    w.write_text("measures.csv", csv);
    json summary;
    summary["N"] = N;
    summary["M"] = M;
    summary["min_u_seen"] = res.min_u_seen;
    summary["complementarity_violations"] = res.complementarity_violations;
    w.write_text("summary.json", summary.dump(2) + "\n");
    w.finalize(io::plan_to_json(plan), plan.master_seed);
    std::printf("simulate: N=%d M=%d records=%zu min_u=%.3g\n", N, M, res.record_times.size(),
                res.min_u_seen);
    return 0;
}

int run_solve_fp(const CommonArgs& args) {
    auto plan = plan_for(args, "ou-test");
    auto bundle = lab::build_reference(plan, true);
    io::ResultWriter w(args.out);
    w.write_text("densities.csv", io::density_csv(bundle.reference));
    json summary;
    summary["P"] = bundle.reference.P();
    summary["n_u"] = bundle.reference.ucells.n;
    summary["max_step_mass_drift"] = bundle.reference.max_step_mass_drift;
    summary["min_cell_mass"] = bundle.reference.min_cell_mass;
    summary["cfl_max"] = bundle.reference.cfl_max;
    if (bundle.refine_change >= 0.0) summary["refine_change"] = bundle.refine_change;
    w.write_text("summary.json", summary.dump(2) + "\n");
    w.finalize(io::plan_to_json(plan), plan.master_seed);
    std::printf("solve-fp: P=%d n_u=%d mass_drift=%.3g min_mass=%.3g\n", bundle.reference.P(),
                bundle.reference.ucells.n, bundle.reference.max_step_mass_drift,
                bundle.reference.min_cell_mass);
    return 0;
}

int run_rate(const CommonArgs& args, const std::string& preset) {
    auto plan = plan_for(args, preset);
    auto report = lab::run_coupled_error(plan);
    io::write_results(report, args.out);
    std::printf("%s", lab::rate_table(report).c_str());
    if (!report.valid) {
        std::printf("report flagged invalid (dt sensitivity)\n");
        return 2;
    }
    return 0;
}

int run_empirical(const CommonArgs& args) {
    auto plan = plan_for(args, "empirical-measure");
    auto report = lab::run_empirical_measure(plan);
    io::write_results(report, args.out);
    if (report.slopes.count("w1_vs_M"))
        std::printf("empirical: slope w1_vs_M = %.4f, monotone_in_M = %s\n",
                    report.slopes.at("w1_vs_M").slope, report.monotone_in_M ? "yes" : "no");
    return 0;
}

int run_oracle_ou(const CommonArgs& args) {
    auto plan = plan_for(args, "ou-test");
    const double c = plan.model.ou_target;
    const double sigma = plan.model.sigma;
    const double tau = plan.model.tau;
    const meanfield::UCells cells{plan.fp.u_max, plan.fp.n_u};

    // Fokker-Planck route
    auto model = lab::make_model(plan.d, plan.B, plan.model);
    auto xgrid = particles::grid_locations(1, 1);
    std::vector<double> f0(cells.n, 0.0);
    f0[std::min(cells.n - 1, static_cast<int>(0.5 / cells.du()))] = 1.0;
    meanfield::FpOptions fo;
    fo.record_times = {0.0, plan.T};
    auto evo = meanfield::solve_marginal_fp(model, xgrid, cells, f0, plan.T, plan.fp.dt_pde, fo);
    const auto oracle = meanfield::reflected_ou_stationary(c, sigma, tau, cells);
    const double* fp = evo.node_masses(1, 0, 0);
    double l1 = 0.0;
    for (int i = 0; i < cells.n; ++i) l1 += std::abs(fp[i] - oracle[i]);

    // particle route
    const auto [N, M] = plan.cells.front();
    auto grid = particles::grid_locations(N, 1);
    auto field = noise::build_field(grid.points, plan.eps.eps_for(N, 1),
                                    noise::Mollifier::bump(1), plan.B, M);
    std::vector<particles::HolderField> init;
    for (int k = 0; k < M; ++k)
        init.push_back(particles::holder_initial_field(plan.alpha, plan.B, 0, 0.0,
                                                       plan.master_seed, k, 1));
    particles::SimOptions so;
    so.record_times = {plan.T};
    auto res = particles::simulate_system(model, grid, M, field, init, plan.T, plan.step(),
                                          plan.master_seed, so);
    std::vector<double> samples;
    for (int k = 0; k < M; ++k)
        for (int i = 0; i < N; ++i) samples.push_back(res.final_u[res.index(i, k, 0)]);
    std::vector<double> centers(cells.n);
    for (int i = 0; i < cells.n; ++i) centers[i] = cells.center(i);
    const double w1 = transport::w1d_weighted(samples, std::vector<double>(samples.size(), 1.0),
                                              centers, oracle, 1);
    json j;
    j["fp_l1_vs_oracle"] = l1;
    j["particle_w1_vs_oracle"] = w1;
    j["mass_drift"] = evo.max_step_mass_drift;
    j["min_cell_mass"] = evo.min_cell_mass;
    io::ResultWriter w(args.out);
    w.write_text("oracle_ou.json", j.dump(2) + "\n");
    w.finalize(io::plan_to_json(plan), plan.master_seed);
    std::printf("oracle-ou: fp_l1=%.5g particle_w1=%.5g\n", l1, w1);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"grid-cell mean-field laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    double nc_eps = 0.1;
    int nc_nodes = 32;
    double nc_dt = 0.01;
    int nc_samples = 100000;

    auto* noise_cmd = app.add_subcommand("noise-check", "noise field statistics");
    add_common(noise_cmd, args);
    noise_cmd->add_option("--epsilon", nc_eps, "correlation length");
    noise_cmd->add_option("--nodes", nc_nodes, "grid node count");
    noise_cmd->add_option("--dt", nc_dt, "increment size");
    noise_cmd->add_option("--samples", nc_samples, "increment count");

    auto* sim_cmd = app.add_subcommand("simulate", "interacting particle system");
    add_common(sim_cmd, args);
    auto* fp_cmd = app.add_subcommand("solve-fp", "marginal Fokker-Planck solve");
    add_common(fp_cmd, args);
    auto* ratem_cmd = app.add_subcommand("rate-m", "coupled error rate in M");
    add_common(ratem_cmd, args);
    auto* raten_cmd = app.add_subcommand("rate-n", "coupled error rate in N");
    add_common(raten_cmd, args);
    auto* emp_cmd = app.add_subcommand("empirical", "empirical-measure Wasserstein splitting");
    add_common(emp_cmd, args);
    auto* ou_cmd = app.add_subcommand("oracle-ou", "reflected OU oracle comparison");
    add_common(ou_cmd, args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (noise_cmd->parsed()) return run_noise_check(args, nc_eps, nc_nodes, nc_dt, nc_samples);
        if (sim_cmd->parsed()) return run_simulate(args);
        if (fp_cmd->parsed()) return run_solve_fp(args);
        if (ratem_cmd->parsed()) return run_rate(args, "rate-in-M");
        if (raten_cmd->parsed()) return run_rate(args, "rate-in-N");
        if (emp_cmd->parsed()) return run_empirical(args);
        if (ou_cmd->parsed()) return run_oracle_ou(args);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 2;
    }
    return 0;
}
