// Runs a tiny interacting network next to its mean-field reference and prints
// the coupled error shrinking as the column count grows.

#include <cstdio>

#include "gridmf/lab.hpp"

int main() {
    using namespace gridmf;
    lab::ExperimentPlan plan = lab::preset_plan("rate-in-M");
    plan.cells = {{4, 4}, {4, 8}, {4, 16}, {4, 32}};
    plan.T = 0.25;
    plan.dt = 0.25 / 256.0;
    plan.replicas = 8;
    plan.record_count = 4;
    plan.init_modes = 8;
    plan.dt_check = false;
    plan.fp_refine_check = false;
    plan.law_samples = 40000;
    plan.fp.n_u = 200;

    const auto report = lab::run_coupled_error(plan);
    std::printf("%s", lab::rate_table(report).c_str());
    return 0;
}
