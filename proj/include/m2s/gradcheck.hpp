#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "m2s/fdcheck.hpp"

namespace m2s {

struct GradcheckOptions {
    std::uint64_t seed = 1;
    std::string op_filter;      // substring match; empty runs everything
    int num_seeds = 5;
    FdOptions fd;
    bool corrupt = false;       // harness negative control: perturbs one analytic grad
};

struct GradcheckReport {
    std::vector<FdResult> rows;  // aggregated over seeds, one row per op
    bool all_pass = true;
};

std::vector<std::string> gradcheck_case_names();

// Runs 64-bit finite-difference checks for every registered op and the
// composite feature/loss paths.
GradcheckReport run_gradcheck(const GradcheckOptions& opts);

void print_gradcheck_table(const GradcheckReport& report, std::ostream& os);

}  // namespace m2s
