#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vatt {

struct GradcheckEntry {
    std::string op;
    int points = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    std::uint64_t seed = 0;
    double tol = 0.0;
    int points_per_op = 0;
    std::vector<GradcheckEntry> entries;
    bool all_pass = false;
};

// Finite-difference check of every tensor op plus end-to-end va_forward
// (gradients w.r.t. the target, every bag member, and all attention
// weights). Each op is probed at `points` random input draws derived from
// `seed`, so the resulting report is a pure function of (seed, tol, points).
GradcheckReport run_gradcheck_suite(std::uint64_t seed, double tol, int points = 25);

std::string gradcheck_report_text(const GradcheckReport& report);

}  // namespace vatt
