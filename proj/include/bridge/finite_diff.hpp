#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bridge/autodiff.hpp"

namespace bridge {

struct FiniteDiffEntry {
    std::string param;
    size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
    bool passed = false;
    double tol = 0.0;
    FiniteDiffEntry worst;
    std::string to_string() const;
};

// Central-difference check of reverse-mode gradients.
//
// `f` must rebuild the loss graph from the current parameter values on every
// call and be deterministic (dropout off, fixed inputs). For each sampled
// coordinate the analytic gradient (one backward at the base point) is
// compared against (f(x+h) - f(x-h)) / 2h with relative error
// |a - n| / max(1, |n|).
//
// `max_coords_per_param` = 0 checks every coordinate; otherwise up to that
// many coordinates per tensor are drawn from `sample_seed`.
FiniteDiffReport finite_diff_check(const std::function<Value()>& f,
                                   const std::vector<std::pair<std::string, Value>>& params, double h, double tol,
                                   size_t max_coords_per_param = 0, uint64_t sample_seed = 0);

}  // namespace bridge
