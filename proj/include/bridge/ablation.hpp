#pragma once

#include <string>
#include <vector>

#include "bridge/config.hpp"

namespace bridge {

// One trained (variant, seed) cell of an ablation sweep, scored on the test
// split via the bi-encoder retrieval path.
struct CellResult {
    std::string variant;
    uint64_t seed = 0;
    double tr1 = 0, tr5 = 0, ir1 = 0, ir5 = 0;
    double gap = 0;
    bool from_cache = false;
};

struct AblationTable {
    std::string axis;
    std::vector<CellResult> rows;     // variant-major, seed-minor
    std::vector<CellResult> medians;  // one per variant (median over seeds per metric)
};

// Axis -> list of (variant name, fully-configured RunConfig). Axes: fusion,
// placement, losses, q.
std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& base, const std::string& axis);

// Content-keyed cache directory for one cell (training-relevant config +
// seed), shared between sweeps whose variants coincide.
std::string ablation_cell_dir(const std::string& out_dir, const RunConfig& cfg, uint64_t seed);

// Trains and evaluates one cell, caching the result under cell_dir so an
// interrupted sweep skips completed cells on rerun.
CellResult run_ablation_cell(const RunConfig& cfg, const std::string& variant, uint64_t seed,
                             const std::string& cell_dir, const LogFn& log = nullptr);

// Full sweep over the axis with seeds {base.seed, +1, +2}.
AblationTable run_ablation(const RunConfig& base, const std::string& axis, const std::string& out_dir, int jobs = 1,
                           const LogFn& log = nullptr);

void write_ablation_csv(const AblationTable& table, const std::string& path);

const CellResult& median_row(const AblationTable& table, const std::string& variant);

}  // namespace bridge
