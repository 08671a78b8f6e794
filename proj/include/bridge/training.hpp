#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bridge/evaluation.hpp"
#include "bridge/optimizer.hpp"

namespace bridge {

struct LossSetup {
    LossWeightMode mode = LossWeightMode::kFixed;
    std::vector<std::string> enabled = kAllLossTerms;
    std::map<std::string, double> fixed_weights = {
        {"itc_uni", 1.0}, {"itc_cross", 1.0}, {"itm", 0.5}, {"cyc", 0.25}};
    bool is_enabled(const std::string& term) const;
};

struct TrainConfig {
    uint64_t seed = 7;
    int batch_size = 32;
    double clip_norm = 1.0;
    AdamConfig adam;
    LossSetup loss;
    StageSpec stage_a{'A', 5, 1e-3, 0};
    StageSpec stage_b{'B', 10, 3e-4, 2};
    StageSpec stage_c{'C', 0, 3e-4, 2};
    double tau_min = 0.01;  // temperature clamp after each update
    double tau_max = 1.0;
};

// Full training objective for one batch: unimodal + cross-fused InfoNCE,
// cycle consistency over the recorded attention, and ITM on mined semi-hard
// negatives, combined per the LossSetup.
struct BatchLossResult {
    Value total;
    LossReport report;
};
BatchLossResult batch_loss(const Model& model, const Batch& batch, const LossSetup& setup,
                           const MinedNegatives* fixed_mining = nullptr);

struct PerEpochEval {
    double tr1 = 0, tr5 = 0, ir1 = 0, ir5 = 0;
    double gap = 0;
};

struct EpochRecord {
    char stage = 'A';
    int epoch_in_stage = 0;
    int global_epoch = 0;
    std::map<std::string, double> loss_means;  // per enabled component, mean over steps
    double total_mean = 0;
    PerEpochEval val;
};

using LogFn = std::function<void(const std::string&)>;
// Invoked at stage boundaries with tags "stageA" / "stageB" / "stageC" / "final".
using CheckpointFn = std::function<void(const std::string& tag, char stage, int64_t step)>;

struct TrainResult {
    std::vector<EpochRecord> history;
    int64_t steps = 0;
    bool aborted = false;
    std::string abort_reason;
    char final_stage = 'I';
    EvalReport final_val;  // full report on the validation split
};

// Runs the staged schedule (A: bridge/heads only, B: plus top-K encoder
// blocks; C only when configured with epochs > 0). Aborts on NumericalError
// with the last stage-boundary checkpoint retained by the caller.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg, const LogFn& log = nullptr,
                  const CheckpointFn& checkpoint = nullptr);

}  // namespace bridge
