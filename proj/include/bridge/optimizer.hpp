#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "bridge/model.hpp"

namespace bridge {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled; skipped for gate/norm/loss scalars
};

// One adaptive-moment update with bias correction. Throws NumericalError on
// a non-finite gradient before touching the parameter.
void adam_step_tensor(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t, double lr,
                      const AdamConfig& cfg, bool apply_decay);

class AdamOptimizer {
public:
    AdamOptimizer(ParamStore& params, AdamConfig cfg);

    // Updates every trainable parameter from its accumulated gradient, then
    // snaps master weights to exact f32 values. Missing gradients count as
    // zero. The whole step aborts (no partial update) on non-finite input.
    void step(double lr);
    void zero_grad();
    // Global-norm clipping over trainable gradients; returns the pre-clip norm.
    double clip_grad_norm(double max_norm);
    int64_t step_count() const { return t_; }

private:
    ParamStore* params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;  // aligned with params_->entries()
    int64_t t_ = 0;
};

struct StageSpec {
    char id = 'A';  // 'A' | 'B' | 'C'
    int epochs = 0;
    double lr = 1e-3;
    int top_k = 0;  // stage B/C: top encoder blocks to unfreeze
};

struct TrainableReport {
    std::vector<std::pair<std::string, size_t>> group_counts;  // trainable groups -> parameter count
    size_t trainable_params = 0;
    size_t frozen_params = 0;
    std::string to_string() const;
};

// Marks exactly the given groups trainable. Unknown group -> ConfigError.
TrainableReport set_trainable_groups(Model& model, const std::set<std::string>& groups);

// Resolves the stage's trainable group set per the staged schedule:
// A trains the bridge, gates, positional embeddings, pooled/unimodal heads,
// the ITM head and the loss scalars; B additionally unfreezes the top-K
// encoder blocks on both sides; C keeps the stage-B set.
std::set<std::string> stage_groups(const Model& model, const StageSpec& stage);
TrainableReport set_trainable(Model& model, const StageSpec& stage);

}  // namespace bridge
