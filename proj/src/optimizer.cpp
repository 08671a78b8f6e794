#include "bridge/optimizer.hpp"

#include <cmath>
#include <sstream>

namespace bridge {

void adam_step_tensor(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t, double lr,
                      const AdamConfig& cfg, bool apply_decay) {
    if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
        throw ShapeError("adam_step: parameter/gradient/moment shape mismatch");
    if (lr <= 0.0) throw ContractError("adam_step: lr must be positive");
    if (!grad.all_finite()) throw NumericalError("adam_step: non-finite gradient");
    if (t < 1) throw ContractError("adam_step: step index must be >= 1");

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < param.size(); ++i) {
        m.at(i) = cfg.beta1 * m.at(i) + (1.0 - cfg.beta1) * grad.at(i);
        v.at(i) = cfg.beta2 * v.at(i) + (1.0 - cfg.beta2) * grad.at(i) * grad.at(i);
        const double m_hat = m.at(i) / bc1;
        const double v_hat = v.at(i) / bc2;
        double update = m_hat / (std::sqrt(v_hat) + cfg.eps);
        if (apply_decay && cfg.weight_decay > 0.0) update += cfg.weight_decay * param.at(i);
        param.at(i) -= lr * update;
    }
}

AdamOptimizer::AdamOptimizer(ParamStore& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& e : params.entries()) {
        m_.push_back(Tensor(e.value.shape()));
        v_.push_back(Tensor(e.value.shape()));
    }
}

void AdamOptimizer::zero_grad() {
    for (auto& e : params_->entries()) e.value.zero_grad();
}

double AdamOptimizer::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& e : params_->entries()) {
        if (!e.value.requires_grad() || !e.value.has_grad()) continue;
        const Tensor& g = e.value.node()->grad;
        if (!g.all_finite()) throw NumericalError("clip_grad_norm: non-finite gradient in '" + e.name + "'");
        for (size_t i = 0; i < g.size(); ++i) sq += g.at(i) * g.at(i);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scaleby = max_norm / norm;
        for (auto& e : params_->entries()) {
            if (!e.value.requires_grad() || !e.value.has_grad()) continue;
            Tensor& g = e.value.node()->grad;
            for (size_t i = 0; i < g.size(); ++i) g.at(i) *= scaleby;
        }
    }
    return norm;
}

void AdamOptimizer::step(double lr) {
    // validate all gradients first so a NumericalError aborts the whole step
    for (const auto& e : params_->entries()) {
        if (!e.value.requires_grad() || !e.value.has_grad()) continue;
        if (!e.value.node()->grad.all_finite())
            throw NumericalError("adam: non-finite gradient in '" + e.name + "'; step aborted");
    }
    ++t_;
    auto& entries = params_->entries();
    for (size_t k = 0; k < entries.size(); ++k) {
        auto& e = entries[k];
        if (!e.value.requires_grad()) continue;
        Tensor zero;
        const Tensor* g = e.value.has_grad() ? &e.value.node()->grad : nullptr;
        if (!g) {
            zero = Tensor(e.value.shape());
            g = &zero;
        }
        adam_step_tensor(e.value.mutable_data(), *g, m_[k], v_[k], t_, lr, cfg_, e.weight_decay);
        Tensor& p = e.value.mutable_data();
        for (size_t i = 0; i < p.size(); ++i) p.at(i) = snap_to_f32(p.at(i));
    }
}

std::string TrainableReport::to_string() const {
    std::ostringstream os;
    os << "trainable=" << trainable_params << " frozen=" << frozen_params;
    for (const auto& [g, n] : group_counts) os << " " << g << "=" << n;
    return os.str();
}

TrainableReport set_trainable_groups(Model& model, const std::set<std::string>& groups) {
    for (const auto& g : groups)
        if (!model.params().has_group(g)) throw ConfigError("set_trainable: unknown parameter group '" + g + "'");
    TrainableReport rep;
    std::map<std::string, size_t> counts;
    for (auto& e : model.params().entries()) {
        const bool on = groups.count(e.group) > 0;
        e.value.set_requires_grad(on);
        if (on) {
            rep.trainable_params += e.value.data().size();
            counts[e.group] += e.value.data().size();
        } else {
            rep.frozen_params += e.value.data().size();
        }
    }
    rep.group_counts.assign(counts.begin(), counts.end());
    return rep;
}

std::set<std::string> stage_groups(const Model& model, const StageSpec& stage) {
    if (stage.id != 'A' && stage.id != 'B' && stage.id != 'C')
        throw ConfigError(std::string("unknown stage id '") + stage.id + "'");
    std::set<std::string> groups = {"pos_embed", "heads", "itm_head", "loss_scalars"};
    if (model.params().has_group("bridge")) groups.insert("bridge");
    if (stage.id == 'B' || stage.id == 'C') {
        const int L = model.config().text.num_layers;
        if (stage.top_k < 0 || stage.top_k > L)
            throw ConfigError("stage " + std::string(1, stage.id) + ": top_k must be in [0," + std::to_string(L) +
                              "]");
        for (int l = L - stage.top_k + 1; l <= L; ++l) {
            groups.insert("text_layer_" + std::to_string(l));
            groups.insert("vision_layer_" + std::to_string(l));
        }
    }
    return groups;
}

TrainableReport set_trainable(Model& model, const StageSpec& stage) {
    return set_trainable_groups(model, stage_groups(model, stage));
}

}  // namespace bridge
