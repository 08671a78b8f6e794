#include "bridge/training.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace bridge {

bool LossSetup::is_enabled(const std::string& term) const {
    for (const auto& t : enabled)
        if (t == term) return true;
    return false;
}

BatchLossResult batch_loss(const Model& model, const Batch& batch, const LossSetup& setup,
                           const MinedNegatives* fixed_mining) {
    if (setup.enabled.empty()) throw ConfigError("batch_loss: no loss components enabled");
    BatchEncodings enc = encode_batch(model, batch);

    std::vector<std::pair<std::string, Value>> components;
    if (setup.is_enabled("itc_uni"))
        components.push_back({"itc_uni", itc_loss(enc.p_t_uni, enc.p_v_uni, model.tau_raw())});
    if (setup.is_enabled("itc_cross"))
        components.push_back({"itc_cross", itc_loss(enc.p_t_fused, enc.p_v_fused, model.tau_raw())});
    if (setup.is_enabled("cyc")) {
        if (enc.fused.front().records.empty())
            throw ConfigError("batch_loss: cycle loss enabled but the fusion variant records no attention");
        Value acc;
        for (size_t i = 0; i < enc.fused.size(); ++i) {
            Value c = cycle_loss(enc.fused[i].records, enc.fused[i].cycle_text_mask);
            acc = acc.defined() ? add(acc, c) : c;
        }
        components.push_back({"cyc", scale(acc, 1.0 / static_cast<double>(enc.fused.size()))});
    }
    if (setup.is_enabled("itm")) {
        ItmForward itm = itm_forward(model, batch, enc, fixed_mining);
        components.push_back({"itm", itm_loss(itm.entries)});
    }

    BatchLossResult out;
    auto [total, report] = total_loss(components, setup.mode, setup.fixed_weights, model.loss_weights());
    out.total = total;
    out.report = report;
    return out;
}

namespace {

constexpr uint64_t kDropoutStream = 0xD409;

std::string step_log_line(char stage, int global_epoch, int64_t step, const LossReport& rep, double lr,
                          double grad_norm) {
    char buf[64];
    std::ostringstream os;
    os << "stage=" << stage << " epoch=" << global_epoch << " step=" << step;
    std::snprintf(buf, sizeof buf, "%.9g", rep.total);
    os << " loss_total=" << buf;
    for (const auto& c : rep.components) {
        std::snprintf(buf, sizeof buf, "%.9g", c.raw);
        os << " loss_" << c.name << "=" << buf;
    }
    std::snprintf(buf, sizeof buf, "%.9g", lr);
    os << " lr=" << buf;
    std::snprintf(buf, sizeof buf, "%.9g", grad_norm);
    os << " grad_norm=" << buf;
    return os.str();
}

PerEpochEval quick_eval(const Model& model, const std::vector<PairedExample>& split) {
    RetrievalEmbeddings emb = retrieval_inference(model, split);
    RecallResult rec = recall_at_k(emb.p_t, emb.p_v, {1, 5});
    PerEpochEval e;
    e.tr1 = rec.tr.at(1);
    e.tr5 = rec.tr.at(5);
    e.ir1 = rec.ir.at(1);
    e.ir5 = rec.ir.at(5);
    e.gap = modality_gap(emb.p_t, emb.p_v);
    return e;
}

}  // namespace

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg, const LogFn& log,
                  const CheckpointFn& checkpoint) {
    if (ds.train.empty()) throw ContractError("train: empty training split");
    if (cfg.batch_size < 2 && std::find(cfg.loss.enabled.begin(), cfg.loss.enabled.end(), "itm") !=
                                  cfg.loss.enabled.end())
        throw ConfigError("train: itm loss requires batch_size >= 2");

    TrainResult result;
    AdamOptimizer opt(model.params(), cfg.adam);
    model.seed_dropout(derive_seed(cfg.seed, kDropoutStream));

    auto clamp_tau = [&]() {
        Tensor& raw = const_cast<Value&>(model.tau_raw()).mutable_data();
        const double lo = std::log(cfg.tau_min), hi = std::log(cfg.tau_max);
        raw.at(0) = snap_to_f32(std::min(hi, std::max(lo, raw.at(0))));
    };

    int global_epoch = 0;
    const std::vector<StageSpec> stages = {cfg.stage_a, cfg.stage_b, cfg.stage_c};
    try {
        for (const StageSpec& stage : stages) {
            if (stage.id == 'C' && stage.epochs == 0) continue;  // retrieval needs no stage C
            TrainableReport mask_report = set_trainable(model, stage);
            if (log) log("stage=" + std::string(1, stage.id) + " begin " + mask_report.to_string());

            for (int epoch = 1; epoch <= stage.epochs; ++epoch) {
                ++global_epoch;
                model.set_training(true);
                std::map<std::string, double> sums;
                double total_sum = 0.0;
                int n_steps = 0;

                for (const Batch& batch : batch_iterator(ds.train, cfg.batch_size, cfg.seed, global_epoch)) {
                    opt.zero_grad();
                    BatchLossResult bl = batch_loss(model, batch, cfg.loss);
                    backward(bl.total);
                    const double gnorm = opt.clip_grad_norm(cfg.clip_norm);
                    opt.step(stage.lr);
                    clamp_tau();
                    ++result.steps;
                    ++n_steps;
                    total_sum += bl.report.total;
                    for (const auto& c : bl.report.components) sums[c.name] += c.raw;
                    if (log) log(step_log_line(stage.id, global_epoch, result.steps, bl.report, stage.lr, gnorm));
                }

                model.set_training(false);
                EpochRecord rec;
                rec.stage = stage.id;
                rec.epoch_in_stage = epoch;
                rec.global_epoch = global_epoch;
                rec.total_mean = n_steps ? total_sum / n_steps : 0.0;
                for (auto& [k, v] : sums) rec.loss_means[k] = v / n_steps;
                rec.val = quick_eval(model, ds.val);
                result.history.push_back(rec);
                if (log) {
                    char buf[256];
                    std::snprintf(buf, sizeof buf,
                                  "eval stage=%c epoch=%d split=val tr1=%.9g tr5=%.9g ir1=%.9g ir5=%.9g gap=%.9g "
                                  "loss=%.9g",
                                  stage.id, global_epoch, rec.val.tr1, rec.val.tr5, rec.val.ir1, rec.val.ir5,
                                  rec.val.gap, rec.total_mean);
                    log(buf);
                }
            }
            result.final_stage = stage.id;
            if (checkpoint) checkpoint("stage" + std::string(1, stage.id), stage.id, result.steps);
        }
    } catch (const NumericalError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        model.set_training(false);
        if (log) log(std::string("incident=numerical_abort detail=\"") + e.what() + "\"");
        return result;
    }

    model.set_training(false);
    result.final_val = evaluate(model, ds.val, "val");
    if (checkpoint) checkpoint("final", result.final_stage, result.steps);
    if (log) log("train complete steps=" + std::to_string(result.steps));
    return result;
}

}  // namespace bridge
