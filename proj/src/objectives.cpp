#include "bridge/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace bridge {

const std::vector<std::string> kAllLossTerms = {"itc_uni", "itc_cross", "itm", "cyc"};

Value similarity_matrix(const Value& p_t, const Value& p_v, const Value& tau_raw) {
    if (p_t.data().rows() != p_v.data().rows() || p_t.data().cols() != p_v.data().cols())
        throw ShapeError("similarity_matrix: embedding shape mismatch");
    return mul_scalar(matmul_nt(p_t, p_v), vexp(neg(tau_raw)));
}

Value infonce_from_similarity(const Value& s) {
    const int b = s.data().rows();
    if (b < 1 || s.data().cols() != b) throw ContractError("infonce: similarity matrix must be square, B >= 1");
    Value t2v = neg(mean(diag(log_softmax_rows(s))));
    Value v2t = neg(mean(diag(log_softmax_rows(transpose(s)))));
    return scale(add(t2v, v2t), 0.5);
}

Value itc_loss(const Value& p_t, const Value& p_v, const Value& tau_raw) {
    if (p_t.data().rows() < 1) throw ContractError("itc_loss: empty batch");
    return infonce_from_similarity(similarity_matrix(p_t, p_v, tau_raw));
}

namespace {
constexpr double kCycleDiagFloor = 1e-8;
}

Value cycle_loss(const AttentionRecords& records, const std::vector<uint8_t>& text_mask) {
    if (records.empty()) throw ContractError("cycle_loss: no attention records");
    int n_valid = 0;
    for (uint8_t m : text_mask) n_valid += m ? 1 : 0;
    if (n_valid == 0) throw DegenerateInputError("cycle_loss: no valid text positions");

    Value acc;
    for (const auto& rec : records) {
        const int n_t = rec.p_t_to_v.data().rows();
        if (static_cast<int>(text_mask.size()) != n_t) throw ShapeError("cycle_loss: mask/record mismatch");
        // Right-padded captions: valid rows form a prefix.
        for (int i = 0; i < n_t; ++i)
            if (static_cast<bool>(text_mask[static_cast<size_t>(i)]) != (i < n_valid))
                throw ContractError("cycle_loss: text mask must be a valid prefix (right padding)");

        Value p_tv = n_valid == n_t ? rec.p_t_to_v : slice_rows(rec.p_t_to_v, 0, n_valid);
        Value p_vt = n_valid == n_t ? rec.p_v_to_t : slice_cols(rec.p_v_to_t, 0, n_valid);
        Value c_v = matmul(p_tv, p_vt);  // [n_valid, n_valid]
        Value c_t = matmul(p_vt, p_tv);  // [N_v, N_v]
        Value term_v = mean(vlog(clamp_min(diag(c_v), kCycleDiagFloor)));
        Value term_t = mean(vlog(clamp_min(diag(c_t), kCycleDiagFloor)));
        Value layer_loss = scale(add(term_v, term_t), -0.5);
        acc = acc.defined() ? add(acc, layer_loss) : layer_loss;
    }
    return scale(acc, 1.0 / static_cast<double>(records.size()));
}

MinedNegatives mine_semi_hard_negatives(const Tensor& s) {
    const int b = s.rows();
    if (b < 2) throw ContractError("mine_semi_hard_negatives: need B >= 2");
    if (s.cols() != b) throw ShapeError("mine_semi_hard_negatives: matrix must be square");

    MinedNegatives out;
    out.neg_image_for_text.resize(static_cast<size_t>(b));
    out.neg_text_for_image.resize(static_cast<size_t>(b));

    auto pick = [&](int anchor, auto value_at) {
        const double pos = value_at(anchor);
        int semi = -1, hard = -1;
        for (int c = 0; c < b; ++c) {
            if (c == anchor) continue;
            const double v = value_at(c);
            if (hard < 0 || v > value_at(hard)) hard = c;
            if (v < pos && (semi < 0 || v > value_at(semi))) semi = c;
        }
        return semi >= 0 ? semi : hard;
    };

    for (int i = 0; i < b; ++i)
        out.neg_image_for_text[static_cast<size_t>(i)] = pick(i, [&](int j) { return s.at(i, j); });
    for (int j = 0; j < b; ++j)
        out.neg_text_for_image[static_cast<size_t>(j)] = pick(j, [&](int i) { return s.at(i, j); });
    return out;
}

Value itm_logit(const Value& p_t, const Value& p_v, const ItmMlpParams& p) {
    Value x = concat_cols({p_t, p_v});
    return linear(gelu(linear(x, p.w1, &p.b1)), p.w2, &p.b2);
}

Value itm_loss(const std::vector<std::pair<Value, double>>& entries) {
    if (entries.empty()) throw ContractError("itm_loss: empty batch");
    std::vector<Value> logits;
    Tensor labels({static_cast<int>(entries.size()), 1});
    logits.reserve(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first.data().size() != 1) throw ShapeError("itm_loss: logit must be a single value");
        logits.push_back(reshape(entries[i].first, {1, 1}));
        labels.at(static_cast<int>(i), 0) = entries[i].second;
    }
    Value z = concat_rows(logits);
    // BCE with logits: softplus(z) - y*z, numerically stable for any z.
    return mean(sub(softplus(z), mul(z, make_input(labels))));
}

std::pair<Value, LossReport> total_loss(const std::vector<std::pair<std::string, Value>>& components,
                                        LossWeightMode mode, const std::map<std::string, double>& fixed_weights,
                                        const std::map<std::string, Value>& learnable_weights) {
    if (components.empty()) throw ConfigError("total_loss: no components enabled");

    LossReport report;
    Value total;
    for (const auto& [name, raw] : components) {
        LossComponentReport c;
        c.name = name;
        c.raw = raw.item();
        Value contrib;
        if (mode == LossWeightMode::kFixed) {
            auto it = fixed_weights.find(name);
            const double lambda = it == fixed_weights.end() ? 1.0 : it->second;
            if (lambda <= 0.0) throw ConfigError("total_loss: weight for '" + name + "' must be positive");
            c.weight = lambda;
            contrib = scale(raw, lambda);
        } else {
            auto it = learnable_weights.find(name);
            if (it == learnable_weights.end())
                throw ConfigError("total_loss: missing learnable weight for '" + name + "'");
            const Value& w = it->second;
            c.weight = std::exp(-w.item());
            contrib = add(mul_scalar(raw, vexp(neg(w))), w);
        }
        c.weighted = contrib.item();
        report.components.push_back(c);
        total = total.defined() ? add(total, contrib) : contrib;
    }
    report.total = total.item();
    return {total, report};
}

}  // namespace bridge
