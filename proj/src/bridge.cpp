#include "bridge/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace bridge {

std::string to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::kNone: return "none";
        case FusionVariant::kPooledOnly: return "pooled_only";
        case FusionVariant::kSelfPlusCross: return "self_plus_cross";
        case FusionVariant::kCrossOnly: return "cross_only";
    }
    return "?";
}

std::string to_string(PlacementMode m) {
    switch (m) {
        case PlacementMode::kEarly: return "early";
        case PlacementMode::kMiddle: return "middle";
        case PlacementMode::kLate: return "late";
        case PlacementMode::kStaggered: return "staggered";
        case PlacementMode::kExplicit: return "explicit";
    }
    return "?";
}

FusionVariant fusion_variant_from_string(const std::string& s) {
    if (s == "none") return FusionVariant::kNone;
    if (s == "pooled_only") return FusionVariant::kPooledOnly;
    if (s == "self_plus_cross") return FusionVariant::kSelfPlusCross;
    if (s == "cross_only") return FusionVariant::kCrossOnly;
    throw ConfigError("unknown fusion variant '" + s + "'");
}

PlacementMode placement_mode_from_string(const std::string& s) {
    if (s == "early") return PlacementMode::kEarly;
    if (s == "middle") return PlacementMode::kMiddle;
    if (s == "late") return PlacementMode::kLate;
    if (s == "staggered") return PlacementMode::kStaggered;
    if (s == "explicit") return PlacementMode::kExplicit;
    throw ConfigError("unknown placement mode '" + s + "'");
}

void BridgeConfig::validate(int encoder_layers) const {
    if (d_s < 1 || h_s < 1 || d_s % h_s != 0) throw ConfigError("bridge: h_s must divide d_s");
    switch (fusion_variant) {
        case FusionVariant::kNone:
            return;  // bridge absent; remaining knobs unused
        case FusionVariant::kPooledOnly:
            if (q != 1) throw ConfigError("bridge: pooled_only uses exactly one block (q=1)");
            return;
        case FusionVariant::kSelfPlusCross:
        case FusionVariant::kCrossOnly:
            break;
    }
    if (q < 1) throw ConfigError("bridge: q must be >= 1");
    resolve_placement(*this, encoder_layers);  // throws on inconsistency
}

std::vector<int> placement_indices(PlacementMode mode, int num_layers, int q) {
    if (q < 1) throw ConfigError("placement: q must be >= 1");
    if (q > num_layers)
        throw ConfigError("placement: q=" + std::to_string(q) + " exceeds encoder depth " +
                          std::to_string(num_layers));
    std::vector<int> idx;
    switch (mode) {
        case PlacementMode::kEarly:
            for (int i = 1; i <= q; ++i) idx.push_back(i);
            break;
        case PlacementMode::kMiddle: {
            const int start = (num_layers - q) / 2 + 1;
            for (int i = 0; i < q; ++i) idx.push_back(start + i);
            break;
        }
        case PlacementMode::kLate:
            for (int i = num_layers - q + 1; i <= num_layers; ++i) idx.push_back(i);
            break;
        case PlacementMode::kStaggered: {
            for (int i = 1; i <= q; ++i) {
                const int pos = static_cast<int>(std::floor(static_cast<double>(i) * num_layers / q + 0.5));
                idx.push_back(std::max(1, std::min(num_layers, pos)));
            }
            idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
            break;
        }
        case PlacementMode::kExplicit:
            throw ConfigError("placement: explicit mode requires an index list");
    }
    return idx;
}

std::vector<int> resolve_placement(const BridgeConfig& cfg, int num_layers) {
    if (cfg.placement == PlacementMode::kExplicit) {
        if (static_cast<int>(cfg.explicit_indices.size()) != cfg.q)
            throw ConfigError("placement: explicit list size must equal q");
        int prev = 0;
        for (int i : cfg.explicit_indices) {
            if (i <= prev || i < 1 || i > num_layers)
                throw ConfigError("placement: indices must be strictly increasing within [1," +
                                  std::to_string(num_layers) + "]");
            prev = i;
        }
        return cfg.explicit_indices;
    }
    return placement_indices(cfg.placement, num_layers, cfg.q);
}

std::pair<Value, Value> project_to_shared(const Value& h_v, const Value& h_t, const InteractionBlockParams& p) {
    Value z_v = matmul(layer_norm_rows(h_v, p.prenorm_v_g, p.prenorm_v_b), p.w_v_to_s);
    Value z_t = matmul(layer_norm_rows(h_t, p.prenorm_t_g, p.prenorm_t_b), p.w_t_to_s);
    return {z_v, z_t};
}

CrossAttentionOutput cross_attention(const Value& z_q, const Value& z_kv, const MhaParams& p,
                                     const std::vector<uint8_t>* kv_mask, uint64_t* cross_calls,
                                     double dropout_rate, Rng* dropout_rng) {
    if (cross_calls) ++*cross_calls;
    MhaOutput o = multi_head_attention(z_q, z_kv, p, kv_mask, /*record_probs=*/true, dropout_rate, dropout_rng);
    return {o.out, o.probs_mean};
}

Value gated_residual_update(const Value& h, const Value& attended, const Value& w_s_to_x, const Value& gate_raw) {
    return add(h, mul_scalar(matmul(attended, w_s_to_x), sigmoid(gate_raw)));
}

InteractionBlockOutput interaction_block(const Value& h_v, const Value& h_t, const InteractionBlockParams& p,
                                         const std::vector<uint8_t>& text_mask, bool with_self,
                                         uint64_t* cross_calls, double dropout_rate, Rng* dropout_rng) {
    auto [z_v, z_t] = project_to_shared(h_v, h_t, p);

    if (with_self) {
        std::vector<uint8_t> vis_mask(static_cast<size_t>(z_v.data().rows()), 1);
        Value nt = layer_norm_rows(z_t, p.self_ln_t_g, p.self_ln_t_b);
        Value nv = layer_norm_rows(z_v, p.self_ln_v_g, p.self_ln_v_b);
        MhaOutput st = multi_head_attention(nt, nt, p.self_t, &text_mask, false, dropout_rate, dropout_rng);
        MhaOutput sv = multi_head_attention(nv, nv, p.self_v, &vis_mask, false, dropout_rate, dropout_rng);
        z_t = add(z_t, st.out);
        z_v = add(z_v, sv.out);
    }

    // Both directions read the same pre-update states.
    CrossAttentionOutput a_t = cross_attention(z_t, z_v, p.cross_t_from_v, nullptr, cross_calls, dropout_rate,
                                               dropout_rng);
    CrossAttentionOutput a_v = cross_attention(z_v, z_t, p.cross_v_from_t, &text_mask, cross_calls, dropout_rate,
                                               dropout_rng);

    InteractionBlockOutput out;
    out.h_t = gated_residual_update(h_t, a_t.attended, p.w_s_to_t, p.gate_raw_t);
    out.h_v = gated_residual_update(h_v, a_v.attended, p.w_s_to_v, p.gate_raw_v);
    out.record.p_t_to_v = a_t.probs_mean;
    out.record.p_v_to_t = a_v.probs_mean;
    return out;
}

void write_attention_csv(const AttentionRecords& records, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "layer,direction,query,key,probability\n";
    char buf[64];
    for (const auto& rec : records) {
        auto dump = [&](const Value& m, const char* dir) {
            for (int i = 0; i < m.data().rows(); ++i)
                for (int j = 0; j < m.data().cols(); ++j) {
                    std::snprintf(buf, sizeof buf, "%.9g", m.data().at(i, j));
                    f << rec.encoder_layer << ',' << dir << ',' << i << ',' << j << ',' << buf << '\n';
                }
        };
        dump(rec.p_t_to_v, "t2v");
        dump(rec.p_v_to_t, "v2t");
    }
    if (!f.good()) throw IoError("write failed for " + path);
}

}  // namespace bridge
