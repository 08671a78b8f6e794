#pragma once

#include <string>
#include <vector>

#include "bridge/encoder.hpp"

namespace bridge {

enum class FusionVariant { kNone, kPooledOnly, kSelfPlusCross, kCrossOnly };
enum class PlacementMode { kEarly, kMiddle, kLate, kStaggered, kExplicit };

std::string to_string(FusionVariant v);
std::string to_string(PlacementMode m);
FusionVariant fusion_variant_from_string(const std::string& s);
PlacementMode placement_mode_from_string(const std::string& s);

struct BridgeConfig {
    FusionVariant fusion_variant = FusionVariant::kCrossOnly;
    int q = 2;     // number of interaction blocks
    int d_s = 64;  // shared width
    int h_s = 4;   // shared heads
    PlacementMode placement = PlacementMode::kLate;
    std::vector<int> explicit_indices;  // 1-based, used when placement == kExplicit
    double gate_init = -4.0;            // raw gate; sigmoid(-4) ~ 0.018, near-identity start
    void validate(int encoder_layers) const;
};

// Encoder layer indices (1-based) after which an interaction block runs.
std::vector<int> placement_indices(PlacementMode mode, int num_layers, int q);
std::vector<int> resolve_placement(const BridgeConfig& cfg, int num_layers);

// One interaction block: shared-space projections, bidirectional cross-only
// MHA, gated residual updates. The self_* fields exist only for the
// self+cross ablation variant.
struct InteractionBlockParams {
    Value w_v_to_s, w_t_to_s;  // [d_v,d_s], [d_t,d_s]
    Value w_s_to_v, w_s_to_t;  // [d_s,d_v], [d_s,d_t]
    Value prenorm_v_g, prenorm_v_b, prenorm_t_g, prenorm_t_b;
    MhaParams cross_t_from_v;  // queries text, keys/values vision
    MhaParams cross_v_from_t;
    MhaParams self_t, self_v;
    Value self_ln_t_g, self_ln_t_b, self_ln_v_g, self_ln_v_b;
    Value gate_raw_t, gate_raw_v;  // scalars; effective gate = sigmoid(raw)
};

// Head-averaged cross-attention probabilities captured at one interaction
// layer. Rows are probability vectors; masked text keys carry exactly 0.
struct AttentionRecordEntry {
    int encoder_layer = 0;  // 1-based index the block ran after (0 = pooled top)
    Value p_t_to_v;         // [N_t, N_v]
    Value p_v_to_t;         // [N_v, N_t]
};
using AttentionRecords = std::vector<AttentionRecordEntry>;

// Eq-style pieces. All are pure given inputs; `cross_calls`, when non-null,
// counts cross-attention invocations for the retrieval-path proof.

// Z = LN(H) . W per modality.
std::pair<Value, Value> project_to_shared(const Value& h_v, const Value& h_t, const InteractionBlockParams& p);

struct CrossAttentionOutput {
    Value attended;    // [Nq, d_s]
    Value probs_mean;  // [Nq, Nkv]
};

CrossAttentionOutput cross_attention(const Value& z_q, const Value& z_kv, const MhaParams& p,
                                     const std::vector<uint8_t>* kv_mask, uint64_t* cross_calls,
                                     double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

// H + sigmoid(gate_raw) * (A . W_s_to_x)
Value gated_residual_update(const Value& h, const Value& attended, const Value& w_s_to_x, const Value& gate_raw);

struct InteractionBlockOutput {
    Value h_v, h_t;
    AttentionRecordEntry record;
};

// Both modalities update simultaneously from the same pre-update states.
// `with_self` inserts the shared-space self-attention sublayer (self+cross
// ablation variant) before the cross step.
InteractionBlockOutput interaction_block(const Value& h_v, const Value& h_t, const InteractionBlockParams& p,
                                         const std::vector<uint8_t>& text_mask, bool with_self,
                                         uint64_t* cross_calls, double dropout_rate = 0.0,
                                         Rng* dropout_rng = nullptr);

// CSV dump of attention records: layer,direction,query,key,probability.
void write_attention_csv(const AttentionRecords& records, const std::string& path);

}  // namespace bridge
