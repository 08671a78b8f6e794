#pragma once

#include <map>
#include <string>
#include <vector>

#include "bridge/bridge.hpp"

namespace bridge {

// Loss term names used in configs, logs and reports: itc_uni, itc_cross,
// itm, cyc.
extern const std::vector<std::string> kAllLossTerms;

enum class LossWeightMode { kFixed, kLearnable };

// S = (P_t . P_v^T) * exp(-tau_raw); tau_raw is the log-temperature.
Value similarity_matrix(const Value& p_t, const Value& p_v, const Value& tau_raw);

// Symmetric InfoNCE over a precomputed similarity matrix: mean of the
// text->image and image->text cross-entropies against the diagonal.
Value infonce_from_similarity(const Value& s);

// Full contrastive loss from unit-norm pooled embeddings [B, d_e].
Value itc_loss(const Value& p_t, const Value& p_v, const Value& tau_raw);

// Cycle-consistency penalty for one example's attention records. Round-trip
// products are pushed toward the identity via the log-diagonal; padded text
// rows are excluded from both the product and the mean. Averaged over
// recorded layers.
Value cycle_loss(const AttentionRecords& records, const std::vector<uint8_t>& text_mask);

struct MinedNegatives {
    std::vector<int> neg_image_for_text;  // index j* per text anchor i (from row i)
    std::vector<int> neg_text_for_image;  // index i* per image anchor j (from column j)
};

// Semi-hard mining on a detached similarity matrix: the most similar
// non-matching candidate still below the positive similarity; hardest
// negative as fallback. Ties break toward the smaller index.
MinedNegatives mine_semi_hard_negatives(const Tensor& s);

struct ItmMlpParams {
    Value w1, b1, w2, b2;
};

// Match logit for one (text, image) pooled pair: MLP over [p_t ; p_v].
Value itm_logit(const Value& p_t, const Value& p_v, const ItmMlpParams& p);

// Mean binary cross-entropy over (logit, label) pairs; logits are [1,1].
Value itm_loss(const std::vector<std::pair<Value, double>>& entries);

struct LossComponentReport {
    std::string name;
    double raw = 0.0;
    double weight = 0.0;
    double weighted = 0.0;  // contribution to the total (includes the +w term in learnable mode)
};

struct LossReport {
    std::vector<LossComponentReport> components;
    double total = 0.0;
};

// Weighted sum of enabled components. Fixed mode: sum of lambda_k * L_k.
// Learnable mode: sum of exp(-w_k) * L_k + w_k with w_k trainable, an
// uncertainty-style positive scaling.
std::pair<Value, LossReport> total_loss(const std::vector<std::pair<std::string, Value>>& components,
                                        LossWeightMode mode, const std::map<std::string, double>& fixed_weights,
                                        const std::map<std::string, Value>& learnable_weights);

}  // namespace bridge
