#pragma once

#include <map>
#include <string>
#include <vector>

#include "bridge/data.hpp"
#include "bridge/model.hpp"

namespace bridge {

// Identity-order batch over a whole split (no shuffling, no drop).
Batch make_full_batch(const std::vector<PairedExample>& split);

// Shared batch forward: unimodal prefixes for every example, fused pass on
// the matched pairs, and the stacked pooled embeddings.
struct BatchEncodings {
    std::vector<UnimodalEncoding> text, vision;
    std::vector<FusedEncoding> fused;
    Value p_t_uni, p_v_uni;  // [B, d_e]
    Value p_t_fused, p_v_fused;
};
BatchEncodings encode_batch(const Model& model, const Batch& batch);

// ITM forward pass: mines semi-hard negatives from the detached cross-fused
// similarity matrix, runs the mismatched pairs through the bridge (reusing
// the cached unimodal prefixes), and returns balanced (logit, label) pairs:
// one positive and one negative per anchor and direction.
struct ItmForward {
    std::vector<std::pair<Value, double>> entries;
    MinedNegatives mined;
};
// `fixed_mining` pins the negative choices (gradient checks differentiate
// the loss at fixed mining, matching the detached-mining semantics).
ItmForward itm_forward(const Model& model, const Batch& batch, const BatchEncodings& enc,
                       const MinedNegatives* fixed_mining = nullptr);

struct RecallResult {
    std::map<int, double> tr;  // text -> image recall@K, percent
    std::map<int, double> ir;  // image -> text recall@K, percent
};

// Recall@K by inner-product ranking with ties broken toward the smaller
// candidate index. Row i of p_t pairs with row i of p_v.
RecallResult recall_at_k(const Tensor& p_t, const Tensor& p_v, const std::vector<int>& ks);

// Euclidean distance between the modality centroids.
double modality_gap(const Tensor& p_t, const Tensor& p_v);

struct RetrievalEmbeddings {
    Tensor p_t, p_v;  // [M, d_e]
    uint64_t cross_attention_calls = 0;
};

// Bi-encoder retrieval path: unimodal heads only. The instrumented
// cross-attention counter must stay at zero; anything else is a
// ContractViolation.
RetrievalEmbeddings retrieval_inference(const Model& model, const std::vector<PairedExample>& examples);

struct EvalReport {
    std::string split;
    double tr1 = 0, tr5 = 0, ir1 = 0, ir5 = 0;
    double itm_accuracy = 0;
    double modality_gap = 0;
    double cycle_loss_eval = 0;
    uint64_t cross_attention_calls_during_retrieval = 0;
    std::string to_kv() const;  // flat key=value block, one pair per line
};

EvalReport evaluate(const Model& model, const std::vector<PairedExample>& examples, const std::string& split_name);

// CSV export of the retrieval-space embeddings (one row per example per
// modality) plus a companion 2-D PCA projection for quick-look plots.
void export_embeddings(const Model& model, const std::vector<PairedExample>& examples, const std::string& csv_path);

}  // namespace bridge
