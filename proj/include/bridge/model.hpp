#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bridge/bridge.hpp"
#include "bridge/objectives.hpp"

namespace bridge {

// Ordered, named parameter registry. Iteration order is registration order
// and is what the optimizer, checkpoint and gradient clipping all use.
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::string group;
        bool weight_decay = true;
        Value value;
    };

    Value add(const std::string& name, const std::string& group, Tensor init, bool weight_decay = true);
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    const Entry* find(const std::string& name) const;
    bool has_group(const std::string& group) const;
    size_t total_size() const;

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

struct ModelConfig {
    EncoderConfig text;
    EncoderConfig vision;
    BridgeConfig bridge;
    int embed_dim = 32;      // d_e of the projection heads
    double dropout = 0.1;    // interaction-block MHA dropout
    double tau_init = 0.07;  // contrastive temperature
    std::vector<std::string> learnable_loss_terms;  // nonempty iff loss weights are learnable
    void validate() const;
};

// Prefix of one modality's stack up to the layer feeding the first
// interaction block (the whole stack when there is no bridge). The pooled
// unimodal embedding is computed here and is independent of all bridge
// parameters by construction -- this is the bi-encoder retrieval path.
struct UnimodalEncoding {
    HiddenStates states;
    Value pooled_u;  // [1, d_e], unit row
};

struct FusedEncoding {
    std::vector<Value> text_layers;    // states as actually propagated, 0..L
    std::vector<Value> vision_layers;  // (bridged where a block applied)
    std::vector<uint8_t> text_mask;
    // mask for the records' text-query axis: the caption mask for
    // token-level variants, one valid slot for the pooled bridge
    std::vector<uint8_t> cycle_text_mask;
    AttentionRecords records;
    Value pooled_fused_t, pooled_fused_v;  // [1, d_e], unit rows
};

class Model {
public:
    Model(ModelConfig cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    size_t num_parameters() const { return params_.total_size(); }

    // Retrieval path. Never touches bridge parameters or cross-attention.
    UnimodalEncoding text_prefix(const std::vector<int>& token_ids) const;
    UnimodalEncoding vision_prefix(const Tensor& patches) const;

    // Interleaved continuation from two prefixes (variant-dependent).
    FusedEncoding fuse(const UnimodalEncoding& vis, const UnimodalEncoding& txt) const;

    // Plain unbridged stacks, for equivalence checks.
    HiddenStates plain_encode_text(const std::vector<int>& token_ids) const;
    HiddenStates plain_encode_vision(const Tensor& patches) const;

    Value itm_match_logit(const Value& p_t, const Value& p_v) const;

    // Encoder layer index (1-based) whose output feeds the unimodal heads.
    int prefix_depth() const;
    const std::vector<int>& interleave() const { return interleave_; }

    uint64_t cross_attention_calls() const { return cross_calls_; }
    void reset_cross_attention_calls() { cross_calls_ = 0; }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    void seed_dropout(uint64_t seed) { dropout_rng_ = Rng(seed); }

    const Value& tau_raw() const { return tau_raw_; }
    const std::map<std::string, Value>& loss_weights() const { return loss_w_; }
    const ItmMlpParams& itm_mlp() const { return itm_; }

private:
    Value add_param(const std::string& name, const std::string& group, std::vector<int> shape, double init_std,
                    bool weight_decay = true, double fill = 0.0);
    MhaParams make_mha(const std::string& prefix, const std::string& group, int d, int heads);
    EncoderLayerParams make_encoder_layer(const std::string& prefix, const std::string& group, int d, int heads,
                                          int ffn_mult);
    UnimodalEncoding make_prefix(HiddenStates full_or_partial, const Value& head_w, const Value& head_b) const;
    Value pooled_head(const Value& h, const std::vector<uint8_t>& mask, const Value& w, const Value& b) const;

    ModelConfig cfg_;
    uint64_t init_seed_ = 0;
    ParamStore params_;
    TextEncoderParams text_;
    VisionEncoderParams vision_;
    std::vector<InteractionBlockParams> blocks_;
    std::vector<int> interleave_;  // empty for none/pooled_only
    Value head_uni_t_w, head_uni_t_b, head_uni_v_w, head_uni_v_b;
    Value head_fused_t_w, head_fused_t_b, head_fused_v_w, head_fused_v_b;
    ItmMlpParams itm_;
    Value tau_raw_;
    std::map<std::string, Value> loss_w_;
    mutable uint64_t cross_calls_ = 0;
    mutable Rng dropout_rng_{0};
    bool training_ = false;
};

// Rounds every parameter to the nearest float32 value (stored as double).
// Master weights always carry exact f32 values so the 32-bit checkpoint
// format round-trips bitwise.
void snap_params_to_f32(ParamStore& params);
double snap_to_f32(double v);

}  // namespace bridge
