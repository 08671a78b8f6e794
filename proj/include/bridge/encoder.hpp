#pragma once

#include <vector>

#include "bridge/autodiff.hpp"

namespace bridge {

struct EncoderConfig {
    int num_layers = 4;
    int width = 64;  // d_v or d_t
    int heads = 4;
    int ffn_mult = 4;
    int max_positions = 16;
    int vocab_size = 64;  // text side
    int patch_dim = 12;   // vision side
    void validate() const;
};

// Per-layer token activations for one modality. layers[0] is the embedding
// output, layers[l] the output of encoder layer l.
struct HiddenStates {
    std::vector<Value> layers;
    std::vector<uint8_t> valid_mask;
    int num_layers() const { return static_cast<int>(layers.size()) - 1; }
    const Value& top() const { return layers.back(); }
};

struct MhaParams {
    Value wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;
};

struct MhaOutput {
    Value out;         // [Nq, d]
    Value probs_mean;  // [Nq, Nkv], arithmetic mean over heads; defined iff record_probs
};

// Standard dot-product multi-head attention. Queries come from q_in,
// keys/values from kv_in; the two may be the same tensor (self-attention).
// Masked keys get exactly zero probability. Dropout, when active, sits
// between the attention context and the output projection.
MhaOutput multi_head_attention(const Value& q_in, const Value& kv_in, const MhaParams& p,
                               const std::vector<uint8_t>* kv_mask, bool record_probs, double dropout_rate = 0.0,
                               Rng* dropout_rng = nullptr);

struct EncoderLayerParams {
    MhaParams attn;
    Value ln1_g, ln1_b, ln2_g, ln2_b;
    Value ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct TextEncoderParams {
    Value token_embed;  // [vocab, d]
    Value pos_embed;    // [max_positions, d]
    std::vector<EncoderLayerParams> layers;
};

struct VisionEncoderParams {
    Value patch_w;    // [patch_dim, d]
    Value patch_b;    // [1, d]
    Value pos_embed;  // [max_positions, d]
    std::vector<EncoderLayerParams> layers;
};

constexpr int kPadTokenId = 0;

std::vector<uint8_t> text_valid_mask(const std::vector<int>& token_ids);

// Token embedding + learned positional embedding. ids may include the pad
// id; padded positions are embedded but flagged invalid by the caller's mask.
Value embed_text(const std::vector<int>& token_ids, const TextEncoderParams& p, const EncoderConfig& cfg);

// Linear patch projection + learned positional embedding.
Value embed_patches(const Value& patches, const VisionEncoderParams& p, const EncoderConfig& cfg);

// Pre-norm transformer layer: h + SelfAttn(LN(h)), then h + FFN(LN(h)).
Value encoder_layer(const Value& h, const EncoderLayerParams& p, const std::vector<uint8_t>& mask);

HiddenStates encode_text(const std::vector<int>& token_ids, const TextEncoderParams& p, const EncoderConfig& cfg);
HiddenStates encode_patches(const Value& patches, const VisionEncoderParams& p, const EncoderConfig& cfg);

}  // namespace bridge
