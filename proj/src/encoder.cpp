#include "bridge/encoder.hpp"

#include <cmath>

namespace bridge {

void EncoderConfig::validate() const {
    if (num_layers < 1) throw ConfigError("encoder: num_layers must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0)
        throw ConfigError("encoder: heads must divide width (" + std::to_string(heads) + " vs " +
                          std::to_string(width) + ")");
    if (ffn_mult < 1) throw ConfigError("encoder: ffn_mult must be >= 1");
    if (max_positions < 1) throw ConfigError("encoder: max_positions must be >= 1");
    if (vocab_size < 2) throw ConfigError("encoder: vocab_size must be >= 2");
    if (patch_dim < 1) throw ConfigError("encoder: patch_dim must be >= 1");
}

MhaOutput multi_head_attention(const Value& q_in, const Value& kv_in, const MhaParams& p,
                               const std::vector<uint8_t>* kv_mask, bool record_probs, double dropout_rate,
                               Rng* dropout_rng) {
    const int d = p.wq.data().cols();
    if (d % p.heads != 0) throw ShapeError("mha: heads must divide model width");
    const int dh = d / p.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Value q = linear(q_in, p.wq, &p.bq);
    Value k = linear(kv_in, p.wk, &p.bk);
    Value v = linear(kv_in, p.wv, &p.bv);

    Value probs = multihead_scores_softmax(q, k, p.heads, inv_sqrt_dh, kv_mask);
    Value ctx = multihead_apply(probs, v, p.heads);
    if (dropout_rate > 0.0 && dropout_rng) ctx = dropout(ctx, dropout_rate, *dropout_rng);

    MhaOutput out;
    out.out = linear(ctx, p.wo, &p.bo);
    if (record_probs) out.probs_mean = head_mean(probs, p.heads);
    return out;
}

std::vector<uint8_t> text_valid_mask(const std::vector<int>& token_ids) {
    std::vector<uint8_t> mask(token_ids.size());
    for (size_t i = 0; i < token_ids.size(); ++i) mask[i] = token_ids[i] != kPadTokenId ? 1 : 0;
    return mask;
}

Value embed_text(const std::vector<int>& token_ids, const TextEncoderParams& p, const EncoderConfig& cfg) {
    const int n = static_cast<int>(token_ids.size());
    if (n == 0) throw ContractError("embed_text: empty sequence");
    if (n > cfg.max_positions)
        throw ContractError("embed_text: sequence length " + std::to_string(n) + " exceeds max_positions " +
                            std::to_string(cfg.max_positions));
    for (int id : token_ids)
        if (id < 0 || id >= cfg.vocab_size)
            throw VocabError("embed_text: token id " + std::to_string(id) + " outside vocab of size " +
                             std::to_string(cfg.vocab_size));
    Value tok = lookup_rows(p.token_embed, token_ids);
    Value pos = slice_rows(p.pos_embed, 0, n);
    return add(tok, pos);
}

Value embed_patches(const Value& patches, const VisionEncoderParams& p, const EncoderConfig& cfg) {
    if (patches.data().cols() != cfg.patch_dim)
        throw ShapeError("embed_patches: patch_dim " + std::to_string(patches.data().cols()) + " vs config " +
                         std::to_string(cfg.patch_dim));
    const int n = patches.data().rows();
    if (n > cfg.max_positions) throw ContractError("embed_patches: too many patches");
    Value proj = linear(patches, p.patch_w, &p.patch_b);
    Value pos = slice_rows(p.pos_embed, 0, n);
    return add(proj, pos);
}

Value encoder_layer(const Value& h, const EncoderLayerParams& p, const std::vector<uint8_t>& mask) {
    bool any_valid = false;
    for (uint8_t m : mask) any_valid = any_valid || m;
    if (!any_valid) throw DegenerateInputError("encoder_layer: all positions masked");

    Value x = layer_norm_rows(h, p.ln1_g, p.ln1_b);
    MhaOutput attn = multi_head_attention(x, x, p.attn, &mask, /*record_probs=*/false);
    Value h1 = add(h, attn.out);

    Value y = layer_norm_rows(h1, p.ln2_g, p.ln2_b);
    Value ff = linear(gelu(linear(y, p.ffn_w1, &p.ffn_b1)), p.ffn_w2, &p.ffn_b2);
    return add(h1, ff);
}

namespace {

HiddenStates run_stack(Value embedded, const std::vector<EncoderLayerParams>& layers, std::vector<uint8_t> mask) {
    HiddenStates hs;
    hs.valid_mask = std::move(mask);
    hs.layers.push_back(std::move(embedded));
    for (const auto& lp : layers) hs.layers.push_back(encoder_layer(hs.layers.back(), lp, hs.valid_mask));
    return hs;
}

}  // namespace

HiddenStates encode_text(const std::vector<int>& token_ids, const TextEncoderParams& p, const EncoderConfig& cfg) {
    return run_stack(embed_text(token_ids, p, cfg), p.layers, text_valid_mask(token_ids));
}

HiddenStates encode_patches(const Value& patches, const VisionEncoderParams& p, const EncoderConfig& cfg) {
    std::vector<uint8_t> mask(static_cast<size_t>(patches.data().rows()), 1);
    return run_stack(embed_patches(patches, p, cfg), p.layers, std::move(mask));
}

}  // namespace bridge
