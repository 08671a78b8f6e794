#include "bridge/model.hpp"

#include <cmath>

namespace bridge {

Value ParamStore::add(const std::string& name, const std::string& group, Tensor init, bool weight_decay) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    Entry e;
    e.name = name;
    e.group = group;
    e.weight_decay = weight_decay;
    e.value = make_param(std::move(init));
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
    return entries_.back().value;
}

const ParamStore::Entry* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
}

bool ParamStore::has_group(const std::string& group) const {
    for (const auto& e : entries_)
        if (e.group == group) return true;
    return false;
}

size_t ParamStore::total_size() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.value.data().size();
    return n;
}

void ModelConfig::validate() const {
    text.validate();
    vision.validate();
    if (text.num_layers != vision.num_layers)
        throw ConfigError("model: encoders must have equal depth for synchronized interaction");
    bridge.validate(text.num_layers);
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
    if (tau_init <= 0.0 || tau_init > 1.0) throw ConfigError("model: tau_init must be in (0,1]");
    for (const auto& t : learnable_loss_terms) {
        bool known = false;
        for (const auto& k : kAllLossTerms) known = known || k == t;
        if (!known) throw ConfigError("model: unknown loss term '" + t + "'");
    }
}

double snap_to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void snap_params_to_f32(ParamStore& params) {
    for (auto& e : params.entries()) {
        Tensor& t = e.value.mutable_data();
        for (size_t i = 0; i < t.size(); ++i) t.at(i) = snap_to_f32(t.at(i));
    }
}

Value Model::add_param(const std::string& name, const std::string& group, std::vector<int> shape, double init_std,
                       bool weight_decay, double fill) {
    Tensor t(std::move(shape));
    if (init_std > 0.0) {
        // Per-parameter stream: init draws depend on the name, not on
        // registration order, so variants share identical common weights.
        Rng rng(derive_seed(init_seed_, hash_name(name)));
        for (size_t i = 0; i < t.size(); ++i) t.at(i) = snap_to_f32(rng.normal(0.0, init_std));
    } else if (fill != 0.0) {
        t.fill(snap_to_f32(fill));
    }
    return params_.add(name, group, std::move(t), weight_decay);
}

MhaParams Model::make_mha(const std::string& prefix, const std::string& group, int d, int heads) {
    MhaParams p;
    p.heads = heads;
    p.wq = add_param(prefix + ".wq", group, {d, d}, 0.02);
    p.bq = add_param(prefix + ".bq", group, {1, d}, 0.0);
    p.wk = add_param(prefix + ".wk", group, {d, d}, 0.02);
    p.bk = add_param(prefix + ".bk", group, {1, d}, 0.0);
    p.wv = add_param(prefix + ".wv", group, {d, d}, 0.02);
    p.bv = add_param(prefix + ".bv", group, {1, d}, 0.0);
    p.wo = add_param(prefix + ".wo", group, {d, d}, 0.02);
    p.bo = add_param(prefix + ".bo", group, {1, d}, 0.0);
    return p;
}

EncoderLayerParams Model::make_encoder_layer(const std::string& prefix, const std::string& group, int d, int heads,
                                             int ffn_mult) {
    EncoderLayerParams p;
    p.attn = make_mha(prefix + ".attn", group, d, heads);
    p.ln1_g = add_param(prefix + ".ln1_g", group, {1, d}, 0.0, false, 1.0);
    p.ln1_b = add_param(prefix + ".ln1_b", group, {1, d}, 0.0, false);
    p.ln2_g = add_param(prefix + ".ln2_g", group, {1, d}, 0.0, false, 1.0);
    p.ln2_b = add_param(prefix + ".ln2_b", group, {1, d}, 0.0, false);
    const int dff = d * ffn_mult;
    p.ffn_w1 = add_param(prefix + ".ffn_w1", group, {d, dff}, 0.02);
    p.ffn_b1 = add_param(prefix + ".ffn_b1", group, {1, dff}, 0.0);
    p.ffn_w2 = add_param(prefix + ".ffn_w2", group, {dff, d}, 0.02);
    p.ffn_b2 = add_param(prefix + ".ffn_b2", group, {1, d}, 0.0);
    return p;
}

Model::Model(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)), init_seed_(init_seed) {
    cfg_.validate();
    const int d_t = cfg_.text.width, d_v = cfg_.vision.width, d_s = cfg_.bridge.d_s, d_e = cfg_.embed_dim;
    const int L = cfg_.text.num_layers;

    text_.token_embed = add_param("text.token_embed", "text_embed", {cfg_.text.vocab_size, d_t}, 0.02);
    text_.pos_embed = add_param("text.pos_embed", "pos_embed", {cfg_.text.max_positions, d_t}, 0.02);
    for (int l = 1; l <= L; ++l)
        text_.layers.push_back(
            make_encoder_layer("text.layer" + std::to_string(l), "text_layer_" + std::to_string(l), d_t,
                               cfg_.text.heads, cfg_.text.ffn_mult));

    vision_.patch_w = add_param("vision.patch_w", "vision_embed", {cfg_.vision.patch_dim, d_v}, 0.02);
    vision_.patch_b = add_param("vision.patch_b", "vision_embed", {1, d_v}, 0.0);
    vision_.pos_embed = add_param("vision.pos_embed", "pos_embed", {cfg_.vision.max_positions, d_v}, 0.02);
    for (int l = 1; l <= L; ++l)
        vision_.layers.push_back(
            make_encoder_layer("vision.layer" + std::to_string(l), "vision_layer_" + std::to_string(l), d_v,
                               cfg_.vision.heads, cfg_.vision.ffn_mult));

    const FusionVariant fv = cfg_.bridge.fusion_variant;
    int n_blocks = 0;
    if (fv == FusionVariant::kPooledOnly) n_blocks = 1;
    if (fv == FusionVariant::kCrossOnly || fv == FusionVariant::kSelfPlusCross) {
        interleave_ = resolve_placement(cfg_.bridge, L);
        n_blocks = static_cast<int>(interleave_.size());
    }
    for (int k = 1; k <= n_blocks; ++k) {
        const std::string pre = "bridge.block" + std::to_string(k);
        InteractionBlockParams b;
        b.w_v_to_s = add_param(pre + ".w_v_to_s", "bridge", {d_v, d_s}, 0.02);
        b.w_t_to_s = add_param(pre + ".w_t_to_s", "bridge", {d_t, d_s}, 0.02);
        b.w_s_to_v = add_param(pre + ".w_s_to_v", "bridge", {d_s, d_v}, 0.02);
        b.w_s_to_t = add_param(pre + ".w_s_to_t", "bridge", {d_s, d_t}, 0.02);
        b.prenorm_v_g = add_param(pre + ".prenorm_v_g", "bridge", {1, d_v}, 0.0, false, 1.0);
        b.prenorm_v_b = add_param(pre + ".prenorm_v_b", "bridge", {1, d_v}, 0.0, false);
        b.prenorm_t_g = add_param(pre + ".prenorm_t_g", "bridge", {1, d_t}, 0.0, false, 1.0);
        b.prenorm_t_b = add_param(pre + ".prenorm_t_b", "bridge", {1, d_t}, 0.0, false);
        b.cross_t_from_v = make_mha(pre + ".cross_t", "bridge", d_s, cfg_.bridge.h_s);
        b.cross_v_from_t = make_mha(pre + ".cross_v", "bridge", d_s, cfg_.bridge.h_s);
        if (fv == FusionVariant::kSelfPlusCross) {
            b.self_t = make_mha(pre + ".self_t", "bridge", d_s, cfg_.bridge.h_s);
            b.self_v = make_mha(pre + ".self_v", "bridge", d_s, cfg_.bridge.h_s);
            b.self_ln_t_g = add_param(pre + ".self_ln_t_g", "bridge", {1, d_s}, 0.0, false, 1.0);
            b.self_ln_t_b = add_param(pre + ".self_ln_t_b", "bridge", {1, d_s}, 0.0, false);
            b.self_ln_v_g = add_param(pre + ".self_ln_v_g", "bridge", {1, d_s}, 0.0, false, 1.0);
            b.self_ln_v_b = add_param(pre + ".self_ln_v_b", "bridge", {1, d_s}, 0.0, false);
        }
        b.gate_raw_t = add_param(pre + ".gate_t", "bridge", {1}, 0.0, false, cfg_.bridge.gate_init);
        b.gate_raw_v = add_param(pre + ".gate_v", "bridge", {1}, 0.0, false, cfg_.bridge.gate_init);
        blocks_.push_back(std::move(b));
    }

    // projection heads use fan-in scaling so pooled embeddings start at a
    // healthy norm; the residual-path transformer weights keep the usual
    // small init
    const double head_t_std = 1.0 / std::sqrt(static_cast<double>(d_t));
    const double head_v_std = 1.0 / std::sqrt(static_cast<double>(d_v));
    head_uni_t_w = add_param("heads.uni_t.w", "heads", {d_t, d_e}, head_t_std);
    head_uni_t_b = add_param("heads.uni_t.b", "heads", {1, d_e}, 0.0);
    head_uni_v_w = add_param("heads.uni_v.w", "heads", {d_v, d_e}, head_v_std);
    head_uni_v_b = add_param("heads.uni_v.b", "heads", {1, d_e}, 0.0);
    head_fused_t_w = add_param("heads.fused_t.w", "heads", {d_t, d_e}, head_t_std);
    head_fused_t_b = add_param("heads.fused_t.b", "heads", {1, d_e}, 0.0);
    head_fused_v_w = add_param("heads.fused_v.w", "heads", {d_v, d_e}, head_v_std);
    head_fused_v_b = add_param("heads.fused_v.b", "heads", {1, d_e}, 0.0);

    const double itm_std = 1.0 / std::sqrt(static_cast<double>(2 * d_e));
    itm_.w1 = add_param("itm.w1", "itm_head", {2 * d_e, d_e}, itm_std);
    itm_.b1 = add_param("itm.b1", "itm_head", {1, d_e}, 0.0);
    itm_.w2 = add_param("itm.w2", "itm_head", {d_e, 1}, 1.0 / std::sqrt(static_cast<double>(d_e)));
    itm_.b2 = add_param("itm.b2", "itm_head", {1, 1}, 0.0);

    tau_raw_ = add_param("loss.tau_raw", "loss_scalars", {1}, 0.0, false, std::log(cfg_.tau_init));
    for (const auto& term : cfg_.learnable_loss_terms)
        loss_w_[term] = add_param("loss.w_" + term, "loss_scalars", {1}, 0.0, false);
}

int Model::prefix_depth() const {
    if (interleave_.empty()) return cfg_.text.num_layers;  // none / pooled_only
    return interleave_.front();
}

Value Model::pooled_head(const Value& h, const std::vector<uint8_t>& mask, const Value& w, const Value& b) const {
    return l2_normalize_rows(linear(masked_mean_rows(h, mask), w, &b));
}

UnimodalEncoding Model::text_prefix(const std::vector<int>& token_ids) const {
    UnimodalEncoding out;
    out.states.valid_mask = text_valid_mask(token_ids);
    out.states.layers.push_back(embed_text(token_ids, text_, cfg_.text));
    const int p = prefix_depth();
    for (int l = 1; l <= p; ++l)
        out.states.layers.push_back(
            encoder_layer(out.states.layers.back(), text_.layers[static_cast<size_t>(l - 1)], out.states.valid_mask));
    out.pooled_u = pooled_head(out.states.layers.back(), out.states.valid_mask, head_uni_t_w, head_uni_t_b);
    return out;
}

UnimodalEncoding Model::vision_prefix(const Tensor& patches) const {
    UnimodalEncoding out;
    out.states.valid_mask.assign(static_cast<size_t>(patches.rows()), 1);
    out.states.layers.push_back(embed_patches(make_input(patches), vision_, cfg_.vision));
    const int p = prefix_depth();
    for (int l = 1; l <= p; ++l)
        out.states.layers.push_back(encoder_layer(out.states.layers.back(), vision_.layers[static_cast<size_t>(l - 1)],
                                                  out.states.valid_mask));
    out.pooled_u = pooled_head(out.states.layers.back(), out.states.valid_mask, head_uni_v_w, head_uni_v_b);
    return out;
}

FusedEncoding Model::fuse(const UnimodalEncoding& vis, const UnimodalEncoding& txt) const {
    const int L = cfg_.text.num_layers;
    const double drop = training_ ? cfg_.dropout : 0.0;
    Rng* drng = training_ ? &dropout_rng_ : nullptr;

    FusedEncoding out;
    out.text_layers = txt.states.layers;
    out.vision_layers = vis.states.layers;
    out.text_mask = txt.states.valid_mask;
    out.cycle_text_mask = txt.states.valid_mask;

    const FusionVariant fv = cfg_.bridge.fusion_variant;
    if (fv == FusionVariant::kNone || fv == FusionVariant::kPooledOnly) {
        if (static_cast<int>(out.text_layers.size()) != L + 1)
            throw ContractError("fuse: prefix must cover the full stack for this variant");
        Value pooled_t = masked_mean_rows(out.text_layers.back(), out.text_mask);
        Value pooled_v = masked_mean_rows(out.vision_layers.back(), vis.states.valid_mask);
        if (fv == FusionVariant::kPooledOnly) {
            std::vector<uint8_t> one(1, 1);
            out.cycle_text_mask = one;
            InteractionBlockOutput b = interaction_block(pooled_v, pooled_t, blocks_.front(), one,
                                                         /*with_self=*/false, &cross_calls_, drop, drng);
            pooled_v = b.h_v;
            pooled_t = b.h_t;
            b.record.encoder_layer = 0;
            out.records.push_back(std::move(b.record));
        }
        out.pooled_fused_t = l2_normalize_rows(linear(pooled_t, head_fused_t_w, &head_fused_t_b));
        out.pooled_fused_v = l2_normalize_rows(linear(pooled_v, head_fused_v_w, &head_fused_v_b));
        return out;
    }

    // cross_only / self_plus_cross: interleave blocks with the top layers.
    const bool with_self = fv == FusionVariant::kSelfPlusCross;
    const int p = prefix_depth();
    if (static_cast<int>(out.text_layers.size()) != p + 1)
        throw ContractError("fuse: prefix depth mismatch");

    Value h_t = out.text_layers.back();
    Value h_v = out.vision_layers.back();
    size_t k = 0;

    auto apply_block = [&](int layer_idx) {
        InteractionBlockOutput b = interaction_block(h_v, h_t, blocks_[k], out.text_mask, with_self, &cross_calls_,
                                                     drop, drng);
        h_v = b.h_v;
        h_t = b.h_t;
        b.record.encoder_layer = layer_idx;
        out.records.push_back(std::move(b.record));
        out.text_layers.back() = h_t;
        out.vision_layers.back() = h_v;
        ++k;
    };

    apply_block(interleave_[0]);
    for (int l = p + 1; l <= L; ++l) {
        h_t = encoder_layer(h_t, text_.layers[static_cast<size_t>(l - 1)], out.text_mask);
        h_v = encoder_layer(h_v, vision_.layers[static_cast<size_t>(l - 1)], vis.states.valid_mask);
        out.text_layers.push_back(h_t);
        out.vision_layers.push_back(h_v);
        if (k < interleave_.size() && interleave_[k] == l) apply_block(l);
    }

    out.pooled_fused_t = pooled_head(h_t, out.text_mask, head_fused_t_w, head_fused_t_b);
    out.pooled_fused_v = pooled_head(h_v, vis.states.valid_mask, head_fused_v_w, head_fused_v_b);
    return out;
}

HiddenStates Model::plain_encode_text(const std::vector<int>& token_ids) const {
    return encode_text(token_ids, text_, cfg_.text);
}

HiddenStates Model::plain_encode_vision(const Tensor& patches) const {
    return encode_patches(make_input(patches), vision_, cfg_.vision);
}

Value Model::itm_match_logit(const Value& p_t, const Value& p_v) const { return itm_logit(p_t, p_v, itm_); }

}  // namespace bridge
