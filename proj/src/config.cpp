#include "bridge/config.hpp"

#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace bridge {

namespace {

struct KeyInfo {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (...) {
        throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (...) {
        throw ConfigError("key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (...) {
        throw ConfigError("key '" + key + "': expected real number, got '" + v + "'");
    }
}

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const std::vector<KeyInfo>& schema() {
    auto I = [](const char* name, int RunConfig::*member) {
        return KeyInfo{name,
                       [name, member](RunConfig& c, const std::string& v) { c.*member = parse_int(name, v); },
                       [member](const RunConfig& c) { return std::to_string(c.*member); }};
    };
    auto R = [](const char* name, double RunConfig::*member) {
        return KeyInfo{name,
                       [name, member](RunConfig& c, const std::string& v) { c.*member = parse_real(name, v); },
                       [member](const RunConfig& c) { return fmt_real(c.*member); }};
    };
    auto S = [](const char* name, std::string RunConfig::*member) {
        return KeyInfo{name, [member](RunConfig& c, const std::string& v) { c.*member = v; },
                       [member](const RunConfig& c) { return c.*member; }};
    };
    static const std::vector<KeyInfo> kSchema = {
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        S("out", &RunConfig::out),
        I("data.concepts", &RunConfig::data_concepts),
        I("data.size", &RunConfig::data_size),
        R("data.noise_sigma", &RunConfig::data_noise_sigma),
        I("data.m_max", &RunConfig::data_m_max),
        I("data.vocab_size", &RunConfig::data_vocab_size),
        I("data.patch_dim", &RunConfig::data_patch_dim),
        I("data.patches", &RunConfig::data_patches),
        I("data.caption_min", &RunConfig::data_caption_min),
        I("data.caption_max", &RunConfig::data_caption_max),
        R("data.function_word_rate", &RunConfig::data_function_word_rate),
        I("encoder.layers", &RunConfig::enc_layers),
        I("encoder.d_v", &RunConfig::enc_d_v),
        I("encoder.d_t", &RunConfig::enc_d_t),
        I("encoder.heads", &RunConfig::enc_heads),
        I("encoder.ffn_mult", &RunConfig::enc_ffn_mult),
        I("encoder.max_positions", &RunConfig::enc_max_positions),
        I("model.d_e", &RunConfig::model_d_e),
        S("bridge.fusion_variant", &RunConfig::bridge_fusion_variant),
        I("bridge.q", &RunConfig::bridge_q),
        I("bridge.d_s", &RunConfig::bridge_d_s),
        I("bridge.h_s", &RunConfig::bridge_h_s),
        S("bridge.placement", &RunConfig::bridge_placement),
        R("bridge.gate_init", &RunConfig::bridge_gate_init),
        S("loss.enabled", &RunConfig::loss_enabled),
        S("loss.mode", &RunConfig::loss_mode),
        R("loss.w_itc_uni", &RunConfig::loss_w_itc_uni),
        R("loss.w_itc_cross", &RunConfig::loss_w_itc_cross),
        R("loss.w_itm", &RunConfig::loss_w_itm),
        R("loss.w_cyc", &RunConfig::loss_w_cyc),
        R("loss.tau_init", &RunConfig::loss_tau_init),
        S("loss.mlm", &RunConfig::loss_mlm),
        S("loss.mim", &RunConfig::loss_mim),
        I("train.batch_size", &RunConfig::train_batch_size),
        R("train.dropout", &RunConfig::train_dropout),
        R("train.weight_decay", &RunConfig::train_weight_decay),
        R("train.clip_norm", &RunConfig::train_clip_norm),
        I("stages.A.epochs", &RunConfig::stages_a_epochs),
        R("stages.A.lr", &RunConfig::stages_a_lr),
        I("stages.B.epochs", &RunConfig::stages_b_epochs),
        R("stages.B.lr", &RunConfig::stages_b_lr),
        I("stages.B.k", &RunConfig::stages_b_k),
        I("stages.C.epochs", &RunConfig::stages_c_epochs),
        R("stages.C.lr", &RunConfig::stages_c_lr),
    };
    return kSchema;
}

const KeyInfo* find_key(const std::string& key) {
    for (const auto& k : schema())
        if (key == k.name) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    const KeyInfo* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    k->set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
    const KeyInfo* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    return k->get(*this);
}

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> out;
    for (const auto& k : schema()) out.push_back(k.name);
    return out;
}

std::string RunConfig::serialize() const {
    std::string s;
    for (const auto& k : schema()) s += std::string(k.name) + " = " + k.get(*this) + "\n";
    return s;
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

RunConfig parse_config_file(const std::string& path, RunConfig base) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

ConceptSpec RunConfig::concept_spec() const {
    ConceptSpec s;
    s.num_concepts = data_concepts;
    s.patches_per_image = data_patches;
    s.patch_dim = data_patch_dim;
    s.vocab_size = data_vocab_size;
    s.caption_min = data_caption_min;
    s.caption_max = data_caption_max;
    s.noise_sigma = data_noise_sigma;
    s.max_concepts_per_example = data_m_max;
    s.function_word_rate = data_function_word_rate;
    return s;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.text.num_layers = enc_layers;
    mc.text.width = enc_d_t;
    mc.text.heads = enc_heads;
    mc.text.ffn_mult = enc_ffn_mult;
    mc.text.max_positions = enc_max_positions;
    mc.text.vocab_size = data_vocab_size;
    mc.vision = mc.text;
    mc.vision.width = enc_d_v;
    mc.vision.max_positions = std::max(enc_max_positions, data_patches);
    mc.vision.patch_dim = data_patch_dim;

    mc.bridge.fusion_variant = fusion_variant_from_string(bridge_fusion_variant);
    mc.bridge.q = bridge_q;
    mc.bridge.d_s = bridge_d_s;
    mc.bridge.h_s = bridge_h_s;
    mc.bridge.gate_init = bridge_gate_init;
    if (bridge_placement == "early" || bridge_placement == "middle" || bridge_placement == "late" ||
        bridge_placement == "staggered") {
        mc.bridge.placement = placement_mode_from_string(bridge_placement);
    } else {
        mc.bridge.placement = PlacementMode::kExplicit;
        for (const auto& part : split_commas(bridge_placement))
            mc.bridge.explicit_indices.push_back(parse_int("bridge.placement", part));
        if (mc.bridge.explicit_indices.empty())
            throw ConfigError("bridge.placement: expected a mode name or a comma-separated index list");
    }

    mc.embed_dim = model_d_e;
    mc.dropout = train_dropout;
    mc.tau_init = loss_tau_init;
    if (loss_mode == "learnable") mc.learnable_loss_terms = split_commas(loss_enabled);
    return mc;
}

LossSetup RunConfig::loss_setup() const {
    LossSetup ls;
    ls.enabled = split_commas(loss_enabled);
    if (loss_mode == "fixed")
        ls.mode = LossWeightMode::kFixed;
    else if (loss_mode == "learnable")
        ls.mode = LossWeightMode::kLearnable;
    else
        throw ConfigError("loss.mode must be 'fixed' or 'learnable'");
    ls.fixed_weights = {{"itc_uni", loss_w_itc_uni},
                        {"itc_cross", loss_w_itc_cross},
                        {"itm", loss_w_itm},
                        {"cyc", loss_w_cyc}};
    return ls;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.seed = seed;
    tc.batch_size = train_batch_size;
    tc.clip_norm = train_clip_norm;
    tc.adam.weight_decay = train_weight_decay;
    tc.loss = loss_setup();
    tc.stage_a = {'A', stages_a_epochs, stages_a_lr, 0};
    tc.stage_b = {'B', stages_b_epochs, stages_b_lr, stages_b_k};
    tc.stage_c = {'C', stages_c_epochs, stages_c_lr, stages_b_k};
    return tc;
}

void RunConfig::validate() const {
    concept_spec().validate();
    const ModelConfig mc = model_config();
    mc.validate();
    const LossSetup ls = loss_setup();

    if (loss_mlm != "off") throw ConfigError("loss.mlm: only 'off' is accepted in this version");
    if (loss_mim != "off") throw ConfigError("loss.mim: only 'off' is accepted in this version");
    if (ls.enabled.empty()) throw ConfigError("loss.enabled: at least one loss component is required");
    for (const auto& term : ls.enabled) {
        bool known = false;
        for (const auto& k : kAllLossTerms) known = known || k == term;
        if (!known) throw ConfigError("loss.enabled: unknown term '" + term + "'");
        if (ls.mode == LossWeightMode::kFixed && ls.fixed_weights.at(term) <= 0.0)
            throw ConfigError("loss weight for enabled term '" + term + "' must be positive");
    }
    if (mc.bridge.fusion_variant == FusionVariant::kNone)
        for (const auto& term : ls.enabled)
            if (term == "cyc")
                throw ConfigError("loss.enabled: cycle loss needs attention records; disable it for fusion 'none'");
    bool itm_on = false;
    for (const auto& term : ls.enabled) itm_on = itm_on || term == "itm";
    if (itm_on && train_batch_size < 2) throw ConfigError("train.batch_size must be >= 2 when itm is enabled");

    if (data_size < 3 * train_batch_size) throw ConfigError("data.size must be at least 3 * train.batch_size");
    if (data_caption_max > enc_max_positions)
        throw ConfigError("encoder.max_positions must cover data.caption_max");
    if (train_batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (stages_a_epochs < 0 || stages_b_epochs < 0 || stages_c_epochs < 0)
        throw ConfigError("stage epochs must be nonnegative");
    if (stages_a_lr <= 0 || stages_b_lr <= 0 || stages_c_lr <= 0) throw ConfigError("stage lr must be positive");
    if (stages_b_k < 0 || stages_b_k > enc_layers) throw ConfigError("stages.B.k must be in [0, encoder.layers]");
    if (train_clip_norm < 0) throw ConfigError("train.clip_norm must be nonnegative (0 disables clipping)");
}

DirLock::DirLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir + "/.lock";
    for (int attempt = 0; attempt < 2; ++attempt) {
        std::ifstream existing(path_);
        if (existing) {
            long pid = 0;
            existing >> pid;
            existing.close();
            if (pid > 0 && kill(static_cast<pid_t>(pid), 0) == 0)
                throw ConfigError("output directory '" + dir + "' is locked by running process " +
                                  std::to_string(pid));
            std::remove(path_.c_str());  // stale lock from a dead process
        }
        std::ofstream f(path_);
        if (!f) throw IoError("cannot create lock file in '" + dir + "'");
        f << getpid() << "\n";
        f.close();
        held_ = true;
        return;
    }
}

DirLock::~DirLock() {
    if (held_) std::remove(path_.c_str());
}

}  // namespace bridge
