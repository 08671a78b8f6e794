#pragma once

#include <string>
#include <vector>

#include "bridge/data.hpp"
#include "bridge/training.hpp"

namespace bridge {

// Every knob of the experiment, addressable as flat `dotted.key = value`
// lines. Flag overrides beat file values beat defaults; unknown keys are
// rejected.
struct RunConfig {
    uint64_t seed = 7;
    std::string out = "runs/default";

    int data_concepts = 16;
    int data_size = 640;
    double data_noise_sigma = 0.5;
    int data_m_max = 3;
    int data_vocab_size = 64;
    int data_patch_dim = 12;
    int data_patches = 16;
    int data_caption_min = 4;
    int data_caption_max = 12;
    double data_function_word_rate = 0.3;

    int enc_layers = 4;
    int enc_d_v = 64;
    int enc_d_t = 64;
    int enc_heads = 4;
    int enc_ffn_mult = 4;
    int enc_max_positions = 16;

    int model_d_e = 32;

    std::string bridge_fusion_variant = "cross_only";
    int bridge_q = 2;
    int bridge_d_s = 64;
    int bridge_h_s = 4;
    std::string bridge_placement = "late";  // early|middle|late|staggered or explicit "3,4"
    double bridge_gate_init = -4.0;

    std::string loss_enabled = "itc_uni,itc_cross,itm,cyc";
    std::string loss_mode = "fixed";  // fixed|learnable
    double loss_w_itc_uni = 1.0;
    double loss_w_itc_cross = 1.0;
    double loss_w_itm = 0.5;
    double loss_w_cyc = 0.25;
    double loss_tau_init = 0.07;
    std::string loss_mlm = "off";  // reserved; only "off" is accepted
    std::string loss_mim = "off";

    int train_batch_size = 32;
    double train_dropout = 0.1;
    double train_weight_decay = 0.01;
    double train_clip_norm = 1.0;

    int stages_a_epochs = 5;
    double stages_a_lr = 1e-3;
    int stages_b_epochs = 10;
    double stages_b_lr = 3e-4;
    int stages_b_k = 2;
    int stages_c_epochs = 0;
    double stages_c_lr = 3e-4;

    void set(const std::string& key, const std::string& value);  // ConfigError on unknown key / bad value
    std::string get(const std::string& key) const;
    static std::vector<std::string> keys();
    std::string serialize() const;  // one `key = value` line per key, fixed order
    void validate() const;

    ModelConfig model_config() const;
    ConceptSpec concept_spec() const;
    TrainConfig train_config() const;
    LossSetup loss_setup() const;
};

// Parses `dotted.key = value` lines; '#' starts a comment. Later lines win.
RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig());
RunConfig parse_config_file(const std::string& path, RunConfig base = RunConfig());

// Exclusive ownership of an output directory via a pid lock file. A lock
// held by a dead process is reclaimed.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    bool held_ = false;
};

}  // namespace bridge
