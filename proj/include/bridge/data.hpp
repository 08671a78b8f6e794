#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bridge/rng.hpp"
#include "bridge/tensor.hpp"

namespace bridge {

// Procedural paired-modality task. Latent concepts render as additive patch
// signatures on the image side and as dedicated word ids on the caption
// side; noise_sigma and function_word_rate are the difficulty dials.
struct ConceptSpec {
    int num_concepts = 16;
    int patches_per_image = 16;
    int patch_dim = 12;
    int vocab_size = 64;  // ids 1..vocab-1; 0 is the pad id
    int caption_min = 4;
    int caption_max = 12;
    double noise_sigma = 0.5;
    int max_concepts_per_example = 3;  // m
    double function_word_rate = 0.3;

    int num_function_words = 3;  // top ids are shared concept-neutral words
    int patches_per_concept() const { return std::max(1, patches_per_image / 4); }
    int words_per_concept() const;
    std::vector<int> concept_word_ids(int concept_id) const;
    std::vector<int> function_word_ids() const;
    void validate() const;
};

struct PairedExample {
    Tensor image;               // [patches_per_image, patch_dim]
    std::vector<int> caption;   // unpadded token ids, no pad id inside
    std::vector<int> concepts;  // ground-truth concept ids (evaluation only)
};

struct Dataset {
    ConceptSpec spec;
    uint64_t seed = 0;
    std::vector<Tensor> signatures;  // per concept, [1, patch_dim]
    std::vector<PairedExample> train, val, test;
};

// Deterministic under (spec, seed). Splits are 80/10/10 (rounding down,
// remainder to train), content-disjoint, and every concept appears in every
// split. `size` is the total example count.
Dataset generate_dataset(const ConceptSpec& spec, uint64_t seed, int size);

struct Batch {
    std::vector<int> indices;                 // positions within the split
    std::vector<std::vector<int>> captions;   // right-padded to the batch max length
    std::vector<std::vector<uint8_t>> masks;  // 1 = valid token
    std::vector<const PairedExample*> examples;
};

// Epoch-seeded shuffle; the final short batch is dropped.
std::vector<Batch> batch_iterator(const std::vector<PairedExample>& split, int batch_size, uint64_t seed, int epoch);

// Content hash for the leakage check (image bytes + caption ids).
uint64_t example_content_hash(const PairedExample& ex);

// Binary dump for exact-run sharing; same framing as checkpoints
// (little-endian, CRC32 over the payload).
void dump_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace bridge
