#include "bridge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "bridge/binio.hpp"

namespace bridge {

int ConceptSpec::words_per_concept() const {
    return (vocab_size - 1 - num_function_words) / num_concepts;
}

std::vector<int> ConceptSpec::concept_word_ids(int concept_id) const {
    const int k = words_per_concept();
    std::vector<int> ids(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) ids[static_cast<size_t>(i)] = 1 + concept_id * k + i;
    return ids;
}

std::vector<int> ConceptSpec::function_word_ids() const {
    std::vector<int> ids;
    for (int i = vocab_size - num_function_words; i < vocab_size; ++i) ids.push_back(i);
    return ids;
}

void ConceptSpec::validate() const {
    if (num_concepts < 1) throw ConfigError("data: num_concepts must be >= 1");
    if (num_concepts * 4 > vocab_size)
        throw ConfigError("data: num_concepts must not exceed vocab_size/4");
    if (words_per_concept() < 3)
        throw ConfigError("data: vocabulary too small to give each concept at least 3 dedicated words");
    if (max_concepts_per_example < 1 || max_concepts_per_example > num_concepts)
        throw ConfigError("data: concepts per example must be in [1, num_concepts]");
    if (caption_min < max_concepts_per_example)
        throw ConfigError("data: caption_min must fit one word for every concept in an example");
    if (caption_max < caption_min) throw ConfigError("data: caption_max < caption_min");
    if (noise_sigma < 0.0) throw ConfigError("data: noise_sigma must be nonnegative");
    if (function_word_rate < 0.0 || function_word_rate >= 1.0)
        throw ConfigError("data: function_word_rate must be in [0,1)");
    if (max_concepts_per_example * patches_per_concept() > patches_per_image)
        throw ConfigError("data: concept signatures do not fit in the patch grid");
    if (patch_dim < 1 || patches_per_image < 1) throw ConfigError("data: bad patch geometry");
}

namespace {

PairedExample make_example(const ConceptSpec& spec, const std::vector<Tensor>& signatures, uint64_t seed,
                           int first_concept) {
    Rng rng(seed);
    PairedExample ex;

    const int m = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.max_concepts_per_example)));
    std::vector<int> pool;
    for (int c = 0; c < spec.num_concepts; ++c)
        if (c != first_concept) pool.push_back(c);
    rng.shuffle(pool);
    ex.concepts.push_back(first_concept);
    for (int i = 0; i < m - 1; ++i) ex.concepts.push_back(pool[static_cast<size_t>(i)]);
    std::sort(ex.concepts.begin(), ex.concepts.end());

    // image: each concept stamps its signature onto a few disjoint patches
    ex.image = Tensor({spec.patches_per_image, spec.patch_dim});
    std::vector<int> free_patches(static_cast<size_t>(spec.patches_per_image));
    for (int i = 0; i < spec.patches_per_image; ++i) free_patches[static_cast<size_t>(i)] = i;
    rng.shuffle(free_patches);
    size_t next_free = 0;
    for (int c : ex.concepts) {
        for (int k = 0; k < spec.patches_per_concept(); ++k) {
            const int p = free_patches[next_free++];
            for (int j = 0; j < spec.patch_dim; ++j)
                ex.image.at(p, j) += signatures[static_cast<size_t>(c)].at(0, j);
        }
    }
    if (spec.noise_sigma > 0.0)
        for (size_t i = 0; i < ex.image.size(); ++i) ex.image.at(i) += rng.normal(0.0, spec.noise_sigma);

    // caption: one guaranteed word per concept, the rest drawn from the
    // example's concept pools, diluted with shared function words
    const int len = spec.caption_min +
                    static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.caption_max - spec.caption_min + 1)));
    int n_func = static_cast<int>(std::lround(spec.function_word_rate * len));
    n_func = std::min(n_func, len - static_cast<int>(ex.concepts.size()));
    const int n_concept_words = len - n_func;

    const std::vector<int> func_ids = spec.function_word_ids();
    std::vector<int> words;
    for (int c : ex.concepts) {
        const auto ids = spec.concept_word_ids(c);
        words.push_back(ids[rng.uniform_index(ids.size())]);
    }
    for (int i = static_cast<int>(ex.concepts.size()); i < n_concept_words; ++i) {
        const int c = ex.concepts[rng.uniform_index(ex.concepts.size())];
        const auto ids = spec.concept_word_ids(c);
        words.push_back(ids[rng.uniform_index(ids.size())]);
    }
    for (int i = 0; i < n_func; ++i) words.push_back(func_ids[rng.uniform_index(func_ids.size())]);
    rng.shuffle(words);
    ex.caption = std::move(words);
    return ex;
}

}  // namespace

uint64_t example_content_hash(const PairedExample& ex) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (size_t i = 0; i < ex.image.size(); ++i) {
        uint64_t bits;
        const double d = ex.image.at(i);
        static_assert(sizeof(double) == sizeof(uint64_t));
        std::memcpy(&bits, &d, 8);
        mix(bits);
    }
    mix(0x5eedULL);
    for (int id : ex.caption) mix(static_cast<uint64_t>(id) + 1);
    return h;
}

Dataset generate_dataset(const ConceptSpec& spec, uint64_t seed, int size) {
    spec.validate();
    const int val_n = size / 10;
    const int test_n = size / 10;
    const int train_n = size - val_n - test_n;
    if (train_n < 1) throw ConfigError("data: dataset too small to split");
    if (val_n < spec.num_concepts || test_n < spec.num_concepts)
        throw ConfigError("data: splits too small for every concept to appear in each (need size >= 10*C)");

    Dataset ds;
    ds.spec = spec;
    ds.seed = seed;

    Rng sig_rng(derive_seed(seed, 0x516));
    for (int c = 0; c < spec.num_concepts; ++c) {
        Tensor s({1, spec.patch_dim});
        for (int j = 0; j < spec.patch_dim; ++j) s.at(0, j) = sig_rng.normal(0.0, 1.0);
        ds.signatures.push_back(std::move(s));
    }

    std::unordered_set<uint64_t> seen;
    auto gen_unique = [&](int index) {
        // the first concept cycles through all of them, so any contiguous
        // run of >= C examples covers every concept
        const int first = index % spec.num_concepts;
        for (uint64_t attempt = 0; attempt < 100; ++attempt) {
            PairedExample ex = make_example(spec, ds.signatures,
                                            derive_seed(seed, static_cast<uint64_t>(index) * 101 + attempt), first);
            const uint64_t h = example_content_hash(ex);
            if (seen.insert(h).second) return ex;
        }
        throw ContractError("data: could not generate a content-unique example; spec too constrained");
    };

    for (int i = 0; i < size; ++i) {
        PairedExample ex = gen_unique(i);
        if (i < train_n)
            ds.train.push_back(std::move(ex));
        else if (i < train_n + val_n)
            ds.val.push_back(std::move(ex));
        else
            ds.test.push_back(std::move(ex));
    }
    return ds;
}

std::vector<Batch> batch_iterator(const std::vector<PairedExample>& split, int batch_size, uint64_t seed, int epoch) {
    if (batch_size < 1 || batch_size > static_cast<int>(split.size()))
        throw ContractError("batch_iterator: batch size must be in [1, split size]");
    std::vector<int> order(split.size());
    for (size_t i = 0; i < split.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(seed, 0xBA7C4 + static_cast<uint64_t>(epoch)));
    rng.shuffle(order);

    std::vector<Batch> batches;
    const int n_batches = static_cast<int>(split.size()) / batch_size;
    for (int b = 0; b < n_batches; ++b) {
        Batch batch;
        int max_len = 0;
        for (int k = 0; k < batch_size; ++k) {
            const int idx = order[static_cast<size_t>(b * batch_size + k)];
            batch.indices.push_back(idx);
            batch.examples.push_back(&split[static_cast<size_t>(idx)]);
            max_len = std::max(max_len, static_cast<int>(split[static_cast<size_t>(idx)].caption.size()));
        }
        for (const PairedExample* ex : batch.examples) {
            std::vector<int> padded = ex->caption;
            padded.resize(static_cast<size_t>(max_len), 0);
            std::vector<uint8_t> mask(static_cast<size_t>(max_len), 0);
            for (size_t i = 0; i < ex->caption.size(); ++i) mask[i] = 1;
            batch.captions.push_back(std::move(padded));
            batch.masks.push_back(std::move(mask));
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

namespace {
constexpr uint32_t kDatasetMagic = 0x44445242u;  // "BRDD" little-endian
constexpr uint32_t kDatasetVersion = 1;

// images ship as raw f64 bits so a loaded dump replays runs bit-exactly
uint64_t double_bits(double v) {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    return b;
}
double bits_double(uint64_t b) {
    double v;
    std::memcpy(&v, &b, 8);
    return v;
}

void put_example(std::vector<uint8_t>& buf, const PairedExample& ex) {
    binio::put_u32(buf, static_cast<uint32_t>(ex.image.rows()));
    binio::put_u32(buf, static_cast<uint32_t>(ex.image.cols()));
    for (size_t i = 0; i < ex.image.size(); ++i) binio::put_u64(buf, double_bits(ex.image.at(i)));
    binio::put_u32(buf, static_cast<uint32_t>(ex.caption.size()));
    for (int id : ex.caption) binio::put_u32(buf, static_cast<uint32_t>(id));
    binio::put_u32(buf, static_cast<uint32_t>(ex.concepts.size()));
    for (int c : ex.concepts) binio::put_u32(buf, static_cast<uint32_t>(c));
}

PairedExample get_example(binio::Reader& r) {
    PairedExample ex;
    const int rows = static_cast<int>(r.u32());
    const int cols = static_cast<int>(r.u32());
    ex.image = Tensor({rows, cols});
    for (size_t i = 0; i < ex.image.size(); ++i) ex.image.at(i) = bits_double(r.u64());
    const uint32_t cap = r.u32();
    for (uint32_t i = 0; i < cap; ++i) ex.caption.push_back(static_cast<int>(r.u32()));
    const uint32_t nc = r.u32();
    for (uint32_t i = 0; i < nc; ++i) ex.concepts.push_back(static_cast<int>(r.u32()));
    return ex;
}

}  // namespace

void dump_dataset(const Dataset& ds, const std::string& path) {
    std::vector<uint8_t> payload;
    const ConceptSpec& s = ds.spec;
    for (int v : {s.num_concepts, s.patches_per_image, s.patch_dim, s.vocab_size, s.caption_min, s.caption_max,
                  s.max_concepts_per_example, s.num_function_words})
        binio::put_u32(payload, static_cast<uint32_t>(v));
    binio::put_f32(payload, static_cast<float>(s.noise_sigma));
    binio::put_f32(payload, static_cast<float>(s.function_word_rate));
    binio::put_u64(payload, ds.seed);
    binio::put_u32(payload, static_cast<uint32_t>(ds.signatures.size()));
    for (const Tensor& sig : ds.signatures)
        for (size_t i = 0; i < sig.size(); ++i) binio::put_u64(payload, double_bits(sig.at(i)));
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        binio::put_u32(payload, static_cast<uint32_t>(split->size()));
        for (const auto& ex : *split) put_example(payload, ex);
    }

    std::vector<uint8_t> out;
    binio::put_u32(out, kDatasetMagic);
    binio::put_u32(out, kDatasetVersion);
    binio::put_u64(out, payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
    binio::put_u32(out, binio::crc32(payload.data(), payload.size()));
    binio::write_file(path, out);
}

Dataset load_dataset(const std::string& path) {
    const std::vector<uint8_t> bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size());
    if (r.u32() != kDatasetMagic) throw IoError("not a dataset dump: " + path);
    const uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw VersionError("dataset version " + std::to_string(version) + " != supported " +
                           std::to_string(kDatasetVersion));
    const uint64_t n = r.u64();
    if (r.remaining() < n + 4) throw IoError("truncated dataset dump");
    const uint32_t want_crc = binio::crc32(bytes.data() + r.pos(), n);
    binio::Reader rc(bytes.data() + bytes.size() - 4, 4);
    if (rc.u32() != want_crc) throw ChecksumError("dataset dump checksum mismatch");

    Dataset ds;
    ConceptSpec& s = ds.spec;
    s.num_concepts = static_cast<int>(r.u32());
    s.patches_per_image = static_cast<int>(r.u32());
    s.patch_dim = static_cast<int>(r.u32());
    s.vocab_size = static_cast<int>(r.u32());
    s.caption_min = static_cast<int>(r.u32());
    s.caption_max = static_cast<int>(r.u32());
    s.max_concepts_per_example = static_cast<int>(r.u32());
    s.num_function_words = static_cast<int>(r.u32());
    s.noise_sigma = static_cast<double>(r.f32());
    s.function_word_rate = static_cast<double>(r.f32());
    ds.seed = r.u64();
    const uint32_t n_sig = r.u32();
    for (uint32_t c = 0; c < n_sig; ++c) {
        Tensor sig({1, s.patch_dim});
        for (size_t i = 0; i < sig.size(); ++i) sig.at(i) = bits_double(r.u64());
        ds.signatures.push_back(std::move(sig));
    }
    for (auto* split : {&ds.train, &ds.val, &ds.test}) {
        const uint32_t cnt = r.u32();
        for (uint32_t i = 0; i < cnt; ++i) split->push_back(get_example(r));
    }
    return ds;
}

}  // namespace bridge
