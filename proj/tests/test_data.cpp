#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "bridge/binio.hpp"
#include "bridge/data.hpp"

using namespace bridge;

namespace {

ConceptSpec small_spec() {
    ConceptSpec s;
    s.num_concepts = 8;
    s.vocab_size = 64;
    s.noise_sigma = 0.0;
    s.max_concepts_per_example = 2;
    return s;
}

}  // namespace

TEST_CASE("noiseless single-concept examples share signature rows up to position") {
    ConceptSpec spec = small_spec();
    spec.max_concepts_per_example = 1;
    Dataset ds = generate_dataset(spec, 5, 160);
    // find two train examples with the same concept
    const PairedExample* a = nullptr;
    const PairedExample* b = nullptr;
    for (size_t i = 0; i < ds.train.size() && !b; ++i)
        for (size_t j = i + 1; j < ds.train.size(); ++j)
            if (ds.train[i].concepts == ds.train[j].concepts) {
                a = &ds.train[i];
                b = &ds.train[j];
                break;
            }
    REQUIRE(a);
    // multiset of row contents must match: same signature, different slots
    auto rows = [&](const PairedExample& ex) {
        std::multiset<std::vector<double>> out;
        for (int i = 0; i < ex.image.rows(); ++i) {
            std::vector<double> row(static_cast<size_t>(ex.image.cols()));
            for (int j = 0; j < ex.image.cols(); ++j) row[static_cast<size_t>(j)] = ex.image.at(i, j);
            out.insert(std::move(row));
        }
        return out;
    };
    CHECK(rows(*a) == rows(*b));
}

TEST_CASE("generation replays bitwise under the same seed") {
    ConceptSpec spec = small_spec();
    spec.noise_sigma = 0.7;
    Dataset a = generate_dataset(spec, 99, 120);
    Dataset b = generate_dataset(spec, 99, 120);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].caption == b.train[i].caption);
        CHECK(a.train[i].image.vec() == b.train[i].image.vec());
    }
    Dataset c = generate_dataset(spec, 100, 120);
    CHECK(c.train[0].image.vec() != a.train[0].image.vec());
}

TEST_CASE("splits honor the 80/10/10 ratio with remainder to train") {
    Dataset ds = generate_dataset(small_spec(), 1, 163);
    CHECK(static_cast<int>(ds.val.size()) == 16);
    CHECK(static_cast<int>(ds.test.size()) == 16);
    CHECK(static_cast<int>(ds.train.size()) == 163 - 32);
}

TEST_CASE("every concept appears in every split") {
    ConceptSpec spec = small_spec();
    Dataset ds = generate_dataset(spec, 2, 160);
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        std::set<int> seen;
        for (const auto& ex : *split)
            for (int c : ex.concepts) seen.insert(c);
        CHECK(static_cast<int>(seen.size()) == spec.num_concepts);
    }
}

TEST_CASE("no content pair leaks across splits") {
    ConceptSpec spec = small_spec();  // noiseless: collisions would be likely if unguarded
    spec.max_concepts_per_example = 1;
    Dataset ds = generate_dataset(spec, 3, 200);
    std::unordered_set<uint64_t> hashes;
    size_t total = 0;
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& ex : *split) {
            hashes.insert(example_content_hash(ex));
            ++total;
        }
    CHECK(hashes.size() == total);
}

TEST_CASE("captions draw only from own concepts plus function words") {
    ConceptSpec spec = small_spec();
    Dataset ds = generate_dataset(spec, 4, 160);
    const auto func = spec.function_word_ids();
    for (const auto& ex : ds.train) {
        std::set<int> allowed(func.begin(), func.end());
        for (int c : ex.concepts)
            for (int id : spec.concept_word_ids(c)) allowed.insert(id);
        for (int id : ex.caption) {
            CHECK(id != 0);
            CHECK(allowed.count(id) == 1);
        }
        CHECK(static_cast<int>(ex.caption.size()) >= spec.caption_min);
        CHECK(static_cast<int>(ex.caption.size()) <= spec.caption_max);
        // every concept of the example is mentioned at least once
        for (int c : ex.concepts) {
            bool mentioned = false;
            for (int id : ex.caption)
                for (int cid : spec.concept_word_ids(c)) mentioned = mentioned || id == cid;
            CHECK(mentioned);
        }
    }
}

TEST_CASE("spec validation rejects inconsistent settings") {
    ConceptSpec s = small_spec();
    s.num_concepts = 17;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.max_concepts_per_example = 9;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.caption_min = 1;
    s.max_concepts_per_example = 2;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.noise_sigma = -1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(generate_dataset(small_spec(), 1, 30), ConfigError);
}

TEST_CASE("batch iterator covers the split in epoch-seeded order") {
    Dataset ds = generate_dataset(small_spec(), 6, 120);
    auto batches = batch_iterator(ds.val, static_cast<int>(ds.val.size()), 7, 0);
    REQUIRE(batches.size() == 1);

    auto b1 = batch_iterator(ds.train, 16, 7, 3);
    auto b2 = batch_iterator(ds.train, 16, 7, 3);
    REQUIRE(b1.size() == b2.size());
    CHECK(b1.size() == ds.train.size() / 16);
    for (size_t i = 0; i < b1.size(); ++i) CHECK(b1[i].indices == b2[i].indices);
    auto b3 = batch_iterator(ds.train, 16, 7, 4);
    CHECK(b3[0].indices != b1[0].indices);

    // short final batch is dropped
    auto b4 = batch_iterator(ds.train, 17, 7, 0);
    CHECK(b4.size() == ds.train.size() / 17);
}

TEST_CASE("padding masks flag exactly the padded positions") {
    Dataset ds = generate_dataset(small_spec(), 8, 120);
    auto batches = batch_iterator(ds.train, 8, 9, 0);
    for (const auto& batch : batches)
        for (size_t k = 0; k < batch.examples.size(); ++k) {
            const auto& cap = batch.captions[k];
            const auto& mask = batch.masks[k];
            const size_t true_len = batch.examples[k]->caption.size();
            REQUIRE(cap.size() == mask.size());
            for (size_t i = 0; i < cap.size(); ++i) {
                CHECK(mask[i] == (i < true_len ? 1 : 0));
                if (i >= true_len) CHECK(cap[i] == 0);
            }
        }
}

TEST_CASE("oracle retrievability: noiseless single-concept task is solvable by signature matching") {
    ConceptSpec spec;
    spec.num_concepts = 16;
    spec.noise_sigma = 0.0;
    spec.max_concepts_per_example = 1;
    Dataset ds = generate_dataset(spec, 11, 320);

    // one candidate per concept
    std::vector<const PairedExample*> pool;
    std::set<int> used;
    for (const auto& ex : ds.test)
        if (used.insert(ex.concepts[0]).second) pool.push_back(&ex);
    REQUIRE(pool.size() == 16);

    auto image_concept = [&](const Tensor& img) {
        // any nonzero patch row equals one signature exactly
        for (int i = 0; i < img.rows(); ++i) {
            double norm = 0.0;
            for (int j = 0; j < img.cols(); ++j) norm += img.at(i, j) * img.at(i, j);
            if (norm < 1e-12) continue;
            int best = -1;
            double best_d = 1e30;
            for (size_t c = 0; c < ds.signatures.size(); ++c) {
                double d = 0.0;
                for (int j = 0; j < img.cols(); ++j) {
                    const double diff = img.at(i, j) - ds.signatures[c].at(0, j);
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(c);
                }
            }
            return best;
        }
        return -1;
    };
    auto caption_concept = [&](const std::vector<int>& cap) {
        for (int id : cap)
            if (id < spec.vocab_size - spec.num_function_words) return (id - 1) / spec.words_per_concept();
        return -1;
    };

    int correct = 0;
    for (const auto* q : pool) {
        const int want = q->concepts[0];
        const int got_caption = caption_concept(q->caption);
        // retrieve the image whose inferred concept matches the caption's
        int hit = -1;
        for (size_t j = 0; j < pool.size(); ++j)
            if (image_concept(pool[j]->image) == got_caption) hit = static_cast<int>(j);
        if (hit >= 0 && pool[static_cast<size_t>(hit)]->concepts[0] == want) ++correct;
    }
    CHECK(correct == 16);
}

TEST_CASE("dataset dump round-trips exactly") {
    ConceptSpec spec = small_spec();
    spec.noise_sigma = 0.4;
    Dataset ds = generate_dataset(spec, 12, 120);
    const std::string path = "ds_test.brdd";
    dump_dataset(ds, path);
    Dataset ld = load_dataset(path);
    CHECK(ld.seed == ds.seed);
    REQUIRE(ld.train.size() == ds.train.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(ld.train[i].image.vec() == ds.train[i].image.vec());
        CHECK(ld.train[i].caption == ds.train[i].caption);
        CHECK(ld.train[i].concepts == ds.train[i].concepts);
    }
    // corrupt one payload byte: checksum must catch it
    auto bytes = binio::read_file(path);
    bytes[bytes.size() / 2] ^= 0x40;
    binio::write_file(path, bytes);
    CHECK_THROWS(load_dataset(path));
    std::remove(path.c_str());
}
