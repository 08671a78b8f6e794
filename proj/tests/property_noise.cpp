// Benchmark-calibration property: the trained model's retrieval quality is
// non-increasing in the patch-noise level. Uses reduced-scale runs (the
// orderings, not absolute numbers, are what the dataset must support).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "bridge/training.hpp"

using namespace bridge;

namespace {

double test_tr1(double noise_sigma, uint64_t seed) {
    ConceptSpec spec;
    spec.num_concepts = 8;
    spec.noise_sigma = noise_sigma;
    spec.max_concepts_per_example = 2;
    Dataset ds = generate_dataset(spec, derive_seed(seed, 0xDA7A), 320);

    ModelConfig mc;
    mc.text.num_layers = 2;
    mc.text.width = 32;
    mc.text.heads = 2;
    mc.text.ffn_mult = 2;
    mc.text.max_positions = 12;
    mc.text.vocab_size = 64;
    mc.vision = mc.text;
    mc.vision.patch_dim = 12;
    mc.vision.max_positions = 16;
    mc.bridge.q = 1;
    mc.bridge.d_s = 16;
    mc.bridge.h_s = 2;
    mc.embed_dim = 16;
    Model model(mc, derive_seed(seed, 0x1217));

    TrainConfig tc;
    tc.seed = seed;
    tc.batch_size = 16;
    tc.stage_a = {'A', 3, 1e-3, 0};
    tc.stage_b = {'B', 6, 3e-4, 1};
    TrainResult r = train(model, ds, tc);
    REQUIRE_FALSE(r.aborted);

    RetrievalEmbeddings emb = retrieval_inference(model, ds.test);
    return recall_at_k(emb.p_t, emb.p_v, {1}).tr.at(1);
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
}

}  // namespace

TEST_CASE("median trained R@1 is non-increasing in noise_sigma over {0, 0.5, 1.0}") {
    std::map<double, double> med;
    for (double sigma : {0.0, 0.5, 1.0}) {
        std::vector<double> tr1s;
        for (uint64_t seed : {21ULL, 22ULL, 23ULL}) tr1s.push_back(test_tr1(sigma, seed));
        med[sigma] = median3(tr1s);
        INFO("sigma=" << sigma << " tr1s=[" << tr1s[0] << "," << tr1s[1] << "," << tr1s[2] << "]");
        CHECK(med[sigma] >= 0.0);
    }
    MESSAGE("medians: sigma0=" << med[0.0] << " sigma0.5=" << med[0.5] << " sigma1=" << med[1.0]);
    CHECK(med[0.0] >= med[0.5]);
    CHECK(med[0.5] >= med[1.0]);
}
