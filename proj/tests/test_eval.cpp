#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bridge/evaluation.hpp"

using namespace bridge;

namespace {

ModelConfig micro_model_config(FusionVariant v = FusionVariant::kCrossOnly) {
    ModelConfig mc;
    mc.text.num_layers = 2;
    mc.text.width = 16;
    mc.text.heads = 2;
    mc.text.ffn_mult = 2;
    mc.text.max_positions = 12;
    mc.text.vocab_size = 64;
    mc.vision = mc.text;
    mc.vision.patch_dim = 12;
    mc.vision.max_positions = 16;
    mc.bridge.fusion_variant = v;
    mc.bridge.q = 2;
    mc.bridge.d_s = 8;
    mc.bridge.h_s = 2;
    mc.embed_dim = 8;
    mc.dropout = 0.0;
    return mc;
}

ConceptSpec micro_data_spec() {
    ConceptSpec s;
    s.num_concepts = 8;
    s.noise_sigma = 0.3;
    s.max_concepts_per_example = 2;
    return s;
}

// identity-like embeddings: p_t row i = e_i, p_v row j encodes column j of
// the desired score matrix
std::pair<Tensor, Tensor> embeddings_for_scores(const Tensor& s) {
    const int m = s.rows();
    Tensor p_t({m, m}), p_v({m, m});
    for (int i = 0; i < m; ++i) p_t.at(i, i) = 1.0;
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < m; ++i) p_v.at(j, i) = s.at(i, j);
    return {p_t, p_v};
}

// exhaustive oracle with the same deterministic tie-break
double recall_oracle(const Tensor& s, int k, bool text_query) {
    const int m = s.rows();
    int hits = 0;
    for (int q = 0; q < m; ++q) {
        int rank = 1;
        const double true_score = s.at(q, q);
        for (int c = 0; c < m; ++c) {
            if (c == q) continue;
            const double sc = text_query ? s.at(q, c) : s.at(c, q);
            if (sc > true_score || (sc == true_score && c < q)) ++rank;
        }
        if (rank <= k) ++hits;
    }
    return 100.0 * hits / m;
}

}  // namespace

TEST_CASE("perfect alignment gives 100% recall everywhere") {
    Tensor s({4, 4});
    for (int i = 0; i < 4; ++i) s.at(i, i) = 1.0;
    auto [p_t, p_v] = embeddings_for_scores(s);
    RecallResult r = recall_at_k(p_t, p_v, {1, 2});
    CHECK(r.tr.at(1) == 100.0);
    CHECK(r.ir.at(1) == 100.0);
    CHECK(r.tr.at(2) == 100.0);
}

TEST_CASE("anti-diagonal best match drives R@1 to zero while R@5 stays 100") {
    const int m = 5;
    Tensor s({m, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            if (j == m - 1 - i)
                s.at(i, j) = 10.0;  // the reversal partner always wins
            else if (i != j)
                s.at(i, j) = 1.0 + j * 0.1;
        }
    // the center row's reversal partner is itself; give it a different winner
    s.at(2, 2) = 0.0;
    s.at(2, 0) = 10.0;
    auto [p_t, p_v] = embeddings_for_scores(s);
    RecallResult r = recall_at_k(p_t, p_v, {1, 5});
    CHECK(r.tr.at(1) == 0.0);
    CHECK(r.tr.at(5) == 100.0);
}

TEST_CASE("recall matches the exhaustive oracle on random matrices (property)") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_index(7));
        Tensor s({m, m});
        for (size_t i = 0; i < s.size(); ++i)
            s.at(i) = static_cast<double>(rng.uniform_index(6)) / 2.0;  // ties likely
        auto [p_t, p_v] = embeddings_for_scores(s);
        std::vector<int> ks = {1};
        if (m >= 3) ks.push_back(3);
        RecallResult r = recall_at_k(p_t, p_v, ks);
        for (int k : ks) {
            CHECK(r.tr.at(k) == recall_oracle(s, k, true));
            CHECK(r.ir.at(k) == recall_oracle(s, k, false));
        }
        if (m >= 3) {
            CHECK(r.tr.at(1) <= r.tr.at(3));  // monotone in K
            CHECK(r.ir.at(1) <= r.ir.at(3));
        }
    }
    CHECK_THROWS_AS(recall_at_k(Tensor({2, 3}), Tensor({2, 3}), {5}), ContractError);
}

TEST_CASE("modality gap basics") {
    Tensor a({2, 3}, {1, 0, 0, 0, 1, 0});
    CHECK(modality_gap(a, a) == 0.0);

    Tensor b({2, 3}, {0, 0, 1, 0, 0, 1});
    CHECK(modality_gap(a, b) > 0.0);

    // hand-computed 2-point case: centroids (0.5,0.5) and (1,0) -> sqrt(0.5)
    Tensor t({2, 2}, {1, 0, 0, 1});
    Tensor v({2, 2}, {1, 0, 1, 0});
    CHECK(modality_gap(t, v) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
}

TEST_CASE("retrieval inference proves zero cross-attention and matches fused P^u bitwise") {
    Model m(micro_model_config(), 55);
    Dataset ds = generate_dataset(micro_data_spec(), 21, 120);
    RetrievalEmbeddings emb = retrieval_inference(m, ds.val);
    CHECK(emb.cross_attention_calls == 0);

    // the fused pass exposes the same unimodal pooled embeddings
    Batch batch = make_full_batch(ds.val);
    NoGradGuard ng;
    for (size_t i = 0; i < ds.val.size(); ++i) {
        UnimodalEncoding t = m.text_prefix(batch.captions[i]);
        UnimodalEncoding v = m.vision_prefix(ds.val[i].image);
        FusedEncoding f = m.fuse(v, t);
        (void)f;
        for (int d = 0; d < m.config().embed_dim; ++d) {
            CHECK(emb.p_t.at(static_cast<int>(i), d) == t.pooled_u.data().at(0, d));
            CHECK(emb.p_v.at(static_cast<int>(i), d) == v.pooled_u.data().at(0, d));
        }
    }
}

TEST_CASE("full evaluation report is populated and serializable") {
    Model m(micro_model_config(), 56);
    Dataset ds = generate_dataset(micro_data_spec(), 22, 120);
    EvalReport rep = evaluate(m, ds.val, "val");
    CHECK(rep.cross_attention_calls_during_retrieval == 0);
    CHECK(rep.tr1 >= 0.0);
    CHECK(rep.tr1 <= rep.tr5);
    CHECK(rep.ir1 <= rep.ir5);
    CHECK(rep.itm_accuracy >= 0.0);
    CHECK(rep.cycle_loss_eval >= 0.0);
    CHECK(rep.modality_gap >= 0.0);

    const std::string kv = rep.to_kv();
    CHECK(kv.find("split=val\n") != std::string::npos);
    CHECK(kv.find("tr1=") != std::string::npos);
    CHECK(kv.find("cross_attention_calls_during_retrieval=0") != std::string::npos);
}

TEST_CASE("embedding export writes 2M rows that parse back at printed precision") {
    Model m(micro_model_config(), 57);
    Dataset ds = generate_dataset(micro_data_spec(), 23, 120);
    const std::string path = "emb_test.csv";
    export_embeddings(m, ds.val, path);

    std::ifstream f(path);
    REQUIRE(f.good());
    std::string header;
    std::getline(f, header);
    CHECK(header.rfind("example_id,modality,concepts,e0", 0) == 0);

    RetrievalEmbeddings emb = retrieval_inference(m, ds.val);
    std::string line;
    int row = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id_s, modality, concepts;
        std::getline(ss, id_s, ',');
        std::getline(ss, modality, ',');
        std::getline(ss, concepts, ',');
        const int id = std::stoi(id_s);
        CHECK(id == row / 2);  // example id, then modality order
        CHECK(modality == (row % 2 == 0 ? "text" : "vision"));
        const Tensor& src = row % 2 == 0 ? emb.p_t : emb.p_v;
        std::string cell;
        int j = 0;
        while (std::getline(ss, cell, ',')) {
            const double parsed = std::stod(cell);
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.9g", src.at(id, j));
            CHECK(parsed == std::stod(buf));  // round-trip at %.9g precision
            ++j;
        }
        CHECK(j == m.config().embed_dim);
        ++row;
    }
    CHECK(row == 2 * static_cast<int>(ds.val.size()));

    // companion pca projection exists with the same row count
    std::ifstream g("emb_test_pca.csv");
    REQUIRE(g.good());
    std::getline(g, header);
    CHECK(header == "example_id,modality,x,y");
    int prows = 0;
    while (std::getline(g, line))
        if (!line.empty()) ++prows;
    CHECK(prows == 2 * static_cast<int>(ds.val.size()));
    std::remove(path.c_str());
    std::remove("emb_test_pca.csv");
}

TEST_CASE("retrieval path is faster than the fused forward (informational)") {
    Model m(micro_model_config(), 58);
    Dataset ds = generate_dataset(micro_data_spec(), 24, 200);
    Batch batch = make_full_batch(ds.val);

    auto best_of = [](auto&& fn) {
        double best = 1e300;
        for (int rep = 0; rep < 3; ++rep) {
            auto t0 = std::chrono::steady_clock::now();
            fn();
            auto t1 = std::chrono::steady_clock::now();
            best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
        }
        return best;
    };
    const double t_retrieval = best_of([&]() { retrieval_inference(m, ds.val); });
    const double t_fused = best_of([&]() {
        NoGradGuard ng;
        encode_batch(m, batch);
    });
    INFO("retrieval=" << t_retrieval << "s fused=" << t_fused << "s");
    CHECK(t_retrieval < t_fused);
}
