#include "bridge/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bridge/objectives.hpp"

namespace bridge {

Batch make_full_batch(const std::vector<PairedExample>& split) {
    if (split.empty()) throw ContractError("make_full_batch: empty split");
    Batch batch;
    int max_len = 0;
    for (const auto& ex : split) max_len = std::max(max_len, static_cast<int>(ex.caption.size()));
    for (size_t i = 0; i < split.size(); ++i) {
        batch.indices.push_back(static_cast<int>(i));
        batch.examples.push_back(&split[i]);
        std::vector<int> padded = split[i].caption;
        padded.resize(static_cast<size_t>(max_len), 0);
        std::vector<uint8_t> mask(static_cast<size_t>(max_len), 0);
        for (size_t k = 0; k < split[i].caption.size(); ++k) mask[k] = 1;
        batch.captions.push_back(std::move(padded));
        batch.masks.push_back(std::move(mask));
    }
    return batch;
}

BatchEncodings encode_batch(const Model& model, const Batch& batch) {
    BatchEncodings enc;
    std::vector<Value> ut, uv, ft, fv;
    for (size_t i = 0; i < batch.examples.size(); ++i) {
        enc.text.push_back(model.text_prefix(batch.captions[i]));
        enc.vision.push_back(model.vision_prefix(batch.examples[i]->image));
        enc.fused.push_back(model.fuse(enc.vision.back(), enc.text.back()));
        ut.push_back(enc.text.back().pooled_u);
        uv.push_back(enc.vision.back().pooled_u);
        ft.push_back(enc.fused.back().pooled_fused_t);
        fv.push_back(enc.fused.back().pooled_fused_v);
    }
    enc.p_t_uni = concat_rows(ut);
    enc.p_v_uni = concat_rows(uv);
    enc.p_t_fused = concat_rows(ft);
    enc.p_v_fused = concat_rows(fv);
    return enc;
}

ItmForward itm_forward(const Model& model, const Batch& batch, const BatchEncodings& enc,
                       const MinedNegatives* fixed_mining) {
    const int b = static_cast<int>(batch.examples.size());
    if (b < 2) throw ContractError("itm_forward: need at least 2 examples to mine negatives");

    ItmForward out;
    if (fixed_mining) {
        out.mined = *fixed_mining;
    } else {
        NoGradGuard ng;  // mining is a discrete decision; no gradient flows
        Tensor s = similarity_matrix(detach(enc.p_t_fused), detach(enc.p_v_fused), detach(model.tau_raw())).data();
        out.mined = mine_semi_hard_negatives(s);
    }

    std::vector<Value> pos_logits(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i)
        pos_logits[static_cast<size_t>(i)] =
            model.itm_match_logit(enc.fused[static_cast<size_t>(i)].pooled_fused_t,
                                  enc.fused[static_cast<size_t>(i)].pooled_fused_v);

    // text anchor i with mined image j*: one positive, one mismatched pair
    for (int i = 0; i < b; ++i) {
        const int j = out.mined.neg_image_for_text[static_cast<size_t>(i)];
        FusedEncoding neg = model.fuse(enc.vision[static_cast<size_t>(j)], enc.text[static_cast<size_t>(i)]);
        out.entries.push_back({pos_logits[static_cast<size_t>(i)], 1.0});
        out.entries.push_back({model.itm_match_logit(neg.pooled_fused_t, neg.pooled_fused_v), 0.0});
    }
    // image anchor j with mined text i*
    for (int j = 0; j < b; ++j) {
        const int i = out.mined.neg_text_for_image[static_cast<size_t>(j)];
        FusedEncoding neg = model.fuse(enc.vision[static_cast<size_t>(j)], enc.text[static_cast<size_t>(i)]);
        out.entries.push_back({pos_logits[static_cast<size_t>(j)], 1.0});
        out.entries.push_back({model.itm_match_logit(neg.pooled_fused_t, neg.pooled_fused_v), 0.0});
    }
    return out;
}

RecallResult recall_at_k(const Tensor& p_t, const Tensor& p_v, const std::vector<int>& ks) {
    const int m = p_t.rows();
    if (m != p_v.rows() || p_t.cols() != p_v.cols()) throw ShapeError("recall_at_k: embedding shape mismatch");
    int max_k = 0;
    for (int k : ks) max_k = std::max(max_k, k);
    if (m < max_k) throw ContractError("recall_at_k: fewer candidates than K");

    // rank of the true counterpart with ties broken by ascending index
    auto ranks = [&](bool text_query) {
        std::vector<int> r(static_cast<size_t>(m));
        for (int q = 0; q < m; ++q) {
            double true_score = 0.0;
            for (int d = 0; d < p_t.cols(); ++d) true_score += p_t.at(q, d) * p_v.at(q, d);
            int rank = 1;
            for (int c = 0; c < m; ++c) {
                if (c == q) continue;
                double sc = 0.0;
                for (int d = 0; d < p_t.cols(); ++d)
                    sc += text_query ? p_t.at(q, d) * p_v.at(c, d) : p_t.at(c, d) * p_v.at(q, d);
                if (sc > true_score || (sc == true_score && c < q)) ++rank;
            }
            r[static_cast<size_t>(q)] = rank;
        }
        return r;
    };

    RecallResult res;
    const std::vector<int> tr_ranks = ranks(true), ir_ranks = ranks(false);
    for (int k : ks) {
        int tr_hit = 0, ir_hit = 0;
        for (int q = 0; q < m; ++q) {
            tr_hit += tr_ranks[static_cast<size_t>(q)] <= k ? 1 : 0;
            ir_hit += ir_ranks[static_cast<size_t>(q)] <= k ? 1 : 0;
        }
        res.tr[k] = 100.0 * tr_hit / m;
        res.ir[k] = 100.0 * ir_hit / m;
    }
    return res;
}

double modality_gap(const Tensor& p_t, const Tensor& p_v) {
    if (p_t.rows() < 1 || p_v.rows() < 1) throw ContractError("modality_gap: empty embeddings");
    if (p_t.cols() != p_v.cols()) throw ShapeError("modality_gap: width mismatch");
    double gap = 0.0;
    for (int d = 0; d < p_t.cols(); ++d) {
        double ct = 0.0, cv = 0.0;
        for (int i = 0; i < p_t.rows(); ++i) ct += p_t.at(i, d);
        for (int i = 0; i < p_v.rows(); ++i) cv += p_v.at(i, d);
        const double diff = ct / p_t.rows() - cv / p_v.rows();
        gap += diff * diff;
    }
    return std::sqrt(gap);
}

RetrievalEmbeddings retrieval_inference(const Model& model, const std::vector<PairedExample>& examples) {
    NoGradGuard ng;
    Model& m = const_cast<Model&>(model);
    const bool was_training = m.training();
    m.set_training(false);
    const uint64_t before = model.cross_attention_calls();

    Batch batch = make_full_batch(examples);
    RetrievalEmbeddings out;
    const int d_e = model.config().embed_dim;
    out.p_t = Tensor({static_cast<int>(examples.size()), d_e});
    out.p_v = Tensor({static_cast<int>(examples.size()), d_e});
    for (size_t i = 0; i < examples.size(); ++i) {
        UnimodalEncoding t = model.text_prefix(batch.captions[i]);
        UnimodalEncoding v = model.vision_prefix(examples[i].image);
        for (int d = 0; d < d_e; ++d) {
            out.p_t.at(static_cast<int>(i), d) = t.pooled_u.data().at(0, d);
            out.p_v.at(static_cast<int>(i), d) = v.pooled_u.data().at(0, d);
        }
    }
    out.cross_attention_calls = model.cross_attention_calls() - before;
    m.set_training(was_training);
    if (out.cross_attention_calls != 0)
        throw ContractViolation("retrieval ran " + std::to_string(out.cross_attention_calls) +
                                " cross-attention calls; the bi-encoder path must run none");
    return out;
}

std::string EvalReport::to_kv() const {
    char buf[64];
    std::string s;
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        s += std::string(key) + "=" + buf + "\n";
    };
    s += "split=" + split + "\n";
    put("tr1", tr1);
    put("tr5", tr5);
    put("ir1", ir1);
    put("ir5", ir5);
    put("itm_accuracy", itm_accuracy);
    put("modality_gap", modality_gap);
    put("cycle_loss_eval", cycle_loss_eval);
    s += "cross_attention_calls_during_retrieval=" + std::to_string(cross_attention_calls_during_retrieval) + "\n";
    return s;
}

EvalReport evaluate(const Model& model, const std::vector<PairedExample>& examples, const std::string& split_name) {
    EvalReport rep;
    rep.split = split_name;

    RetrievalEmbeddings emb = retrieval_inference(model, examples);
    rep.cross_attention_calls_during_retrieval = emb.cross_attention_calls;
    RecallResult rec = recall_at_k(emb.p_t, emb.p_v, {1, 5});
    rep.tr1 = rec.tr.at(1);
    rep.tr5 = rec.tr.at(5);
    rep.ir1 = rec.ir.at(1);
    rep.ir5 = rec.ir.at(5);
    rep.modality_gap = modality_gap(emb.p_t, emb.p_v);

    // fused-path metrics (these do run cross attention, by design)
    NoGradGuard ng;
    Model& m = const_cast<Model&>(model);
    const bool was_training = m.training();
    m.set_training(false);
    Batch batch = make_full_batch(examples);
    BatchEncodings enc = encode_batch(model, batch);

    if (!enc.fused.front().records.empty()) {
        double cyc = 0.0;
        for (size_t i = 0; i < enc.fused.size(); ++i)
            cyc += cycle_loss(enc.fused[i].records, enc.fused[i].cycle_text_mask).item();
        rep.cycle_loss_eval = cyc / static_cast<double>(enc.fused.size());
    }

    ItmForward itm = itm_forward(model, batch, enc);
    int correct = 0;
    for (const auto& [logit, label] : itm.entries) {
        const bool predicted_match = logit.item() > 0.0;
        if (predicted_match == (label > 0.5)) ++correct;
    }
    rep.itm_accuracy = 100.0 * correct / static_cast<double>(itm.entries.size());
    m.set_training(was_training);
    return rep;
}

namespace {

// Top-2 eigenvectors of a small symmetric matrix via cyclic Jacobi.
void top2_eigvecs(std::vector<double>& a, int n, std::vector<double>& v1, std::vector<double>& v2) {
    std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 50; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
        if (off < 1e-18) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p) * n + q];
                if (std::abs(apq) < 1e-15) continue;
                const double app = a[static_cast<size_t>(p) * n + p], aqq = a[static_cast<size_t>(q) * n + q];
                const double theta = 0.5 * (aqq - app) / apq;
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k) * n + p], akq = a[static_cast<size_t>(k) * n + q];
                    a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p) * n + k], aqk = a[static_cast<size_t>(q) * n + k];
                    a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v[static_cast<size_t>(k) * n + p], vkq = v[static_cast<size_t>(k) * n + q];
                    v[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }
    int i1 = 0, i2 = 1;
    double best = -1e300, second = -1e300;
    for (int i = 0; i < n; ++i) {
        const double ev = a[static_cast<size_t>(i) * n + i];
        if (ev > best) {
            second = best;
            i2 = i1;
            best = ev;
            i1 = i;
        } else if (ev > second) {
            second = ev;
            i2 = i;
        }
    }
    v1.resize(static_cast<size_t>(n));
    v2.resize(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) {
        v1[static_cast<size_t>(k)] = v[static_cast<size_t>(k) * n + i1];
        v2[static_cast<size_t>(k)] = v[static_cast<size_t>(k) * n + i2];
    }
}

std::string pca_path_for(const std::string& csv_path) {
    const std::string suffix = ".csv";
    if (csv_path.size() > suffix.size() && csv_path.substr(csv_path.size() - suffix.size()) == suffix)
        return csv_path.substr(0, csv_path.size() - suffix.size()) + "_pca.csv";
    return csv_path + "_pca.csv";
}

}  // namespace

void export_embeddings(const Model& model, const std::vector<PairedExample>& examples, const std::string& csv_path) {
    RetrievalEmbeddings emb = retrieval_inference(model, examples);
    const int m = static_cast<int>(examples.size()), d = emb.p_t.cols();

    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot open " + csv_path + " for writing");
    f << "example_id,modality,concepts";
    for (int j = 0; j < d; ++j) f << ",e" << j;
    f << "\n";
    char buf[64];
    auto write_row = [&](int id, const char* modality, const std::vector<int>& concepts, const Tensor& e, int row) {
        f << id << ',' << modality << ',';
        for (size_t c = 0; c < concepts.size(); ++c) {
            if (c) f << ';';
            f << concepts[c];
        }
        for (int j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", e.at(row, j));
            f << ',' << buf;
        }
        f << "\n";
    };
    for (int i = 0; i < m; ++i) {
        write_row(i, "text", examples[static_cast<size_t>(i)].concepts, emb.p_t, i);
        write_row(i, "vision", examples[static_cast<size_t>(i)].concepts, emb.p_v, i);
    }
    if (!f.good()) throw IoError("write failed for " + csv_path);
    f.close();

    // companion quick-look projection: rows of both modalities, centered,
    // projected onto the top-2 principal axes
    const int rows = 2 * m;
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    auto at = [&](int r, int j) { return r < m ? emb.p_t.at(r, j) : emb.p_v.at(r - m, j); };
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += at(r, j);
    for (double& x : mean) x /= rows;
    std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k)
                cov[static_cast<size_t>(j) * d + k] +=
                    (at(r, j) - mean[static_cast<size_t>(j)]) * (at(r, k) - mean[static_cast<size_t>(k)]) / rows;
    std::vector<double> v1, v2;
    top2_eigvecs(cov, d, v1, v2);

    std::ofstream g(pca_path_for(csv_path));
    if (!g) throw IoError("cannot open pca csv for writing");
    g << "example_id,modality,x,y\n";
    for (int i = 0; i < m; ++i)
        for (const char* modality : {"text", "vision"}) {
            const int r = modality[0] == 't' ? i : m + i;
            double x = 0.0, y = 0.0;
            for (int j = 0; j < d; ++j) {
                x += (at(r, j) - mean[static_cast<size_t>(j)]) * v1[static_cast<size_t>(j)];
                y += (at(r, j) - mean[static_cast<size_t>(j)]) * v2[static_cast<size_t>(j)];
            }
            std::snprintf(buf, sizeof buf, "%.9g,%.9g", x, y);
            g << i << ',' << modality << ',' << buf << "\n";
        }
    if (!g.good()) throw IoError("write failed for pca csv");
}

}  // namespace bridge
