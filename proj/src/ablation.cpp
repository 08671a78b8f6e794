#include "bridge/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "bridge/checkpoint.hpp"

namespace bridge {

std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& base, const std::string& axis) {
    std::vector<std::pair<std::string, RunConfig>> out;
    if (axis == "fusion") {
        RunConfig none = base;
        none.bridge_fusion_variant = "none";
        // no interaction layers -> no attention records for the cycle loss
        std::string enabled;
        for (const auto& term : base.loss_setup().enabled) {
            if (term == "cyc") continue;
            enabled += (enabled.empty() ? "" : ",") + term;
        }
        none.loss_enabled = enabled;
        out.push_back({"none", none});

        RunConfig pooled = base;
        pooled.bridge_fusion_variant = "pooled_only";
        pooled.bridge_q = 1;
        out.push_back({"pooled_only", pooled});

        RunConfig self_cross = base;
        self_cross.bridge_fusion_variant = "self_plus_cross";
        out.push_back({"self_plus_cross", self_cross});

        RunConfig cross = base;
        cross.bridge_fusion_variant = "cross_only";
        out.push_back({"cross_only", cross});
    } else if (axis == "placement") {
        if (base.bridge_fusion_variant != "cross_only" && base.bridge_fusion_variant != "self_plus_cross")
            throw ConfigError("placement axis requires a token-level fusion variant");
        for (const char* mode : {"early", "middle", "late", "staggered"}) {
            RunConfig c = base;
            c.bridge_placement = mode;
            out.push_back({mode, c});
        }
    } else if (axis == "losses") {
        auto with = [&](const char* name, const char* enabled) {
            RunConfig c = base;
            c.loss_enabled = enabled;
            out.push_back({name, c});
        };
        with("infonce_only", "itc_uni,itc_cross");
        with("infonce_itm", "itc_uni,itc_cross,itm");
        with("infonce_cyc", "itc_uni,itc_cross,cyc");
        with("full", "itc_uni,itc_cross,itm,cyc");
    } else if (axis == "q" || axis == "Q") {
        // the sweep needs room for the deepest variant; all cells share the
        // enlarged stack so the comparison stays apples-to-apples
        const int layers = std::max(base.enc_layers, 6);
        for (int q : {2, 4, 6}) {
            RunConfig c = base;
            c.enc_layers = layers;
            c.bridge_q = q;
            out.push_back({"q" + std::to_string(q), c});
        }
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "' (use fusion|placement|losses|q)");
    }
    for (auto& [name, cfg] : out) cfg.validate();
    return out;
}

namespace {

bool parse_cached_cell(const std::string& path, CellResult& cell) {
    std::ifstream f(path);
    if (!f) return false;
    std::string line;
    int fields = 0;
    while (std::getline(f, line)) {
        const size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        try {
            if (key == "tr1") cell.tr1 = std::stod(val);
            else if (key == "tr5") cell.tr5 = std::stod(val);
            else if (key == "ir1") cell.ir1 = std::stod(val);
            else if (key == "ir5") cell.ir5 = std::stod(val);
            else if (key == "modality_gap") cell.gap = std::stod(val);
            else continue;
        } catch (...) {
            return false;
        }
        ++fields;
    }
    return fields == 5;
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

CellResult run_ablation_cell(const RunConfig& cfg_in, const std::string& variant, uint64_t seed,
                             const std::string& cell_dir, const LogFn& log) {
    CellResult cell;
    cell.variant = variant;
    cell.seed = seed;

    std::filesystem::create_directories(cell_dir);
    const std::string result_path = cell_dir + "/result.kv";
    if (parse_cached_cell(result_path, cell)) {
        cell.from_cache = true;
        if (log) log("cell " + variant + " seed " + std::to_string(seed) + ": cached");
        return cell;
    }

    RunConfig cfg = cfg_in;
    cfg.seed = seed;
    cfg.validate();

    Dataset ds = generate_dataset(cfg.concept_spec(), derive_seed(cfg.seed, 0xDA7A), cfg.data_size);
    Model model(cfg.model_config(), derive_seed(cfg.seed, 0x1217));

    std::ofstream train_log(cell_dir + "/train.log");
    LogFn cell_log = [&](const std::string& line) { train_log << line << "\n"; };
    TrainResult tr = train(model, ds, cfg.train_config(), cell_log);
    if (tr.aborted) throw NumericalError("cell " + variant + " seed " + std::to_string(seed) + ": " + tr.abort_reason);

    save_checkpoint(cell_dir + "/final.brdg", model, cfg.serialize(), tr.final_stage, static_cast<uint64_t>(tr.steps));
    EvalReport test_rep = evaluate(model, ds.test, "test");
    cell.tr1 = test_rep.tr1;
    cell.tr5 = test_rep.tr5;
    cell.ir1 = test_rep.ir1;
    cell.ir5 = test_rep.ir5;
    cell.gap = test_rep.modality_gap;

    char buf[256];
    std::snprintf(buf, sizeof buf, "tr1=%.9g\ntr5=%.9g\nir1=%.9g\nir5=%.9g\nmodality_gap=%.9g\n", cell.tr1, cell.tr5,
                  cell.ir1, cell.ir5, cell.gap);
    const std::string tmp = result_path + ".tmp";
    {
        std::ofstream f(tmp);
        f << buf;
        if (!f.good()) throw IoError("cannot write " + tmp);
    }
    std::filesystem::rename(tmp, result_path);
    if (log)
        log("cell " + variant + " seed " + std::to_string(seed) + ": tr1=" + std::to_string(cell.tr1) +
            " ir1=" + std::to_string(cell.ir1));
    return cell;
}

std::string ablation_cell_dir(const std::string& out_dir, const RunConfig& cfg, uint64_t seed) {
    // key cells by training-relevant content so identical configurations
    // reached from different axes (e.g. fusion "cross_only" and losses
    // "full") share one trained cell
    RunConfig key = cfg;
    key.seed = seed;
    key.out = "";
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(hash_name(key.serialize())));
    return out_dir + "/cells/s" + std::to_string(seed) + "_" + hex;
}

AblationTable run_ablation(const RunConfig& base, const std::string& axis, const std::string& out_dir, int jobs,
                           const LogFn& log) {
    AblationTable table;
    table.axis = axis;
    const auto variants = ablation_variants(base, axis);
    const std::vector<uint64_t> seeds = {base.seed, base.seed + 1, base.seed + 2};

    struct Job {
        std::string variant;
        RunConfig cfg;
        uint64_t seed;
    };
    std::vector<Job> cells_to_run;
    for (const auto& [name, cfg] : variants)
        for (uint64_t s : seeds) cells_to_run.push_back({name, cfg, s});

    std::vector<CellResult> results(cells_to_run.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells_to_run.size()) return;
            const Job& job = cells_to_run[i];
            results[i] = run_ablation_cell(job.cfg, job.variant, job.seed,
                                           ablation_cell_dir(out_dir, job.cfg, job.seed), log);
        }
    };
    jobs = std::max(1, jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    table.rows = std::move(results);

    for (const auto& [name, cfg] : variants) {
        (void)cfg;
        std::vector<double> tr1, tr5, ir1, ir5, gap;
        for (const auto& r : table.rows)
            if (r.variant == name) {
                tr1.push_back(r.tr1);
                tr5.push_back(r.tr5);
                ir1.push_back(r.ir1);
                ir5.push_back(r.ir5);
                gap.push_back(r.gap);
            }
        CellResult med;
        med.variant = name;
        med.tr1 = median3(tr1);
        med.tr5 = median3(tr5);
        med.ir1 = median3(ir1);
        med.ir5 = median3(ir5);
        med.gap = median3(gap);
        table.medians.push_back(med);
    }
    return table;
}

void write_ablation_csv(const AblationTable& table, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    char buf[192];
    f << "variant,seed,tr1,ir1,modality_gap\n";
    for (const auto& r : table.rows) {
        std::snprintf(buf, sizeof buf, "%s,%llu,%.9g,%.9g,%.9g\n", r.variant.c_str(),
                      static_cast<unsigned long long>(r.seed), r.tr1, r.ir1, r.gap);
        f << buf;
    }
    for (const auto& r : table.medians) {
        std::snprintf(buf, sizeof buf, "%s,median,%.9g,%.9g,%.9g\n", r.variant.c_str(), r.tr1, r.ir1, r.gap);
        f << buf;
    }
    if (!f.good()) throw IoError("write failed for " + path);
}

const CellResult& median_row(const AblationTable& table, const std::string& variant) {
    for (const auto& r : table.medians)
        if (r.variant == variant) return r;
    throw ContractError("no median row for variant '" + variant + "'");
}

}  // namespace bridge
