// bridge: train / evaluate / ablate the cross-only bidirectional fusion
// model on the synthetic paired-modality task.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical abort,
// 4 unusable checkpoint (bad magic/version/checksum) or I/O failure.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "bridge/ablation.hpp"
#include "bridge/checkpoint.hpp"

using namespace bridge;

namespace {

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string checkpoint_path;
    std::string split = "val";
    std::string axis;
    std::string dump_attention;
    int jobs = 1;
    std::vector<std::pair<std::string, std::string>> overrides;  // in command-line order
};

void usage(std::ostream& os) {
    os << "usage: bridge <command> [options]\n"
          "\n"
          "commands:\n"
          "  train               train with the staged schedule; writes checkpoints,\n"
          "                      train.log and eval.txt under --out\n"
          "  eval                evaluate a checkpoint (retrieval runs the bi-encoder\n"
          "                      path with zero cross-attention calls)\n"
          "  ablate              sweep one axis (fusion|placement|losses|q) over\n"
          "                      seeds {s, s+1, s+2}; writes ablation_<axis>.csv\n"
          "  export-embeddings   dump retrieval embeddings (+2D PCA) as CSV\n"
          "\n"
          "options:\n"
          "  --config PATH       config file of `dotted.key = value` lines\n"
          "  --seed N            override the seed (same as --seed key)\n"
          "  --out DIR           output directory (owned via a lock file)\n"
          "  --checkpoint PATH   checkpoint to evaluate / export from\n"
          "  --split NAME        train | val | test (default val)\n"
          "  --axis NAME         ablation axis\n"
          "  --jobs N            parallel ablation cells (default 1)\n"
          "  --dump-attention P  (eval) write attention-record CSV to P\n"
          "  --<dotted.key> V    override any config key, e.g. --stages.A.epochs 0\n";
}

CliArgs parse_args(int argc, char** argv) {
    if (argc < 2) throw ConfigError("missing command; try --help");
    CliArgs args;
    args.command = argv[1];
    if (args.command == "--help" || args.command == "-h" || args.command == "help") {
        args.command = "help";
        return args;
    }
    for (int i = 2; i < argc; ++i) {
        const std::string flag = argv[i];
        if (flag == "--help" || flag == "-h") {
            args.command = "help";
            return args;
        }
        if (flag.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + flag + "'");
        if (i + 1 >= argc) throw ConfigError("flag '" + flag + "' needs a value");
        const std::string value = argv[++i];
        const std::string name = flag.substr(2);
        if (name == "config")
            args.config_path = value;
        else if (name == "checkpoint")
            args.checkpoint_path = value;
        else if (name == "split")
            args.split = value;
        else if (name == "axis")
            args.axis = value;
        else if (name == "jobs")
            args.jobs = std::stoi(value);
        else if (name == "dump-attention")
            args.dump_attention = value;
        else
            args.overrides.push_back({name, value});  // includes --seed / --out
    }
    return args;
}

RunConfig assemble_config(const CliArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = parse_config_file(args.config_path, cfg);
    for (const auto& [key, value] : args.overrides) cfg.set(key, value);  // flags beat the file
    cfg.validate();
    return cfg;
}

const std::vector<PairedExample>& pick_split(const Dataset& ds, const std::string& name) {
    if (name == "train") return ds.train;
    if (name == "val") return ds.val;
    if (name == "test") return ds.test;
    throw ConfigError("unknown split '" + name + "' (use train|val|test)");
}

Dataset dataset_for(const RunConfig& cfg) {
    return generate_dataset(cfg.concept_spec(), derive_seed(cfg.seed, 0xDA7A), cfg.data_size);
}

Model model_for(const RunConfig& cfg) { return Model(cfg.model_config(), derive_seed(cfg.seed, 0x1217)); }

int cmd_train(const CliArgs& args) {
    RunConfig cfg = assemble_config(args);
    DirLock lock(cfg.out);
    Dataset ds = dataset_for(cfg);
    Model model = model_for(cfg);

    std::ofstream log_file(cfg.out + "/train.log");
    if (!log_file) throw IoError("cannot open " + cfg.out + "/train.log");
    LogFn log = [&](const std::string& line) { log_file << line << "\n"; };
    const std::string config_text = cfg.serialize();
    CheckpointFn ckpt = [&](const std::string& tag, char stage, int64_t step) {
        save_checkpoint(cfg.out + "/" + tag + ".brdg", model, config_text, stage, static_cast<uint64_t>(step));
    };

    TrainResult result = train(model, ds, cfg.train_config(), log, ckpt);
    if (result.aborted) {
        std::cerr << "numerical abort: " << result.abort_reason << "\n"
                  << "last stage-boundary checkpoint retained under " << cfg.out << "\n";
        return 3;
    }

    const std::string kv = result.final_val.to_kv();
    log("eval.txt begin");
    log_file << kv;
    log("eval.txt end");
    std::ofstream eval_file(cfg.out + "/eval.txt");
    eval_file << kv;
    if (!eval_file.good()) throw IoError("cannot write " + cfg.out + "/eval.txt");
    std::cout << kv;
    std::cout << "steps=" << result.steps << "\ncheckpoint=" << cfg.out << "/final.brdg\n";
    return 0;
}

int cmd_eval(const CliArgs& args) {
    if (args.checkpoint_path.empty()) throw ConfigError("eval needs --checkpoint");
    CheckpointMeta meta = read_checkpoint_meta(args.checkpoint_path);
    RunConfig cfg = parse_config_text(meta.config_text);

    // an explicit --config must agree with the checkpoint snapshot
    std::string expected;
    const std::string* expected_ptr = nullptr;
    if (!args.config_path.empty()) {
        RunConfig given = parse_config_file(args.config_path);
        for (const auto& [key, value] : args.overrides) given.set(key, value);
        expected = given.serialize();
        expected_ptr = &expected;
    }

    Model model = model_for(cfg);
    load_checkpoint(args.checkpoint_path, model, expected_ptr);
    Dataset ds = dataset_for(cfg);
    const auto& split = pick_split(ds, args.split);
    EvalReport rep = evaluate(model, split, args.split);

    std::string out_dir = cfg.out;
    for (const auto& [key, value] : args.overrides)
        if (key == "out") out_dir = value;
    std::filesystem::create_directories(out_dir);
    std::ofstream eval_file(out_dir + "/eval.txt");
    eval_file << rep.to_kv();
    if (!eval_file.good()) throw IoError("cannot write " + out_dir + "/eval.txt");
    std::cout << rep.to_kv();

    if (!args.dump_attention.empty()) {
        NoGradGuard ng;
        const size_t n = std::min<size_t>(split.size(), 8);
        std::vector<PairedExample> head(split.begin(), split.begin() + static_cast<long>(n));
        Batch batch = make_full_batch(head);
        AttentionRecords all;
        for (size_t i = 0; i < head.size(); ++i) {
            FusedEncoding f = model.fuse(model.vision_prefix(head[i].image), model.text_prefix(batch.captions[i]));
            for (auto& rec : f.records) all.push_back(rec);
        }
        write_attention_csv(all, args.dump_attention);
    }
    return 0;
}

int cmd_ablate(const CliArgs& args) {
    if (args.axis.empty()) throw ConfigError("ablate needs --axis (fusion|placement|losses|q)");
    RunConfig cfg = assemble_config(args);
    DirLock lock(cfg.out);
    std::ofstream log_file(cfg.out + "/ablate.log", std::ios::app);
    LogFn log = [&](const std::string& line) {
        log_file << line << "\n";
        std::cout << line << "\n";
    };
    AblationTable table = run_ablation(cfg, args.axis, cfg.out, args.jobs, log);
    const std::string csv = cfg.out + "/ablation_" + args.axis + ".csv";
    write_ablation_csv(table, csv);
    std::cout << "wrote " << csv << "\n";
    return 0;
}

int cmd_export(const CliArgs& args) {
    if (args.checkpoint_path.empty()) throw ConfigError("export-embeddings needs --checkpoint");
    CheckpointMeta meta = read_checkpoint_meta(args.checkpoint_path);
    RunConfig cfg = parse_config_text(meta.config_text);
    Model model = model_for(cfg);
    load_checkpoint(args.checkpoint_path, model);
    Dataset ds = dataset_for(cfg);
    const auto& split = pick_split(ds, args.split);

    std::string out_dir = cfg.out;
    for (const auto& [key, value] : args.overrides)
        if (key == "out") out_dir = value;
    std::filesystem::create_directories(out_dir);
    const std::string path = out_dir + "/embeddings.csv";
    export_embeddings(model, split, path);
    std::cout << "wrote " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        CliArgs args = parse_args(argc, argv);
        if (args.command == "help") {
            usage(std::cout);
            return 0;
        }
        if (args.command == "train") return cmd_train(args);
        if (args.command == "eval") return cmd_eval(args);
        if (args.command == "ablate") return cmd_ablate(args);
        if (args.command == "export-embeddings") return cmd_export(args);
        throw ConfigError("unknown command '" + args.command + "'");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const VersionError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 4;
    } catch (const ChecksumError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
