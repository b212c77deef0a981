#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mapex/checkpoint.hpp"
#include "mapex/config.hpp"
#include "mapex/data.hpp"
#include "mapex/errors.hpp"
#include "mapex/eval.hpp"
#include "mapex/gradcheck.hpp"
#include "mapex/model.hpp"
#include "mapex/pretrain.hpp"
#include "mapex/prune.hpp"
#include "mapex/rng.hpp"

namespace fs = std::filesystem;
using namespace mapex;

namespace {

const char* kUsage =
    "usage: mapex <command> [--config <file>] [--key value ...]\n"
    "commands: generate pretrain prune knn finetune sweep fewshot verify\n"
    "all commands write artifacts under --out (default ./out)\n";

std::string out_dir(const RunConfig& cfg) {
    std::string dir = cfg.get_string("out");
    fs::create_directories(dir);
    std::ofstream echo(dir + "/config.txt");
    echo << cfg.echo();
    return dir;
}

Dataset load_normalized(const RunConfig& cfg) {
    std::string path = cfg.get_string("dataset");
    Dataset ds = path.empty() ? generate(cfg.data_config()) : import_dataset(path);
    normalize(ds, compute_stats(ds));
    return ds;
}

MapexModel load_model(const RunConfig& cfg) {
    std::string path = cfg.get_string("checkpoint");
    if (path.empty()) throw ConfigError("this command needs --checkpoint <file.mpx>");
    return load_checkpoint(path).model;
}

std::vector<int> eval_modalities(const RunConfig& cfg, const MapexModel& model) {
    if (cfg.get_string("eval_modalities") == "all") {
        std::vector<int> ids;
        for (const auto& m : model.cfg.modalities) ids.push_back(m.id);
        return ids;
    }
    return cfg.get_int_list("eval_modalities");
}

int cmd_generate(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    Dataset ds = generate(cfg.data_config());
    export_dataset(ds, dir + "/dataset");
    std::printf("generate: %zu train / %zu val / %zu test samples, %zu modalities -> %s/dataset\n",
                ds.train.size(), ds.val.size(), ds.test.size(), ds.cfg.modalities.size(),
                dir.c_str());
    return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    Dataset ds = load_normalized(cfg);
    MapexModel model = init_model(cfg.model_config(), static_cast<std::uint64_t>(cfg.get_int("seed")));
    PretrainResult res = pretrain(model, ds, cfg.pretrain_config());
    write_metrics_csv(res.metrics, dir + "/metrics.csv");
    save_checkpoint(model, dir + "/model.mpx", cfg.get_int("steps"));
    const auto& last = res.metrics.back();
    std::printf("pretrain: %ld steps, total %.6f (rec %.6f, load %.6f), val mse %.6f -> %.6f, %s/model.mpx\n",
                cfg.get_int("steps"), last.loss.total, last.loss.l_rec, last.loss.l_load,
                res.initial_val_mse, res.final_val_mse, dir.c_str());
    return 0;
}

int cmd_prune(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    MapexModel model = load_model(cfg);
    PruneSpec spec = cfg.prune_spec();
    MapexModel pruned = prune(model, spec);
    save_checkpoint(pruned, dir + "/pruned.mpx");
    long kept = 0, total = 0;
    for (const auto& layer : pruned.prune_info->retained) kept += static_cast<long>(layer.size());
    total = static_cast<long>(model.cfg.experts) * model.cfg.depth;
    std::printf("prune: k=%d over %zu modalities, kept %ld/%ld experts, %ld params -> %s/pruned.mpx\n",
                spec.k, spec.modalities.size(), kept, total, param_count(pruned), dir.c_str());
    return 0;
}

int cmd_knn(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    MapexModel model = load_model(cfg);
    Dataset ds = load_normalized(cfg);
    std::vector<int> mods = eval_modalities(cfg, model);
    auto train_f = extract_features(model, ds.train, mods);
    auto test_f = extract_features(model, ds.test, mods);
    int k = static_cast<int>(cfg.get_int("knn_k"));
    ProbeResult r = knn_eval(train_f, split_labels(ds.train), test_f, split_labels(ds.test), k,
                             ds.cfg.classes);
    r.modalities = mods;
    r.checkpoint_id = cfg.get_string("checkpoint");
    r.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    write_probe_csv(r, dir + "/knn.csv");
    std::printf("knn: k=%d accuracy %.4f over %zu modalities -> %s/knn.csv\n", k, r.accuracy,
                mods.size(), dir.c_str());
    return 0;
}

int cmd_finetune(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    MapexModel model = load_model(cfg);
    Dataset ds = load_normalized(cfg);
    FinetuneConfig ft = cfg.finetune_config();
    ProbeResult r = finetune(model, ds, ft);
    r.checkpoint_id = cfg.get_string("checkpoint");
    write_probe_csv(r, dir + "/finetune.csv");
    std::printf("finetune: %d epochs (%s), test accuracy %.4f -> %s/finetune.csv\n", ft.epochs,
                ft.frozen ? "frozen encoder" : "full", r.accuracy, dir.c_str());
    return 0;
}

int cmd_sweep(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    Dataset ds = load_normalized(cfg);
    SweepConfig sc;
    sc.model = cfg.model_config();
    sc.pretrain = cfg.pretrain_config();
    sc.knn_k = static_cast<int>(cfg.get_int("knn_k"));
    sc.prune_k = static_cast<int>(cfg.get_int("prune_k"));
    sc.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    std::string kind = cfg.get_string("sweep_kind");
    auto rows = sweep(kind, ds, sc);
    write_sweep_csv(rows, dir + "/sweep.csv");
    std::printf("sweep: kind=%s, %zu cells -> %s/sweep.csv\n", kind.c_str(), rows.size(),
                dir.c_str());
    return 0;
}

int cmd_fewshot(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    MapexModel model = load_model(cfg);
    Dataset ds = load_normalized(cfg);
    int k_shot = static_cast<int>(cfg.get_int("k_shot"));
    ProbeResult r = few_shot_eval(model, ds, k_shot, static_cast<std::uint64_t>(cfg.get_int("seed")),
                                  cfg.finetune_config());
    write_probe_csv(r, dir + "/fewshot.csv");
    std::printf("fewshot: %d shots per class, test accuracy %.4f -> %s/fewshot.csv\n", k_shot,
                r.accuracy, dir.c_str());
    return 0;
}

int cmd_verify(const RunConfig& cfg) {
    std::string dir = out_dir(cfg);
    std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed"));

    ModelConfig mc;
    mc.dim = 16;
    mc.depth = 2;
    mc.heads = 2;
    mc.experts = 4;
    mc.expert_hidden = 8;
    mc.top_k = 2;
    mc.dec_depth = 1;
    mc.dec_dim = 16;
    mc.patch = 8;
    mc.image_size = 16;
    mc.modalities = default_data_config().modalities;
    mc.validate();
    MapexModel model = init_model(mc, seed);

    DataConfig dc = default_data_config();
    dc.image_size = 16;
    dc.n_train = 8;
    dc.n_val = 2;
    dc.n_test = 2;
    dc.seed = seed;
    Dataset ds = generate(dc);
    normalize(ds, compute_stats(ds));

    std::vector<int> all_mods;
    for (const auto& m : mc.modalities) all_mods.push_back(m.id);
    const MultiModalSample& probe = ds.train[0];
    auto loss_fn = [&]() {
        Tensor f = forward_features_tensor(model, probe, all_mods);
        return sum(mul(f, f));
    };
    std::vector<Tensor> checked = {
        model.blocks[0].moe.router_w,        model.blocks[0].moe.experts[0].fc1.b,
        model.blocks[0].wq.b,                model.patch_embed.at(0).b,
        model.modality_tok.at(0),            model.enc_ln_g,
    };
    double grad_err = grad_check(loss_fn, checked, 1e-3);

    PruneSpec spec;
    spec.modalities = {0};
    spec.k = mc.top_k;
    MapexModel pruned = prune(model, spec);
    std::vector<MultiModalSample> probes(ds.val.begin(), ds.val.end());
    double equiv = verify_equivalence(model, pruned, spec, probes);

    bool ok = grad_err < 1e-4 && equiv <= 1e-9;
    std::printf("verify: grad check worst rel err %.3e (< 1e-4), prune equivalence max diff %.3e (<= 1e-9): %s\n",
                grad_err, equiv, ok ? "ok" : "FAILED");
    std::ofstream(dir + "/verify.txt") << "grad_check = " << grad_err << "\nequivalence = " << equiv
                                       << "\nok = " << (ok ? 1 : 0) << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fputs(kUsage, stderr);
        return 2;
    }
    std::string command = argv[1];
    const std::vector<std::string> known = {"generate", "pretrain", "prune",   "knn",
                                            "finetune", "sweep",    "fewshot", "verify"};
    bool found = false;
    for (const auto& c : known) found = found || c == command;
    if (!found) {
        std::fprintf(stderr, "unknown command: %s\n", command.c_str());
        std::fputs(kUsage, stderr);
        return 2;
    }

    try {
        std::string config_file;
        std::vector<std::pair<std::string, std::string>> overrides;
        for (int i = 2; i < argc; ++i) {
            std::string tok = argv[i];
            if (tok.rfind("--", 0) != 0)
                throw ConfigError("expected --key, got '" + tok + "'");
            if (i + 1 >= argc) throw ConfigError("missing value for " + tok);
            std::string key = tok.substr(2);
            std::string val = argv[++i];
            if (key == "config")
                config_file = val;
            else
                overrides.emplace_back(key, val);
        }
        RunConfig cfg = parse_config(config_file, overrides);

        if (command == "generate") return cmd_generate(cfg);
        if (command == "pretrain") return cmd_pretrain(cfg);
        if (command == "prune") return cmd_prune(cfg);
        if (command == "knn") return cmd_knn(cfg);
        if (command == "finetune") return cmd_finetune(cfg);
        if (command == "sweep") return cmd_sweep(cfg);
        if (command == "fewshot") return cmd_fewshot(cfg);
        return cmd_verify(cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
