#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mapex/checkpoint.hpp"
#include "mapex/config.hpp"
#include "mapex/data.hpp"
#include "mapex/errors.hpp"
#include "mapex/model.hpp"
#include "mapex/prune.hpp"

using namespace mapex;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    fs::path p = fs::temp_directory_path() / "mapex_cli_io";
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(MAPEX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.experts = 4;
    cfg.expert_hidden = 8;
    cfg.top_k = 2;
    cfg.dec_depth = 1;
    cfg.dec_dim = 16;
    cfg.patch = 8;
    cfg.image_size = 16;
    cfg.modalities = default_data_config().modalities;
    return cfg;
}

const char* kTinyFlags =
    " --dim 16 --depth 2 --heads 2 --experts 4 --expert_hidden 8 --dec_depth 1 --dec_dim 16"
    " --image_size 16 --n_train 8 --n_val 4 --n_test 4 --steps 2 --batch 2 --log_every 1";

}  // namespace

TEST_CASE("command-line overrides beat the config file") {
    auto file = scratch() / "run.cfg";
    write_file(file, "alpha = 0.02\nsteps = 7  # trailing comment\n\n# full-line comment\n");
    RunConfig base = parse_config(file.string(), {});
    CHECK(base.get_double("alpha") == 0.02);
    CHECK(base.get_int("steps") == 7);
    RunConfig over = parse_config(file.string(), {{"alpha", "0.01"}});
    CHECK(over.get_double("alpha") == 0.01);
    CHECK(over.get_int("steps") == 7);
}

TEST_CASE("unknown keys are rejected by name") {
    RunConfig cfg;
    try {
        cfg.set("alpah", "0.01");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("alpah") != std::string::npos);
    }
    CHECK_THROWS_AS(cfg.set("steps", "abc"), ConfigError);
    CHECK_THROWS_AS(cfg.set("ft_frozen", "yes"), ConfigError);
    CHECK_THROWS_AS(cfg.set("alpha", "1.0x"), ConfigError);

    auto bad = scratch() / "bad.cfg";
    write_file(bad, "steps 7\n");
    CHECK_THROWS_AS(parse_config(bad.string(), {}), ConfigError);
    CHECK_THROWS_AS(parse_config((scratch() / "missing.cfg").string(), {}), ConfigError);
}

TEST_CASE("parsing the echo reproduces the config") {
    RunConfig a = parse_config("", {{"alpha", "0.25"}, {"routing", "pos_embed"}, {"steps", "9"}});
    auto file = scratch() / "echo.cfg";
    write_file(file, a.echo());
    RunConfig b = parse_config(file.string(), {});
    CHECK(b.echo() == a.echo());
    CHECK(b.get_double("alpha") == 0.25);
}

TEST_CASE("checkpoint round-trip is bit-identical") {
    MapexModel m = init_model(tiny_config(), 3);
    auto p1 = scratch() / "a.mpx";
    auto p2 = scratch() / "b.mpx";
    save_checkpoint(m, p1.string(), 42);
    LoadedCheckpoint lc = load_checkpoint(p1.string());
    CHECK(lc.step == 42);
    auto pa = named_parameters(m);
    auto pb = named_parameters(lc.model);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second.value() == pb[i].second.value());
    }
    save_checkpoint(lc.model, p2.string(), 42);
    CHECK(read_file(p1) == read_file(p2));
}

TEST_CASE("pruned checkpoints restore frozen routing exactly") {
    MapexModel m = init_model(tiny_config(), 5);
    PruneSpec spec{{0, 2}, 2};
    MapexModel p = prune(m, spec);
    auto path = scratch() / "pruned.mpx";
    save_checkpoint(p, path.string());
    MapexModel back = load_checkpoint(path.string()).model;

    REQUIRE(back.prune_info.has_value());
    CHECK(back.prune_info->spec.modalities == spec.modalities);
    CHECK(back.prune_info->spec.k == spec.k);
    CHECK(back.prune_info->retained == p.prune_info->retained);
    for (std::size_t l = 0; l < p.blocks.size(); ++l)
        for (const auto& [mid, fz] : p.prune_info->frozen[l]) {
            const auto& bz = back.prune_info->frozen[l].at(mid);
            CHECK(bz.selected == fz.selected);
            CHECK(bz.gates == fz.gates);
            CHECK(bz.probs == fz.probs);
        }

    DataConfig dc = default_data_config();
    dc.image_size = 16;
    dc.n_train = 4;
    dc.n_val = 2;
    dc.n_test = 2;
    Dataset ds = generate(dc);
    normalize(ds, compute_stats(ds));
    for (const auto& s : ds.train)
        CHECK(forward_features(back, s, spec.modalities) ==
              forward_features(p, s, spec.modalities));
}

TEST_CASE("corrupt checkpoints fail loudly") {
    MapexModel m = init_model(tiny_config(), 7);
    auto path = scratch() / "corrupt.mpx";
    save_checkpoint(m, path.string());
    auto size = fs::file_size(path);
    fs::resize_file(path, size - 1);
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);

    auto bad = scratch() / "badmagic.mpx";
    write_file(bad, "NOTACKPT 1\n");
    CHECK_THROWS_AS(load_checkpoint(bad.string()), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint((scratch() / "nope.mpx").string()), CheckpointError);
}

TEST_CASE("cli rejects bad invocations") {
    CHECK(run_cli("") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("pretrain --alpah 0.01") == 1);
    CHECK(run_cli("knn --out " + (scratch() / "noop").string()) == 1);  // needs --checkpoint
}

TEST_CASE("cli pipeline runs and is seed-deterministic") {
    auto base = scratch() / "pipe";
    fs::remove_all(base);
    std::string o1 = (base / "run1").string();
    std::string o2 = (base / "run2").string();

    REQUIRE(run_cli("pretrain --out " + o1 + kTinyFlags) == 0);
    REQUIRE(run_cli("pretrain --out " + o2 + kTinyFlags) == 0);
    CHECK(read_file(o1 + "/metrics.csv") == read_file(o2 + "/metrics.csv"));
    CHECK(read_file(o1 + "/model.mpx") == read_file(o2 + "/model.mpx"));
    CHECK(!read_file(o1 + "/config.txt").empty());

    std::string o3 = (base / "run3").string();
    REQUIRE(run_cli("pretrain --out " + o3 + " --seed 1" + kTinyFlags) == 0);
    CHECK(read_file(o1 + "/metrics.csv") != read_file(o3 + "/metrics.csv"));

    std::string op = (base / "pruned").string();
    REQUIRE(run_cli("prune --checkpoint " + o1 + "/model.mpx --out " + op +
                    " --prune_modalities 0 --prune_k 2") == 0);
    std::string ok = (base / "knn").string();
    REQUIRE(run_cli("knn --checkpoint " + op + "/pruned.mpx --out " + ok +
                    " --eval_modalities 0 --knn_k 3" + kTinyFlags) == 0);
    CHECK(fs::exists(ok + "/knn.csv"));
    fs::remove_all(base);
}
