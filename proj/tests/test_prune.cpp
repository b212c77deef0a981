#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "mapex/data.hpp"
#include "mapex/errors.hpp"
#include "mapex/model.hpp"
#include "mapex/prune.hpp"

using namespace mapex;

namespace {

ModelConfig tiny_config(int top_k = 2) {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.experts = 4;
    cfg.expert_hidden = 8;
    cfg.top_k = top_k;
    cfg.dec_depth = 1;
    cfg.dec_dim = 16;
    cfg.patch = 8;
    cfg.image_size = 16;
    cfg.modalities = default_data_config().modalities;
    return cfg;
}

std::vector<MultiModalSample> probes(int n) {
    DataConfig dc = default_data_config();
    dc.image_size = 16;
    dc.n_train = n;
    dc.n_val = 4;
    dc.n_test = 4;
    Dataset ds = generate(dc);
    normalize(ds, compute_stats(ds));
    return ds.train;
}

bool subset(const std::vector<int>& a, const std::vector<int>& b) {
    return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace

TEST_CASE("retained sets are unions of per-modality selections") {
    MapexModel m = init_model(tiny_config(), 3);
    PruneSpec spec{{0, 2}, 2};
    auto retained = retained_expert_sets(m, spec);
    REQUIRE(retained.size() == m.blocks.size());
    for (std::size_t l = 0; l < retained.size(); ++l) {
        std::set<int> expect;
        std::vector<int> all = {0, 1, 2, 3};
        for (int mid : spec.modalities) {
            RoutingDecision d = route_restricted(m, static_cast<int>(l), mid, all, spec.k);
            expect.insert(d.selected.begin(), d.selected.end());
        }
        CHECK(retained[l] == std::vector<int>(expect.begin(), expect.end()));
        CHECK(retained[l].size() >= 2u);
        CHECK(retained[l].size() <= 4u);
        CHECK(std::is_sorted(retained[l].begin(), retained[l].end()));
    }
}

TEST_CASE("single-modality prune keeps exactly k experts per layer") {
    MapexModel m = init_model(tiny_config(), 5);
    for (int k = 1; k <= 4; ++k) {
        auto retained = retained_expert_sets(m, PruneSpec{{1}, k});
        for (const auto& layer : retained) CHECK(layer.size() == static_cast<std::size_t>(k));
    }
}

TEST_CASE("retained sets grow monotonically with k") {
    MapexModel m = init_model(tiny_config(), 7);
    PruneSpec spec{{0, 1, 3}, 1};
    auto prev = retained_expert_sets(m, spec);
    for (int k = 2; k <= 4; ++k) {
        spec.k = k;
        auto cur = retained_expert_sets(m, spec);
        for (std::size_t l = 0; l < cur.size(); ++l) CHECK(subset(prev[l], cur[l]));
        prev = cur;
    }
}

TEST_CASE("pruned model matches the full model on its modalities") {
    auto batch = probes(50);
    for (std::uint64_t seed : {0, 1, 2}) {
        MapexModel m = init_model(tiny_config(), seed);
        for (const PruneSpec& spec : {PruneSpec{{0}, 2}, PruneSpec{{1, 2}, 2},
                                      PruneSpec{{0, 3}, 2}, PruneSpec{{0, 1, 2, 3}, 2}}) {
            MapexModel p = prune(m, spec);
            CHECK(verify_equivalence(m, p, spec, batch) <= 1e-9);
        }
    }
}

TEST_CASE("k equal to the expert count is a no-op rearrangement") {
    MapexModel m = init_model(tiny_config(4), 11);
    PruneSpec spec{{0, 1, 2, 3}, 4};
    MapexModel p = prune(m, spec);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        CHECK(p.blocks[l].moe.experts.size() == 4u);
        CHECK(p.prune_info->retained[l] == std::vector<int>{0, 1, 2, 3});
        for (std::size_t e = 0; e < 4; ++e)
            CHECK(p.blocks[l].moe.experts[e].fc1.w.value() ==
                  m.blocks[l].moe.experts[e].fc1.w.value());
    }
    CHECK(verify_equivalence(m, p, spec, probes(10)) == 0.0);
}

TEST_CASE("frozen decisions are remapped and normalized") {
    MapexModel m = init_model(tiny_config(), 13);
    PruneSpec spec{{1, 3}, 2};
    MapexModel p = prune(m, spec);
    REQUIRE(p.prune_info.has_value());
    CHECK(p.prune_info->spec.modalities == spec.modalities);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        int local = static_cast<int>(p.blocks[l].moe.experts.size());
        for (const auto& [mid, fz] : p.prune_info->frozen[l]) {
            CHECK((mid == 1 || mid == 3));
            CHECK(fz.selected.size() == 2u);
            double gz = 0.0, pz = 0.0;
            for (int i : fz.selected) CHECK((i >= 0 && i < local));
            for (double g : fz.gates) gz += g;
            for (double q : fz.probs) pz += q;
            CHECK(fz.probs.size() == static_cast<std::size_t>(local));
            CHECK(std::abs(gz - 1.0) <= 1e-12);
            CHECK(std::abs(pz - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("pruning drops parameters of removed experts and modalities") {
    MapexModel m = init_model(tiny_config(), 17);
    MapexModel p = prune(m, PruneSpec{{0}, 1});
    CHECK(param_count(p) < param_count(m));
    CHECK(p.patch_embed.count(1) == 0);
    CHECK(p.modality_tok.count(2) == 0);
    CHECK(p.eom_tok.count(3) == 0);
    CHECK(p.dec_head.count(1) == 0);
    CHECK(p.patch_embed.count(0) == 1);
    CHECK(p.cfg.modalities.size() == 1u);
}

TEST_CASE("perturbing a retained expert breaks equivalence") {
    MapexModel m = init_model(tiny_config(), 19);
    PruneSpec spec{{0, 1}, 2};
    MapexModel p = prune(m, spec);
    auto batch = probes(10);
    REQUIRE(verify_equivalence(m, p, spec, batch) <= 1e-9);
    p.blocks[0].moe.experts[0].fc1.w.value()[0] += 1.0;
    CHECK(verify_equivalence(m, p, spec, batch) > 1e-6);
}

TEST_CASE("a pruned model cannot be pruned again") {
    MapexModel m = init_model(tiny_config(), 23);
    MapexModel p = prune(m, PruneSpec{{0, 1}, 2});
    CHECK_THROWS_AS(prune(p, PruneSpec{{0}, 1}), ContractError);
}

TEST_CASE("the shared expert survives pruning") {
    ModelConfig cfg = tiny_config();
    cfg.shared_expert = true;
    MapexModel m = init_model(cfg, 29);
    PruneSpec spec{{2}, 2};
    MapexModel p = prune(m, spec);
    for (const auto& b : p.blocks) CHECK(b.moe.shared.has_value());
    CHECK(verify_equivalence(m, p, spec, probes(10)) <= 1e-9);
}

TEST_CASE("deterministic routing prunes to the forced experts") {
    ModelConfig cfg = tiny_config();
    cfg.routing = RoutingMode::Deterministic;
    cfg.top_k = 1;
    MapexModel m = init_model(cfg, 31);
    PruneSpec spec{{0, 1}, 1};
    auto retained = retained_expert_sets(m, spec);
    for (const auto& layer : retained) CHECK(layer == std::vector<int>{0, 1});
    MapexModel p = prune(m, spec);
    CHECK(verify_equivalence(m, p, spec, probes(10)) <= 1e-9);
}

TEST_CASE("prune spec validation") {
    MapexModel m = init_model(tiny_config(), 37);
    CHECK_THROWS_AS(prune(m, PruneSpec{{}, 2}), ConfigError);
    CHECK_THROWS_AS(prune(m, PruneSpec{{0}, 0}), ConfigError);
    CHECK_THROWS_AS(prune(m, PruneSpec{{0}, 5}), ConfigError);
    CHECK_THROWS_AS(prune(m, PruneSpec{{7}, 2}), ConfigError);
}
