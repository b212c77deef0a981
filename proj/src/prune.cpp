#include "mapex/prune.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mapex/errors.hpp"

namespace mapex {

namespace {

void validate_spec(const MapexModel& model, const PruneSpec& spec) {
    if (spec.modalities.empty()) throw ConfigError("prune spec has empty downstream modality set");
    int e = static_cast<int>(model.blocks.empty() ? model.cfg.experts
                                                  : model.blocks[0].moe.experts.size());
    if (spec.k < 1 || spec.k > e) throw ConfigError("prune spec k out of [1, experts]");
    for (int mid : spec.modalities)
        if (!model.cfg.has_modality(mid))
            throw ConfigError("prune spec modality " + std::to_string(mid) +
                              " not in the pretraining set");
}

Tensor copy_tensor(const Tensor& t) { return Tensor::from(t.shape(), t.value(), true); }

Linear copy_linear(const Linear& l) { return {copy_tensor(l.w), copy_tensor(l.b)}; }

ExpertFfn copy_expert(const ExpertFfn& e) { return {copy_linear(e.fc1), copy_linear(e.fc2)}; }

// full-model routing decision with k overridden (deterministic mode keeps
// its forced single expert)
RoutingDecision decision_for(const MapexModel& model, int layer, int mid, int k) {
    if (model.cfg.routing == RoutingMode::Deterministic) return route(model, layer, mid);
    std::vector<int> all(model.blocks[layer].moe.experts.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return route_restricted(model, layer, mid, all, k);
}

}  // namespace

std::vector<std::vector<int>> retained_expert_sets(const MapexModel& model, const PruneSpec& spec) {
    validate_spec(model, spec);
    std::vector<std::vector<int>> out;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        std::set<int> keep;
        for (int mid : spec.modalities) {
            RoutingDecision d = decision_for(model, static_cast<int>(l), mid, spec.k);
            keep.insert(d.selected.begin(), d.selected.end());
        }
        out.emplace_back(keep.begin(), keep.end());
    }
    return out;
}

MapexModel prune(const MapexModel& model, const PruneSpec& spec) {
    validate_spec(model, spec);
    if (model.prune_info) throw ContractError("model is already pruned");
    auto retained = retained_expert_sets(model, spec);

    MapexModel out;
    out.cfg = model.cfg;
    out.cfg.top_k = spec.k;
    out.cfg.modalities.clear();
    for (const auto& m : model.cfg.modalities)
        if (std::find(spec.modalities.begin(), spec.modalities.end(), m.id) != spec.modalities.end())
            out.cfg.modalities.push_back(m);

    for (int mid : spec.modalities) {
        out.patch_embed[mid] = copy_linear(model.patch_embed.at(mid));
        out.modality_tok[mid] = copy_tensor(model.modality_tok.at(mid));
        out.eom_tok[mid] = copy_tensor(model.eom_tok.at(mid));
        out.dec_head[mid] = copy_linear(model.dec_head.at(mid));
    }
    out.mask_tok = copy_tensor(model.mask_tok);

    PruneInfo info;
    info.spec = spec;
    info.retained = retained;
    info.frozen.resize(model.blocks.size());

    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& src = model.blocks[l];
        EncoderBlock b;
        b.ln1_g = copy_tensor(src.ln1_g);
        b.ln1_b = copy_tensor(src.ln1_b);
        b.wq = copy_linear(src.wq);
        b.wk = copy_linear(src.wk);
        b.wv = copy_linear(src.wv);
        b.wo = copy_linear(src.wo);
        b.ln2_g = copy_tensor(src.ln2_g);
        b.ln2_b = copy_tensor(src.ln2_b);
        b.moe.router_w = copy_tensor(src.moe.router_w);
        const auto& keep = retained[l];
        std::map<int, int> remap;  // old -> new
        for (std::size_t n = 0; n < keep.size(); ++n) {
            remap[keep[n]] = static_cast<int>(n);
            b.moe.experts.push_back(copy_expert(src.moe.experts[keep[n]]));
        }
        if (src.moe.shared) b.moe.shared = copy_expert(*src.moe.shared);

        for (int mid : spec.modalities) {
            RoutingDecision d = decision_for(model, static_cast<int>(l), mid, spec.k);
            FrozenDecision fz;
            for (int old : d.selected) fz.selected.push_back(remap.at(old));
            fz.gates = d.gates.value();
            // d.probs covers all pretraining experts; restrict and
            // renormalize over the retained set
            const std::vector<double>& probs_full = d.probs.value();
            double z = 0.0;
            for (int old : keep) z += probs_full[old];
            for (int old : keep)
                fz.probs.push_back(z > 0.0 ? probs_full[old] / z : 1.0 / keep.size());
            info.frozen[l][mid] = std::move(fz);
        }
        out.blocks.push_back(std::move(b));
    }

    out.enc_ln_g = copy_tensor(model.enc_ln_g);
    out.enc_ln_b = copy_tensor(model.enc_ln_b);
    out.dec_proj = copy_linear(model.dec_proj);
    for (const auto& db : model.dec_blocks) {
        DecoderBlock b;
        b.ln1_g = copy_tensor(db.ln1_g);
        b.ln1_b = copy_tensor(db.ln1_b);
        b.wq = copy_linear(db.wq);
        b.wk = copy_linear(db.wk);
        b.wv = copy_linear(db.wv);
        b.wo = copy_linear(db.wo);
        b.ln2_g = copy_tensor(db.ln2_g);
        b.ln2_b = copy_tensor(db.ln2_b);
        b.fc1 = copy_linear(db.fc1);
        b.fc2 = copy_linear(db.fc2);
        out.dec_blocks.push_back(std::move(b));
    }
    out.dec_ln_g = copy_tensor(model.dec_ln_g);
    out.dec_ln_b = copy_tensor(model.dec_ln_b);
    out.prune_info = std::move(info);
    return out;
}

double verify_equivalence(const MapexModel& full, const MapexModel& pruned, const PruneSpec& spec,
                          const std::vector<MultiModalSample>& probes) {
    if (full.cfg.shared_expert != pruned.cfg.shared_expert)
        throw ContractError("shared-expert asymmetry between full and pruned model");
    double worst = 0.0;
    for (const auto& probe : probes) {
        auto a = forward_features(full, probe, spec.modalities);
        auto b = forward_features(pruned, probe, spec.modalities);
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace mapex
