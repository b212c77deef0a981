#include "mapex/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mapex/errors.hpp"
#include "mapex/optim.hpp"

namespace mapex {

MaskEntry sample_mask(int tokens, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("mask ratio must be in (0,1)");
    int n_masked = static_cast<int>(std::floor(ratio * tokens + 0.5));
    if (n_masked == 0 || n_masked == tokens)
        throw ConfigError("mask ratio rounds to an empty visible or masked set");
    MaskEntry e;
    e.masked = rng.sample_without_replacement(tokens, n_masked);
    std::sort(e.masked.begin(), e.masked.end());
    std::vector<bool> is_masked(tokens, false);
    for (int p : e.masked) is_masked[p] = true;
    for (int p = 0; p < tokens; ++p)
        if (!is_masked[p]) e.visible.push_back(p);
    return e;
}

std::vector<bool> modality_dropout(int modality_count, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("modality dropout p must be in [0,1)");
    std::vector<bool> dropped(modality_count, false);
    int n_dropped = 0;
    for (int m = 0; m < modality_count; ++m) {
        dropped[m] = rng.uniform() < p;
        if (dropped[m]) ++n_dropped;
    }
    if (n_dropped == modality_count) {
        dropped[rng.uniform_int(modality_count)] = false;
    }
    return dropped;
}

Tensor compute_utilization(const std::map<int, RoutingDecision>& decisions,
                           const std::map<int, int>& token_counts) {
    if (decisions.empty()) throw ContractError("no routing decisions");
    double total = 0.0;
    for (const auto& [mid, cnt] : token_counts) total += cnt;
    Tensor u;
    for (const auto& [mid, d] : decisions) {
        double w = token_counts.at(mid) / total;
        Tensor term = scale(d.probs, w);
        u = u.defined() ? add(u, term) : term;
    }
    return u;
}

Tensor load_balance_loss(const Tensor& utilization) {
    int e = utilization.size();
    Tensor d = add_scalar(utilization, -1.0 / e);
    return scale(sum(mul(d, d)), 1.0 / e);
}

namespace {

// one masked-autoencoding forward for a single sample; returns the mean of
// per-modality masked-patch MSE over non-dropped modalities
Tensor sample_recon_loss(const MapexModel& model, const MultiModalSample& sample,
                         const MaskPlan& plan, const std::vector<bool>& dropped,
                         MoeTrace* trace) {
    const auto& cfg = model.cfg;
    const int T = cfg.tokens_per_modality();
    std::vector<Tensor> parts;
    std::vector<Segment> segments;
    std::vector<int> seg_start;
    int pos = 0;
    for (const auto& spec : cfg.modalities) {
        const MaskEntry& me = plan.at(spec.id);
        int v = static_cast<int>(me.visible.size());
        if (dropped[spec.id]) {
            parts.push_back(Tensor::zeros({v + 1, cfg.dim}));
        } else {
            parts.push_back(gather_rows(embed_modality_tokens(model, sample, spec.id), me.visible));
            parts.push_back(model.eom_tok.at(spec.id));
        }
        segments.push_back({spec.id, v + 1});
        seg_start.push_back(pos);
        pos += v + 1;
    }
    Tensor enc = encoder_forward(model, concat_rows(parts), segments, trace);

    Tensor loss;
    int used = 0;
    for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
        const auto& spec = cfg.modalities[m];
        if (dropped[spec.id]) continue;
        const MaskEntry& me = plan.at(spec.id);
        std::vector<int> rows(me.visible.size());
        std::iota(rows.begin(), rows.end(), seg_start[m]);
        Tensor pred = decode_modality(model, gather_rows(enc, rows), me.visible, me.masked, spec.id);
        Tensor target = sample_patches(cfg, sample, spec.id);
        int pdim = target.cols();
        std::vector<double> mv(static_cast<std::size_t>(T) * pdim, 0.0);
        for (int p : me.masked)
            for (int j = 0; j < pdim; ++j) mv[static_cast<std::size_t>(p) * pdim + j] = 1.0;
        Tensor mask = Tensor::from({T, pdim}, std::move(mv));
        Tensor lm = mse_masked(pred, target, mask);
        loss = loss.defined() ? add(loss, lm) : lm;
        ++used;
    }
    if (!loss.defined()) throw ContractError("all modalities dropped");
    return scale(loss, 1.0 / used);
}

}  // namespace

PretrainResult pretrain(MapexModel& model, const Dataset& data, const PretrainConfig& cfg) {
    const auto& mcfg = model.cfg;
    const int T = mcfg.tokens_per_modality();
    const int m = static_cast<int>(mcfg.modalities.size());
    if (data.train.empty()) throw DataError("empty training split");

    std::vector<Tensor> params;
    for (auto& [name, t] : named_parameters(model)) params.push_back(t);
    AdamW opt(params, {cfg.lr, 0.9, 0.95, 1e-8, 0.05});

    Rng batch_rng(mix_seed(cfg.seed, 1));
    Rng mask_rng(mix_seed(cfg.seed, 2));
    Rng drop_rng(mix_seed(cfg.seed, 3));

    PretrainResult result;
    result.initial_val_mse = masked_recon_mse(model, data.val, mix_seed(cfg.seed, 4));

    for (long step = 0; step < cfg.steps; ++step) {
        std::vector<bool> dropped = modality_dropout(m, cfg.modality_dropout_p, drop_rng);

        Tensor l_rec;
        MoeTrace trace;
        std::map<int, int> token_counts;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& sample = data.train[batch_rng.uniform_int(static_cast<int>(data.train.size()))];
            MaskPlan plan;
            for (const auto& spec : mcfg.modalities)
                plan[spec.id] = sample_mask(T, mcfg.mask_ratio, mask_rng);
            if (b == 0)
                for (const auto& spec : mcfg.modalities)
                    token_counts[spec.id] = static_cast<int>(plan[spec.id].visible.size()) + 1;
            Tensor ls = sample_recon_loss(model, sample, plan, dropped, b == 0 ? &trace : nullptr);
            l_rec = l_rec.defined() ? add(l_rec, ls) : ls;
        }
        l_rec = scale(l_rec, 1.0 / cfg.batch);

        // routing decisions are token-independent, so one sample's trace
        // carries the step's utilization for every layer
        Tensor l_load;
        for (std::size_t l = 0; l < trace.decisions.size(); ++l) {
            Tensor ll = load_balance_loss(compute_utilization(trace.decisions[l], token_counts));
            l_load = l_load.defined() ? add(l_load, ll) : ll;
        }
        l_load = scale(l_load, 1.0 / trace.decisions.size());

        Tensor total = add(l_rec, scale(l_load, cfg.alpha));
        if (!std::isfinite(total.item()))
            throw NumericError("non-finite loss at step " + std::to_string(step));

        opt.zero_grad();
        backward(total);
        opt.step();

        if (step % cfg.log_every == 0 || step == cfg.steps - 1) {
            StepMetrics sm;
            sm.step = step;
            sm.loss = {l_rec.item(), l_load.item(), cfg.alpha, total.item()};
            for (std::size_t l = 0; l < trace.decisions.size(); ++l)
                sm.utilization.push_back(
                    compute_utilization(trace.decisions[l], token_counts).value());
            result.metrics.push_back(std::move(sm));
        }
    }
    result.final_val_mse = masked_recon_mse(model, data.val, mix_seed(cfg.seed, 4));
    return result;
}

double masked_recon_mse(const MapexModel& model, const std::vector<MultiModalSample>& samples,
                        std::uint64_t mask_seed) {
    if (samples.empty()) throw DataError("empty evaluation split");
    const int T = model.cfg.tokens_per_modality();
    std::vector<bool> dropped(model.cfg.modalities.size(), false);
    double acc = 0.0;
    for (const auto& s : samples) {
        Rng rng(mix_seed(mask_seed, static_cast<std::uint64_t>(s.id)));
        MaskPlan plan;
        for (const auto& spec : model.cfg.modalities)
            plan[spec.id] = sample_mask(T, model.cfg.mask_ratio, rng);
        acc += sample_recon_loss(model, s, plan, dropped, nullptr).item();
    }
    return acc / samples.size();
}

void write_metrics_csv(const std::vector<StepMetrics>& metrics, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::size_t e = metrics.empty() ? 0 : metrics[0].utilization[0].size();
    f << "step,l_rec,l_load,total,layer";
    for (std::size_t i = 0; i < e; ++i) f << ",u_" << i;
    f << "\n";
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    for (const auto& sm : metrics) {
        for (std::size_t l = 0; l < sm.utilization.size(); ++l) {
            f << sm.step << "," << fmt(sm.loss.l_rec) << "," << fmt(sm.loss.l_load) << ","
              << fmt(sm.loss.total) << "," << l;
            for (double u : sm.utilization[l]) f << "," << fmt(u);
            f << "\n";
        }
    }
}

}  // namespace mapex
