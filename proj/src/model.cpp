#include "mapex/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mapex/errors.hpp"
#include "mapex/rng.hpp"

namespace mapex {

RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "deterministic") return RoutingMode::Deterministic;
    if (s == "pos-embed") return RoutingMode::PosEmbed;
    if (s == "modality") return RoutingMode::Modality;
    throw ConfigError("unknown routing mode: " + s);
}

std::string to_string(RoutingMode m) {
    switch (m) {
        case RoutingMode::Deterministic: return "deterministic";
        case RoutingMode::PosEmbed: return "pos-embed";
        case RoutingMode::Modality: return "modality";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (modalities.empty()) throw ConfigError("model needs at least one modality");
    if (dim % heads != 0) throw ConfigError("dim must be divisible by head count");
    if (dim % 4 != 0) throw ConfigError("dim must be divisible by 4 for 2-D sincos embedding");
    if (dec_dim % heads != 0) throw ConfigError("dec_dim must be divisible by head count");
    if (experts < 1) throw ConfigError("need at least one expert");
    if (top_k < 1 || top_k > experts) throw ConfigError("top_k must be in [1, experts]");
    if (mask_ratio <= 0.0 || mask_ratio >= 1.0) throw ConfigError("mask ratio must be in (0,1)");
    if (image_size % patch != 0) throw ConfigError("image size not divisible by patch size");
    if (routing == RoutingMode::Deterministic && experts < static_cast<int>(modalities.size()))
        throw ConfigError("deterministic routing needs experts >= modalities");
}

const ModalitySpec& ModelConfig::modality(int id) const {
    for (const auto& m : modalities)
        if (m.id == id) return m;
    throw ModalityUnavailableError("modality " + std::to_string(id) + " not in model");
}

bool ModelConfig::has_modality(int id) const {
    for (const auto& m : modalities)
        if (m.id == id) return true;
    return false;
}

// ---- init -------------------------------------------------------------------

namespace {

Tensor rnd(Rng& rng, std::vector<int> shape, double std = 0.02) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.value()) v = std * rng.normal();
    return t;
}

Linear init_linear(Rng& rng, int in, int out) {
    return {rnd(rng, {in, out}), Tensor::zeros({1, out}, true)};
}

ExpertFfn init_expert(Rng& rng, int dim, int hidden) {
    return {init_linear(rng, dim, hidden), init_linear(rng, hidden, dim)};
}

Tensor linear_fwd(const Linear& l, const Tensor& x) { return add(matmul(x, l.w), l.b); }

Tensor expert_fwd(const ExpertFfn& e, const Tensor& x) {
    return linear_fwd(e.fc2, gelu(linear_fwd(e.fc1, x)));
}

}  // namespace

MapexModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    MapexModel m;
    m.cfg = cfg;
    for (const auto& spec : cfg.modalities) {
        m.patch_embed[spec.id] = init_linear(rng, cfg.patch * cfg.patch * spec.channels, cfg.dim);
        m.modality_tok[spec.id] = rnd(rng, {1, cfg.dim});
        m.eom_tok[spec.id] = rnd(rng, {1, cfg.dim});
    }
    m.mask_tok = rnd(rng, {1, cfg.dim});
    for (int l = 0; l < cfg.depth; ++l) {
        EncoderBlock b;
        b.ln1_g = Tensor::full({1, cfg.dim}, 1.0, true);
        b.ln1_b = Tensor::zeros({1, cfg.dim}, true);
        b.wq = init_linear(rng, cfg.dim, cfg.dim);
        b.wk = init_linear(rng, cfg.dim, cfg.dim);
        b.wv = init_linear(rng, cfg.dim, cfg.dim);
        b.wo = init_linear(rng, cfg.dim, cfg.dim);
        b.ln2_g = Tensor::full({1, cfg.dim}, 1.0, true);
        b.ln2_b = Tensor::zeros({1, cfg.dim}, true);
        b.moe.router_w = rnd(rng, {cfg.dim, cfg.experts});
        for (int e = 0; e < cfg.experts; ++e)
            b.moe.experts.push_back(init_expert(rng, cfg.dim, cfg.expert_hidden));
        if (cfg.shared_expert) b.moe.shared = init_expert(rng, cfg.dim, cfg.expert_hidden);
        m.blocks.push_back(std::move(b));
    }
    m.enc_ln_g = Tensor::full({1, cfg.dim}, 1.0, true);
    m.enc_ln_b = Tensor::zeros({1, cfg.dim}, true);
    m.dec_proj = init_linear(rng, cfg.dim, cfg.dec_dim);
    for (int l = 0; l < cfg.dec_depth; ++l) {
        DecoderBlock b;
        b.ln1_g = Tensor::full({1, cfg.dec_dim}, 1.0, true);
        b.ln1_b = Tensor::zeros({1, cfg.dec_dim}, true);
        b.wq = init_linear(rng, cfg.dec_dim, cfg.dec_dim);
        b.wk = init_linear(rng, cfg.dec_dim, cfg.dec_dim);
        b.wv = init_linear(rng, cfg.dec_dim, cfg.dec_dim);
        b.wo = init_linear(rng, cfg.dec_dim, cfg.dec_dim);
        b.ln2_g = Tensor::full({1, cfg.dec_dim}, 1.0, true);
        b.ln2_b = Tensor::zeros({1, cfg.dec_dim}, true);
        b.fc1 = init_linear(rng, cfg.dec_dim, 2 * cfg.dec_dim);
        b.fc2 = init_linear(rng, 2 * cfg.dec_dim, cfg.dec_dim);
        m.dec_blocks.push_back(std::move(b));
    }
    m.dec_ln_g = Tensor::full({1, cfg.dec_dim}, 1.0, true);
    m.dec_ln_b = Tensor::zeros({1, cfg.dec_dim}, true);
    for (const auto& spec : cfg.modalities)
        m.dec_head[spec.id] = init_linear(rng, cfg.dec_dim, cfg.patch * cfg.patch * spec.channels);
    return m;
}

std::vector<std::pair<std::string, Tensor>> named_parameters(const MapexModel& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    auto lin = [&](const std::string& pre, const Linear& l) {
        out.emplace_back(pre + ".w", l.w);
        out.emplace_back(pre + ".b", l.b);
    };
    auto expert = [&](const std::string& pre, const ExpertFfn& e) {
        lin(pre + ".fc1", e.fc1);
        lin(pre + ".fc2", e.fc2);
    };
    for (const auto& [id, l] : m.patch_embed) lin("embed." + std::to_string(id), l);
    for (const auto& [id, t] : m.modality_tok) out.emplace_back("tok.modality." + std::to_string(id), t);
    for (const auto& [id, t] : m.eom_tok) out.emplace_back("tok.eom." + std::to_string(id), t);
    out.emplace_back("tok.mask", m.mask_tok);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const auto& b = m.blocks[l];
        std::string pre = "enc." + std::to_string(l);
        out.emplace_back(pre + ".ln1.g", b.ln1_g);
        out.emplace_back(pre + ".ln1.b", b.ln1_b);
        lin(pre + ".attn.q", b.wq);
        lin(pre + ".attn.k", b.wk);
        lin(pre + ".attn.v", b.wv);
        lin(pre + ".attn.o", b.wo);
        out.emplace_back(pre + ".ln2.g", b.ln2_g);
        out.emplace_back(pre + ".ln2.b", b.ln2_b);
        out.emplace_back(pre + ".moe.router.w", b.moe.router_w);
        for (std::size_t e = 0; e < b.moe.experts.size(); ++e)
            expert(pre + ".moe.expert." + std::to_string(e), b.moe.experts[e]);
        if (b.moe.shared) expert(pre + ".moe.shared", *b.moe.shared);
    }
    out.emplace_back("enc.final_ln.g", m.enc_ln_g);
    out.emplace_back("enc.final_ln.b", m.enc_ln_b);
    lin("dec.proj", m.dec_proj);
    for (std::size_t l = 0; l < m.dec_blocks.size(); ++l) {
        const auto& b = m.dec_blocks[l];
        std::string pre = "dec." + std::to_string(l);
        out.emplace_back(pre + ".ln1.g", b.ln1_g);
        out.emplace_back(pre + ".ln1.b", b.ln1_b);
        lin(pre + ".attn.q", b.wq);
        lin(pre + ".attn.k", b.wk);
        lin(pre + ".attn.v", b.wv);
        lin(pre + ".attn.o", b.wo);
        out.emplace_back(pre + ".ln2.g", b.ln2_g);
        out.emplace_back(pre + ".ln2.b", b.ln2_b);
        lin(pre + ".ffn.fc1", b.fc1);
        lin(pre + ".ffn.fc2", b.fc2);
    }
    out.emplace_back("dec.final_ln.g", m.dec_ln_g);
    out.emplace_back("dec.final_ln.b", m.dec_ln_b);
    for (const auto& [id, l] : m.dec_head) lin("head." + std::to_string(id), l);
    return out;
}

long param_count(const MapexModel& model) {
    long n = 0;
    for (const auto& [name, t] : named_parameters(model)) n += t.size();
    return n;
}

// ---- fixed embeddings -------------------------------------------------------

Tensor pos_embed_2d(int grid, int dim) {
    if (dim % 4 != 0) throw DimensionError("pos_embed_2d dim must be divisible by 4");
    int half = dim / 2;
    int quarter = dim / 4;
    std::vector<double> out(static_cast<std::size_t>(grid) * grid * dim);
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            double* row = &out[(static_cast<std::size_t>(gy) * grid + gx) * dim];
            for (int i = 0; i < quarter; ++i) {
                double omega = std::pow(10000.0, -2.0 * i / half);
                row[2 * i] = std::sin(gy * omega);
                row[2 * i + 1] = std::cos(gy * omega);
                row[half + 2 * i] = std::sin(gx * omega);
                row[half + 2 * i + 1] = std::cos(gx * omega);
            }
        }
    }
    return Tensor::from({grid * grid, dim}, std::move(out));
}

Tensor sin_embed_1d(int index, int dim) {
    if (dim % 2 != 0) throw DimensionError("sin_embed_1d dim must be even");
    std::vector<double> out(dim);
    for (int i = 0; i < dim / 2; ++i) {
        double omega = std::pow(10000.0, -2.0 * i / dim);
        out[2 * i] = std::sin(index * omega);
        out[2 * i + 1] = std::cos(index * omega);
    }
    return Tensor::from({1, dim}, std::move(out));
}

// ---- routing ------------------------------------------------------------------

std::vector<int> topk_select(const std::vector<double>& probs, int k) {
    int e = static_cast<int>(probs.size());
    if (k < 1 || k > e) throw ContractError("topk_select k out of range");
    std::vector<int> idx(e);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace {

Tensor router_input(const MapexModel& m, int modality_id) {
    switch (m.cfg.routing) {
        case RoutingMode::PosEmbed: return sin_embed_1d(modality_id, m.cfg.dim);
        case RoutingMode::Modality: return m.modality_tok.at(modality_id);
        default: throw ContractError("router input undefined for deterministic routing");
    }
}

RoutingDecision finish_decision(int modality_id, const Tensor& probs, int k) {
    RoutingDecision d;
    d.modality = modality_id;
    d.probs = probs;
    d.selected = topk_select(probs.value(), k);
    Tensor sel = gather_cols(probs, d.selected);
    d.gates = div_by(sel, sum(sel));
    return d;
}

}  // namespace

RoutingDecision route(const MapexModel& model, int layer, int modality_id) {
    if (!model.cfg.has_modality(modality_id))
        throw ModalityUnavailableError("routing for modality " + std::to_string(modality_id));
    const auto& moe = model.blocks.at(layer).moe;
    if (model.prune_info) {
        const auto& fz = model.prune_info->frozen.at(layer);
        auto it = fz.find(modality_id);
        if (it == fz.end())
            throw ModalityUnavailableError("no frozen routing for modality " +
                                           std::to_string(modality_id));
        RoutingDecision d;
        d.modality = modality_id;
        d.probs = Tensor::from({1, static_cast<int>(moe.experts.size())}, it->second.probs);
        d.selected = it->second.selected;
        d.gates = Tensor::from({1, static_cast<int>(it->second.gates.size())}, it->second.gates);
        return d;
    }
    int e = static_cast<int>(moe.experts.size());
    if (model.cfg.routing == RoutingMode::Deterministic) {
        RoutingDecision d;
        d.modality = modality_id;
        std::vector<double> p(e, 0.0);
        int idx = modality_id % e;
        p[idx] = 1.0;
        d.probs = Tensor::from({1, e}, std::move(p));
        d.selected = {idx};
        d.gates = Tensor::from({1, 1}, {1.0});
        return d;
    }
    Tensor logits = matmul(router_input(model, modality_id), moe.router_w);
    return finish_decision(modality_id, softmax(logits, 1), model.cfg.top_k);
}

RoutingDecision route_restricted(const MapexModel& model, int layer, int modality_id,
                                 const std::vector<int>& allowed, int k) {
    if (allowed.empty()) throw ContractError("restricted routing over empty expert set");
    const auto& moe = model.blocks.at(layer).moe;
    std::vector<double> full(moe.experts.size(), 0.0);
    if (model.cfg.routing == RoutingMode::Deterministic) {
        full[modality_id % moe.experts.size()] = 1.0;
    } else {
        Tensor probs = softmax(matmul(router_input(model, modality_id), moe.router_w), 1);
        full = probs.value();
    }
    double z = 0.0;
    for (int a : allowed) z += full[a];
    std::vector<double> restricted(allowed.size());
    for (std::size_t i = 0; i < allowed.size(); ++i)
        restricted[i] = (z > 0.0) ? full[allowed[i]] / z : 1.0 / allowed.size();
    int kk = std::min<int>(k, static_cast<int>(allowed.size()));
    std::vector<int> local = topk_select(restricted, kk);
    RoutingDecision d;
    d.modality = modality_id;
    d.probs = Tensor::from({1, static_cast<int>(restricted.size())}, restricted);
    double gz = 0.0;
    for (int li : local) gz += restricted[li];
    std::vector<double> gates;
    for (int li : local) {
        d.selected.push_back(allowed[li]);
        gates.push_back(gz > 0.0 ? restricted[li] / gz : 1.0 / kk);
    }
    d.gates = Tensor::from({1, kk}, std::move(gates));
    return d;
}

// ---- forward pieces ---------------------------------------------------------

Tensor moe_forward(const MapexModel& model, int layer, const Tensor& tokens,
                   const std::vector<Segment>& segments, MoeTrace* trace,
                   const RoutingPolicy* policy) {
    const auto& moe = model.blocks.at(layer).moe;
    std::vector<Tensor> outs;
    int offset = 0;
    for (const auto& seg : segments) {
        std::vector<int> rows(seg.count);
        std::iota(rows.begin(), rows.end(), offset);
        offset += seg.count;
        Tensor t = gather_rows(tokens, rows);
        RoutingDecision d =
            policy ? (*policy)(model, layer, seg.modality) : route(model, layer, seg.modality);
        Tensor acc;
        for (std::size_t j = 0; j < d.selected.size(); ++j) {
            Tensor gate_j = gather_cols(d.gates, {static_cast<int>(j)});
            Tensor term = scale_by(expert_fwd(moe.experts.at(d.selected[j]), t), gate_j);
            acc = acc.defined() ? add(acc, term) : term;
            if (trace) trace->expert_calls[layer][d.selected[j]] += seg.count;
        }
        if (moe.shared) {
            acc = add(acc, expert_fwd(*moe.shared, t));
            if (trace) trace->shared_calls[layer] += seg.count;
        }
        if (trace) trace->decisions[layer].emplace(seg.modality, d);
        outs.push_back(acc);
    }
    return concat_rows(outs);
}

namespace {

Tensor attention(const Tensor& x, const Tensor& ln_g, const Tensor& ln_b, const Linear& wq,
                 const Linear& wk, const Linear& wv, const Linear& wo, int heads) {
    Tensor xn = layer_norm(x, ln_g, ln_b);
    Tensor q = linear_fwd(wq, xn);
    Tensor k = linear_fwd(wk, xn);
    Tensor v = linear_fwd(wv, xn);
    int dim = q.cols();
    int dh = dim / heads;
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
        std::vector<int> cols(dh);
        std::iota(cols.begin(), cols.end(), h * dh);
        Tensor qh = gather_cols(q, cols);
        Tensor kh = gather_cols(k, cols);
        Tensor vh = gather_cols(v, cols);
        Tensor attn = softmax(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(dh)), 1);
        outs.push_back(matmul(attn, vh));
    }
    return linear_fwd(wo, concat_cols(outs));
}

}  // namespace

Tensor encoder_forward(const MapexModel& model, const Tensor& tokens,
                       const std::vector<Segment>& segments, MoeTrace* trace,
                       const RoutingPolicy* policy) {
    if (trace) {
        trace->decisions.assign(model.blocks.size(), {});
        trace->expert_calls.assign(model.blocks.size(), {});
        for (std::size_t l = 0; l < model.blocks.size(); ++l)
            trace->expert_calls[l].assign(model.blocks[l].moe.experts.size(), 0);
        trace->shared_calls.assign(model.blocks.size(), 0);
    }
    Tensor x = tokens;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& b = model.blocks[l];
        x = add(x, attention(x, b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, model.cfg.heads));
        Tensor xn = layer_norm(x, b.ln2_g, b.ln2_b);
        x = add(x, moe_forward(model, static_cast<int>(l), xn, segments, trace, policy));
    }
    return layer_norm(x, model.enc_ln_g, model.enc_ln_b);
}

Tensor sample_patches(const ModelConfig& cfg, const MultiModalSample& sample, int modality_id) {
    const ModalitySpec& spec = cfg.modality(modality_id);
    if (modality_id >= static_cast<int>(sample.planes.size()))
        throw ModalityUnavailableError("sample lacks modality " + std::to_string(modality_id));
    const auto& plane = sample.planes[modality_id];
    const int H = cfg.image_size, W = cfg.image_size, P = cfg.patch;
    const int grid = H / P;
    const int pdim = P * P * spec.channels;
    std::vector<double> out(static_cast<std::size_t>(grid) * grid * pdim);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double* row = &out[(static_cast<std::size_t>(gy) * grid + gx) * pdim];
            int i = 0;
            for (int ch = 0; ch < spec.channels; ++ch)
                for (int py = 0; py < P; ++py)
                    for (int px = 0; px < P; ++px)
                        row[i++] = plane[(ch * H + gy * P + py) * W + gx * P + px];
        }
    return Tensor::from({grid * grid, pdim}, std::move(out));
}

Tensor embed_modality_tokens(const MapexModel& model, const MultiModalSample& sample,
                             int modality_id) {
    const auto& cfg = model.cfg;
    Tensor patches = sample_patches(cfg, sample, modality_id);
    Tensor tok = linear_fwd(model.patch_embed.at(modality_id), patches);
    tok = add(tok, pos_embed_2d(cfg.image_size / cfg.patch, cfg.dim));
    return add(tok, model.modality_tok.at(modality_id));
}

Tensor decode_modality(const MapexModel& model, const Tensor& encoded_visible,
                       const std::vector<int>& visible_idx, const std::vector<int>& masked_idx,
                       int modality_id) {
    const auto& cfg = model.cfg;
    const int T = cfg.tokens_per_modality();
    if (static_cast<int>(visible_idx.size()) != encoded_visible.rows())
        throw ContractError("visible index count does not match encoded rows");
    for (int p : masked_idx)
        if (p < 0 || p >= T) throw ContractError("mask position out of range");
    // masked slots: [MASK] token + positional embedding
    Tensor pos = pos_embed_2d(cfg.image_size / cfg.patch, cfg.dim);
    std::vector<int> mask_rep(masked_idx.size(), 0);
    Tensor masked_block =
        add(gather_rows(model.mask_tok, mask_rep), gather_rows(pos, masked_idx));
    Tensor stacked = masked_idx.empty()
                         ? encoded_visible
                         : concat_rows({encoded_visible, masked_block});
    // permutation restoring original token order
    std::vector<int> perm(T, -1);
    for (std::size_t i = 0; i < visible_idx.size(); ++i) perm[visible_idx[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < masked_idx.size(); ++i)
        perm[masked_idx[i]] = static_cast<int>(visible_idx.size() + i);
    for (int p : perm)
        if (p < 0) throw ContractError("visible/masked sets do not cover the token grid");
    Tensor x = linear_fwd(model.dec_proj, gather_rows(stacked, perm));
    for (const auto& b : model.dec_blocks) {
        x = add(x, attention(x, b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, model.cfg.heads));
        Tensor xn = layer_norm(x, b.ln2_g, b.ln2_b);
        x = add(x, linear_fwd(b.fc2, gelu(linear_fwd(b.fc1, xn))));
    }
    x = layer_norm(x, model.dec_ln_g, model.dec_ln_b);
    return linear_fwd(model.dec_head.at(modality_id), x);
}

Tensor forward_features_tensor(const MapexModel& model, const MultiModalSample& sample,
                               const std::vector<int>& active_modalities,
                               const RoutingPolicy* policy) {
    if (active_modalities.empty()) throw ContractError("no active modalities");
    const int T = model.cfg.tokens_per_modality();
    std::vector<Tensor> parts;
    std::vector<Segment> segments;
    std::vector<int> pool_rows;
    int pos = 0;
    for (int mid : active_modalities) {
        if (!model.cfg.has_modality(mid))
            throw ModalityUnavailableError("modality " + std::to_string(mid) + " pruned away");
        parts.push_back(embed_modality_tokens(model, sample, mid));
        parts.push_back(model.eom_tok.at(mid));
        segments.push_back({mid, T + 1});
        for (int t = 0; t < T; ++t) pool_rows.push_back(pos + t);
        pos += T + 1;
    }
    Tensor enc = encoder_forward(model, concat_rows(parts), segments, nullptr, policy);
    Tensor pooled = gather_rows(enc, pool_rows);
    return scale(matmul(Tensor::full({1, static_cast<int>(pool_rows.size())}, 1.0), pooled),
                 1.0 / pool_rows.size());
}

std::vector<double> forward_features(const MapexModel& model, const MultiModalSample& sample,
                                     const std::vector<int>& active_modalities,
                                     const RoutingPolicy* policy) {
    return forward_features_tensor(model, sample, active_modalities, policy).value();
}

}  // namespace mapex
