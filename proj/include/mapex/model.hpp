#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mapex/data.hpp"
#include "mapex/tensor.hpp"

namespace mapex {

enum class RoutingMode { Deterministic, PosEmbed, Modality };

RoutingMode routing_mode_from_string(const std::string& s);
std::string to_string(RoutingMode m);

struct ModelConfig {
    int dim = 64;
    int depth = 4;
    int heads = 4;
    int experts = 8;
    int expert_hidden = 128;
    int top_k = 2;
    RoutingMode routing = RoutingMode::Modality;
    bool shared_expert = false;
    int dec_depth = 2;
    int dec_dim = 48;
    int patch = 8;
    double mask_ratio = 0.75;
    int image_size = 32;
    std::vector<ModalitySpec> modalities;

    int tokens_per_modality() const {
        int g = image_size / patch;
        return g * g;
    }
    void validate() const;
    const ModalitySpec& modality(int id) const;
    bool has_modality(int id) const;
};

struct RoutingDecision {
    int modality = 0;
    Tensor probs;                     // [1, e] over the layer's experts
    std::vector<int> selected;        // ascending, size k
    Tensor gates;                     // [1, k], renormalized over selected
};

struct Linear {
    Tensor w, b;  // x [T,in] -> x.w + b, w [in,out], b [1,out]
};

struct ExpertFfn {
    Linear fc1, fc2;
};

struct MoeLayer {
    Tensor router_w;  // [D, e]
    std::vector<ExpertFfn> experts;
    std::optional<ExpertFfn> shared;
};

struct EncoderBlock {
    Tensor ln1_g, ln1_b;
    Linear wq, wk, wv, wo;
    Tensor ln2_g, ln2_b;
    MoeLayer moe;
};

struct DecoderBlock {
    Tensor ln1_g, ln1_b;
    Linear wq, wk, wv, wo;
    Tensor ln2_g, ln2_b;
    Linear fc1, fc2;
};

struct PruneSpec {
    std::vector<int> modalities;  // downstream modality ids, ascending
    int k = 2;
};

struct FrozenDecision {
    std::vector<int> selected;   // local expert indices, ascending
    std::vector<double> gates;   // renormalized within the modality's selection
    std::vector<double> probs;   // restricted+renormalized probs over local experts
};

struct PruneInfo {
    PruneSpec spec;
    std::vector<std::vector<int>> retained;           // per layer: old expert indices, ascending
    std::vector<std::map<int, FrozenDecision>> frozen;  // per layer: modality -> decision
};

struct MapexModel {
    ModelConfig cfg;
    std::map<int, Linear> patch_embed;   // modality id -> [P*P*C, D]
    std::map<int, Tensor> modality_tok;  // [1, D]
    std::map<int, Tensor> eom_tok;       // [1, D]
    Tensor mask_tok;                     // [1, D]
    std::vector<EncoderBlock> blocks;
    Tensor enc_ln_g, enc_ln_b;
    Linear dec_proj;  // D -> dec_dim
    std::vector<DecoderBlock> dec_blocks;
    Tensor dec_ln_g, dec_ln_b;
    std::map<int, Linear> dec_head;  // dec_dim -> P*P*C
    std::optional<PruneInfo> prune_info;
};

MapexModel init_model(const ModelConfig& cfg, std::uint64_t seed);
std::vector<std::pair<std::string, Tensor>> named_parameters(const MapexModel& model);
long param_count(const MapexModel& model);

// fixed 2-D sin-cos grid embedding, [grid*grid, dim]
Tensor pos_embed_2d(int grid, int dim);
// fixed 1-D sinusoidal code of an integer index, [1, dim]
Tensor sin_embed_1d(int index, int dim);

// indices of the k largest probabilities, ties toward the lowest index;
// returned ascending
std::vector<int> topk_select(const std::vector<double>& probs, int k);

RoutingDecision route(const MapexModel& model, int layer, int modality_id);
// routing over a restricted expert subset (old indices of a full model):
// probabilities renormalized over the subset, then top-k inside it
RoutingDecision route_restricted(const MapexModel& model, int layer, int modality_id,
                                 const std::vector<int>& allowed, int k);

using RoutingPolicy = std::function<RoutingDecision(const MapexModel&, int layer, int modality)>;

// contiguous run of tokens that share one modality (end-of-modality token
// carries its modality's id and counts here)
struct Segment {
    int modality = 0;
    int count = 0;
};

struct MoeTrace {
    std::vector<std::map<int, RoutingDecision>> decisions;  // per layer
    std::vector<std::vector<long>> expert_calls;            // tokens per local expert per layer
    std::vector<long> shared_calls;
};

Tensor moe_forward(const MapexModel& model, int layer, const Tensor& tokens,
                   const std::vector<Segment>& segments, MoeTrace* trace,
                   const RoutingPolicy* policy = nullptr);

Tensor encoder_forward(const MapexModel& model, const Tensor& tokens,
                       const std::vector<Segment>& segments, MoeTrace* trace = nullptr,
                       const RoutingPolicy* policy = nullptr);

// normalized pixels of one modality as a constant [T, P*P*C] tensor
Tensor sample_patches(const ModelConfig& cfg, const MultiModalSample& sample, int modality_id);

// patch embedding + 2-D positional embedding + [MODALITY] embedding, [T, D]
Tensor embed_modality_tokens(const MapexModel& model, const MultiModalSample& sample,
                             int modality_id);

// rebuild the full-length sequence for one modality (visible encodings at
// their positions, [MASK]+pos at masked positions), run the shared decoder
// and the per-modality pixel head
Tensor decode_modality(const MapexModel& model, const Tensor& encoded_visible,
                       const std::vector<int>& visible_idx, const std::vector<int>& masked_idx,
                       int modality_id);

// average-pooled encoder features over patch tokens (EOM tokens excluded)
std::vector<double> forward_features(const MapexModel& model, const MultiModalSample& sample,
                                     const std::vector<int>& active_modalities,
                                     const RoutingPolicy* policy = nullptr);
// same, but keeps the graph (used by full-model fine-tuning)
Tensor forward_features_tensor(const MapexModel& model, const MultiModalSample& sample,
                               const std::vector<int>& active_modalities,
                               const RoutingPolicy* policy = nullptr);

}  // namespace mapex
