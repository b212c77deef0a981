#pragma once

#include <map>
#include <string>
#include <vector>

#include "mapex/data.hpp"
#include "mapex/model.hpp"
#include "mapex/rng.hpp"
#include "mapex/tensor.hpp"

namespace mapex {

// Per-modality split of token positions into masked and visible sets.
struct MaskEntry {
    std::vector<int> masked;   // ascending
    std::vector<int> visible;  // ascending
};
using MaskPlan = std::map<int, MaskEntry>;  // modality id -> entry

MaskEntry sample_mask(int tokens, double ratio, Rng& rng);

// Independent Bernoulli(p) per modality; if every modality is drawn, one
// uniformly chosen modality is restored. Returns the dropped flags.
std::vector<bool> modality_dropout(int modality_count, double p, Rng& rng);

struct LossBreakdown {
    double l_rec = 0.0;
    double l_load = 0.0;
    double alpha = 0.0;
    double total = 0.0;  // exact sum l_rec + alpha * l_load
};

// Soft utilization: token-weighted routing probability mass per expert,
// differentiable through the router softmax.
Tensor compute_utilization(const std::map<int, RoutingDecision>& decisions,
                           const std::map<int, int>& token_counts);

Tensor load_balance_loss(const Tensor& utilization);

struct StepMetrics {
    long step = 0;
    LossBreakdown loss;
    std::vector<std::vector<double>> utilization;  // per layer
};

struct PretrainConfig {
    long steps = 2000;
    int batch = 8;
    double lr = 1e-3;
    double alpha = 0.01;
    double modality_dropout_p = 0.5;
    std::uint64_t seed = 0;
    long log_every = 10;
};

struct PretrainResult {
    std::vector<StepMetrics> metrics;
    double initial_val_mse = 0.0;
    double final_val_mse = 0.0;
};

// Masked-autoencoding training loop; mutates the model in place.
PretrainResult pretrain(MapexModel& model, const Dataset& data, const PretrainConfig& cfg);

// Held-out masked-reconstruction MSE (no modality dropout), averaged over
// samples and modalities. Deterministic given mask_seed.
double masked_recon_mse(const MapexModel& model, const std::vector<MultiModalSample>& samples,
                        std::uint64_t mask_seed);

// CSV: step,l_rec,l_load,total,layer,u_0..u_{e-1} — one row per layer per
// logged step.
void write_metrics_csv(const std::vector<StepMetrics>& metrics, const std::string& path);

}  // namespace mapex
