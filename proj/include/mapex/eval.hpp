#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mapex/data.hpp"
#include "mapex/model.hpp"
#include "mapex/pretrain.hpp"

namespace mapex {

struct ProbeResult {
    double accuracy = 0.0;
    std::vector<double> per_class;  // accuracy per class
    std::vector<int> modalities;
    int knn_k = 0;
    std::string checkpoint_id;
    std::uint64_t seed = 0;
};

// Exact brute-force k-NN with Euclidean distance. Ties: equal distances
// resolved toward the smallest train index, vote ties toward the smallest
// class index.
ProbeResult knn_eval(const std::vector<std::vector<double>>& train_feats,
                     const std::vector<int>& train_labels,
                     const std::vector<std::vector<double>>& test_feats,
                     const std::vector<int>& test_labels, int k, int classes);

std::vector<std::vector<double>> extract_features(const MapexModel& model,
                                                  const std::vector<MultiModalSample>& samples,
                                                  const std::vector<int>& modalities,
                                                  const RoutingPolicy* policy = nullptr);

std::vector<int> split_labels(const std::vector<MultiModalSample>& samples);

struct FinetuneConfig {
    int epochs = 30;
    double lr = 1e-3;
    bool frozen = true;
    int batch = 32;
    std::uint64_t seed = 0;
    std::vector<int> modalities;  // empty -> all model modalities
};

// Linear classification head on pooled features; lr halves after 3
// consecutive epochs without val-loss improvement; reports test accuracy at
// the best-val epoch.
ProbeResult finetune(MapexModel& model, const Dataset& data, const FinetuneConfig& cfg);

struct SpecializationMatrix {
    std::vector<std::vector<double>> acc;  // [pruned-for modality][input modality]
    double diagonal_mean() const;
    double off_diagonal_mean() const;
};

// Fig.-4-style grid: row r prunes for modality r (k experts), column c
// evaluates k-NN on input modality c, restoring foreign patch embedders
// from the full model.
SpecializationMatrix specialization_matrix(const MapexModel& model, const Dataset& data, int knn_k,
                                           int prune_k);

struct SweepRow {
    std::string sweep_kind;
    std::string cell_id;
    std::string param_1;
    std::string param_2;
    int modality = -1;
    double accuracy = 0.0;
    std::uint64_t seed = 0;
    long params_count = 0;
};

struct SweepConfig {
    ModelConfig model;
    PretrainConfig pretrain;
    int knn_k = 5;
    int prune_k = 2;
    std::uint64_t seed = 0;
};

// kind in {routing, topk, dropout, expert_size}
std::vector<SweepRow> sweep(const std::string& kind, const Dataset& data, const SweepConfig& cfg);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);
void write_probe_csv(const ProbeResult& r, const std::string& path);

ProbeResult few_shot_eval(MapexModel& model, const Dataset& data, int k_shot, std::uint64_t seed,
                          const FinetuneConfig& ft);

}  // namespace mapex
