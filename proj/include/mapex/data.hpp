#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mapex {

struct ModalitySpec {
    int id = 0;
    std::string name;
    int channels = 1;
    double informativeness = 1.0;
};

// One labeled multi-modal image. Planes are stored per modality as
// C*H*W row-major doubles.
struct MultiModalSample {
    std::vector<std::vector<double>> planes;
    int label = 0;
    int id = 0;
};

struct DataConfig {
    std::vector<ModalitySpec> modalities;
    int image_size = 32;
    int classes = 4;
    int n_train = 512;
    int n_val = 128;
    int n_test = 128;
    double noise = 0.3;
    std::uint64_t seed = 0;
};

DataConfig default_data_config();

struct DatasetStats {
    std::vector<double> mean;   // indexed by global channel across modalities
    std::vector<double> stddev;
};

struct Dataset {
    DataConfig cfg;
    std::vector<MultiModalSample> train, val, test;

    int total_channels() const;
};

// Pure function of (config, seed): class-specific sinusoidal gratings per
// modality, amplitude scaled by informativeness, plus gaussian pixel noise.
Dataset generate(const DataConfig& cfg);

DatasetStats compute_stats(const Dataset& ds);           // training split only
void normalize(Dataset& ds, const DatasetStats& stats);  // applied to all splits

// k_shot samples per class from the training split; val/test untouched.
Dataset few_shot_subset(const Dataset& ds, int k_shot, std::uint64_t seed);

// Directory format: manifest.txt (key=value) + one raw little-endian f32
// file per split with row-major sample planes.
void export_dataset(const Dataset& ds, const std::string& dir);
Dataset import_dataset(const std::string& dir);

}  // namespace mapex
