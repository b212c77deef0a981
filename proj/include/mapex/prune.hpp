#pragma once

#include <vector>

#include "mapex/data.hpp"
#include "mapex/model.hpp"

namespace mapex {

// Extracts a smaller model for the downstream modality set: per layer the
// union of each downstream modality's top-k expert index set is kept, with
// gates frozen at prune time; embedders and special tokens of other
// modalities are dropped. The shared expert, when present, is always kept.
MapexModel prune(const MapexModel& model, const PruneSpec& spec);

// Max absolute elementwise difference between full and pruned
// forward_features over the probe batch (inputs restricted to the spec's
// modalities).
double verify_equivalence(const MapexModel& full, const MapexModel& pruned, const PruneSpec& spec,
                          const std::vector<MultiModalSample>& probes);

// Per-layer retained expert sets (old indices) the prune would keep.
std::vector<std::vector<int>> retained_expert_sets(const MapexModel& model, const PruneSpec& spec);

}  // namespace mapex
