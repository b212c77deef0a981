#pragma once

#include <string>

#include "mapex/model.hpp"

namespace mapex {

// Named-tensor checkpoint container (.mpx). UTF-8 manifest followed by a
// tensor section with raw little-endian 64-bit floats; round-trips are
// bit-identical. Layout:
//
//   MAPEXCKPT 1\n
//   manifest_bytes <N>\n
//   <N bytes of key=value manifest text>
//   TENSORS <count>\n
//   repeated: "<name> <ndim> <d0> <d1> ...\n" + ndim-product * 8 bytes LE f64
//   END\n
void save_checkpoint(const MapexModel& model, const std::string& path, long step = 0);

struct LoadedCheckpoint {
    MapexModel model;
    long step = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mapex
