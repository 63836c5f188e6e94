#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fmbff/config_file.hpp"
#include "fmbff/model.hpp"
#include "fmbff/training.hpp"

namespace fmbff {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  bool f64_type = false;
  // The vector matching the dtype holds shape_numel(shape) values.
  std::vector<float> f32;
  std::vector<double> f64;
};

// Container layout (all little-endian):
//   "FMBF" u16 version u32 count
//   count x { u16 name_len, name, u8 dtype (0 f32, 1 f64), u8 rank, u32 dims[rank], payload }
//   u32 crc32 of every preceding byte
std::string encode_entries(const std::vector<CheckpointEntry>& entries);
// Throws FormatError on bad magic, version or checksum and ParseError (with
// offset) on truncation.
std::vector<CheckpointEntry> decode_entries(std::string_view bytes);

struct Checkpoint {
  RunConfig config;
  TrainState state;
  std::unique_ptr<Model<float>> model;
};

// Parameters and buffers under their store names, Adam moments as
// "adam.m.<name>" / "adam.v.<name>", the run configuration as "config.<key>"
// and scalar training state as "state.<field>".
std::string encode_checkpoint(const Model<float>& model, const RunConfig& config, const TrainState& state);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Model<float>& model, const RunConfig& config,
                     const TrainState& state);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fmbff
