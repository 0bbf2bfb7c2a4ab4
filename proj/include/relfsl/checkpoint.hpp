// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file, all integers little-endian:
//
//   "RELFSL01"  u32 version (1)  u64 config length  config text
//   u32 tensor count, then per tensor:
//   u32 name length  name  u8 dtype (0 = f32)  u32 rank  u64 dims[rank]  f32 payload

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "relfsl/config.hpp"
#include "relfsl/model.hpp"

namespace relfsl {

inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'L', 'F', 'S', 'L', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::uint32_t version = 0;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const std::string& config_text,
                      const NamedTensors<float>& tensors);
/// Raises IoError on a bad magic ("not a RELFSL checkpoint"), an unknown
/// version or a truncated file.
CheckpointData read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const FslModel<float>& model, const RunConfig& config);

struct LoadedModel {
  RunConfig config;
  FslModel<float> model;
};

/// Rebuilds the model from the stored config and copies every tensor in,
/// checking names and shapes.
LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Copies `data` into `model`; ShapeError names the first tensor that does not fit.
void assign_state(FslModel<float>& model, const CheckpointData& data);

}  // namespace relfsl
