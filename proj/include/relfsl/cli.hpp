// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface and the orchestration it needs: dataset splitting for
// a run, ablation variants, attention heatmap export.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "relfsl/config.hpp"
#include "relfsl/data.hpp"
#include "relfsl/model.hpp"

namespace relfsl {

/// Class split used by train and eval: config.data.train_fraction, seeded by
/// config.train.seed, each side large enough for its episode way.
ClassSplit split_for_run(const Dataset& dataset, const RunConfig& config);

// ---------------------------------------------------------------- ablation

/// full, no_scr, no_cca, vanilla_attn, no_attn, no_interp, mixup, channels_64.
const std::vector<std::string>& ablation_variants();

/// `base` with one variant switch applied. Unknown names raise ConfigError.
RunConfig apply_variant(RunConfig base, const std::string& variant);

struct AblationRow {
  std::string variant;
  double accuracy = 0.0;
  double ci95 = 0.0;
  double mean_inference_ms = 0.0;  // first 100 evaluation episodes
};

/// Trains each variant from scratch under the same seed and evaluates it on
/// `eval_episodes` episodes sampled with `eval_seed`.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& variants,
                                      const Dataset& train_set, const Dataset& test_set, std::size_t eval_episodes,
                                      std::uint64_t eval_seed, std::size_t threads, std::ostream* progress = nullptr);

/// Header `variant,accuracy,mean_inference_ms`, one row per variant.
std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------- heatmaps

/// Nearest-neighbour upsampling of an h x w map to size x size 8-bit pixels,
/// min-max scaled to 0..255; a constant map gives all zeros.
std::vector<std::uint8_t> heatmap_pixels(std::span<const float> map, std::size_t height, std::size_t width,
                                         std::size_t size = kInputSize);

/// Co-attention maps of one (query, support) pair of raw [3,h,w] images.
AttentionMaps<float> pair_attention(FslModel<float>& model, const Tensor<float>& support_image,
                                    const Tensor<float>& query_image);

/// Writes heatmap.csv (map,row,col,value), query.pgm and support.pgm.
AttentionMaps<float> export_heatmap(FslModel<float>& model, const std::filesystem::path& support_image,
                                    const std::filesystem::path& query_image, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------- entry point

/// Runs one subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage or
/// configuration error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace relfsl
