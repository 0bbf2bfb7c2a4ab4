// SPDX-License-Identifier: Apache-2.0
//
// Configuration for the model, training and evaluation, plus the line-oriented
// `key = value` run-config format. Defaults mirror the published experiment
// setup (Conv4 width 640, Adam lr 1e-4 fixed, weight decay 0.002, 5000
// episodes saved every 500, 5-way training, 2-way testing, 1 shot, 15
// queries).

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

namespace relfsl {

struct EncoderConfig {
  std::size_t channels = 640;   // width of all four blocks
  std::size_t shared_layers = 4;  // metric-based regime: every layer is shared
};

enum class InterpolationMode { task_interpolation, mixup, off };

struct InterpolationConfig {
  InterpolationMode mode = InterpolationMode::task_interpolation;
  double alpha = 2.0;
  double beta = 2.0;

  bool enabled() const { return mode != InterpolationMode::off; }
};

struct RelationalConfig {
  bool scr_enabled = true;
  std::size_t scr_window = 5;
  bool cca_enabled = true;
  std::size_t match_channels = 16;
  double attention_temperature = 2.0;
};

enum class AttentionMode { routed, vanilla, none };

struct RoutingConfig {
  AttentionMode mode = AttentionMode::routed;
  std::size_t grid = 5;
  std::size_t top_k = 3;
};

struct HeadConfig {
  double temperature = 0.1;
};

struct ModelConfig {
  EncoderConfig encoder;
  InterpolationConfig interpolation;
  RelationalConfig relational;
  RoutingConfig routing;
  HeadConfig head;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.002;
  std::size_t total_episodes = 5000;
  std::size_t save_every = 500;
  std::size_t batch_size = 128;  // images per optimizer step, aggregated over episodes
  std::size_t n_way_train = 5;
  std::size_t n_way_test = 2;
  std::size_t k_shot = 1;
  std::size_t n_query = 15;
  std::uint64_t seed = 0;

  std::size_t images_per_episode() const { return n_way_train * (k_shot + n_query); }
  /// Episodes combined into one optimizer step: batch_size / images-per-episode
  /// rounded to nearest, at least 2 so task pairs can always be formed.
  std::size_t episodes_per_step() const;
};

struct DataConfig {
  double train_fraction = 0.75;
  std::string source;  // provenance of the training corpus
};

struct EvalConfig {
  std::size_t episodes = 600;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

/// Throws ConfigError naming the offending field.
void validate(const RunConfig& config);

/// Parses `key = value` lines; '#' starts a comment line. Unknown or
/// duplicate keys and malformed values raise ConfigError with the line number.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text: every key, fixed order, shortest round-trip numbers.
std::string serialize_config(const RunConfig& config);

std::string to_string(InterpolationMode mode);
std::string to_string(AttentionMode mode);

}  // namespace relfsl
