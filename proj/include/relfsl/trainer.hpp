// SPDX-License-Identifier: Apache-2.0
//
// Adam, the episodic training loop, evaluation and classification metrics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "relfsl/config.hpp"
#include "relfsl/data.hpp"
#include "relfsl/model.hpp"

namespace relfsl {

// ---------------------------------------------------------------- Adam

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// One update of a single tensor. The gradient gets wd * theta added before
/// the moment updates. Throws NumericError naming `name` on a non-finite gradient.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, const AdamOptions& options,
               const std::string& name);

template <typename T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamOptions options);

  /// Updates every parameter that received a gradient, then clears gradients.
  void step();
  void zero_grad();
  const AdamOptions& options() const { return options_; }

 private:
  NamedTensors<T> params_;
  std::vector<AdamState> states_;
  AdamOptions options_;
};

// ---------------------------------------------------------------- training

struct TrainLogEntry {
  std::size_t episode = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoints and train_log.csv; empty writes nothing
  std::function<void(const TrainLogEntry&)> on_episode;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<std::filesystem::path> checkpoints;
};

/// Episodic training on `train_set`. Each optimizer step draws
/// config.train.episodes_per_step() episodes over one shared class draw,
/// applies the configured interpolation, and averages their losses.
TrainResult train(FslModel<float>& model, const Dataset& train_set, const RunConfig& config,
                  const TrainOptions& options = {});

// ---------------------------------------------------------------- evaluation

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Rows are true labels, columns predictions. Macro precision and recall
/// (0/0 counts as 0); F1 is the harmonic mean of the two macro values.
Metrics compute_metrics(const std::vector<std::vector<std::uint64_t>>& confusion);

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double ci95 = 0.0;  // 1.96 * std / sqrt(n) of the per-episode accuracies
  std::vector<std::vector<std::uint64_t>> confusion;
  std::size_t episode_count = 0;
  std::vector<double> episode_accuracy;
  std::vector<double> episode_ms;  // wall-clock forward time per episode

  double mean_inference_ms(std::size_t first_n) const;
};

/// Pre-samples `episodes` n_way_test-way episodes from `test_set` with `seed`,
/// then classifies them (optionally on several threads; results do not
/// depend on the thread count).
MetricsReport evaluate(FslModel<float>& model, const Dataset& test_set, std::size_t episodes, const RunConfig& config,
                       std::uint64_t seed, std::size_t threads = 1);

std::string format_report(const MetricsReport& report);

}  // namespace relfsl
