// SPDX-License-Identifier: Apache-2.0

#include "relfsl/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <mutex>
#include <thread>

#include "relfsl/checkpoint.hpp"
#include "relfsl/error.hpp"
#include "relfsl/head.hpp"
#include "relfsl/ops.hpp"

namespace relfsl {

// ---------------------------------------------------------------- Adam

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, const AdamOptions& o,
               const std::string& name) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: gradient size mismatch for " + name);
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch for " + name);
  for (auto g : grads) {
    if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double theta = static_cast<double>(params[i]);
    const double g = static_cast<double>(grads[i]) + o.weight_decay * theta;
    state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * g;
    state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] = static_cast<T>(theta - o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon));
  }
}

template <typename T>
Adam<T>::Adam(NamedTensors<T> params, AdamOptions options)
    : params_(std::move(params)), states_(params_.size()), options_(options) {}

template <typename T>
void Adam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, tensor] = params_[i];
    if (!tensor.has_grad()) continue;
    std::vector<T> grad(tensor.grad().begin(), tensor.grad().end());
    adam_step<T>(tensor.mutable_data(), grad, states_[i], options_, name);
  }
  zero_grad();
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, tensor] : params_) tensor.zero_grad();
}

template void adam_step(std::span<float>, std::span<const float>, AdamState&, const AdamOptions&,
                        const std::string&);
template void adam_step(std::span<double>, std::span<const double>, AdamState&, const AdamOptions&,
                        const std::string&);
template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------- training

namespace {

constexpr std::uint64_t kInterpolationStream = 0x5851f42d4c957f2dULL;

struct StepBatch {
  std::vector<Episode> episodes;
  std::vector<std::size_t> offsets;  // first row of each episode in the batch
};

Tensor<float> concat_images(const StepBatch& batch) {
  std::vector<Tensor<float>> parts;
  for (const auto& e : batch.episodes) {
    parts.push_back(e.support_images);
    parts.push_back(e.query_images);
  }
  return ops::concat(parts, 0);
}

// Encoder output for the whole step, interpolating tasks at a random layer.
Tensor<float> encode_step(FslModel<float>& model, const StepBatch& batch, const InterpolationConfig& interp,
                          std::mt19937_64& interp_rng) {
  auto images = concat_images(batch);
  auto& encoder = model.encoder();
  const std::size_t E = batch.episodes.size();
  if (!interp.enabled() || E < 2) return encoder.encode(images, true).features;
  const std::size_t layer =
      interp.mode == InterpolationMode::mixup ? 0 : sample_interpolation_layer(interp_rng);
  const double lambda = sample_lambda(interp, interp_rng);
  const auto partner = random_derangement(E, interp_rng);
  auto hidden = encoder.forward_range(images, 0, layer, true);
  std::vector<TaskHidden<float>> tasks;
  for (std::size_t e = 0; e < E; ++e) {
    const std::size_t s0 = batch.offsets[e];
    const std::size_t q0 = s0 + batch.episodes[e].support_images.dim(0);
    const std::size_t end = q0 + batch.episodes[e].query_images.dim(0);
    tasks.push_back({ops::slice_rows(hidden, s0, q0), ops::slice_rows(hidden, q0, end)});
  }
  std::vector<Tensor<float>> mixed;
  for (std::size_t e = 0; e < E; ++e) {
    auto t = interpolate_tasks(tasks[e], tasks[partner[e]], lambda);
    mixed.push_back(t.support);
    mixed.push_back(t.query);
  }
  return encoder.forward_range(ops::concat(mixed, 0), layer, kEncoderBlocks, true);
}

std::string episode_name(std::size_t episode) { return "episode_" + std::to_string(episode) + ".relfsl"; }

}  // namespace

TrainResult train(FslModel<float>& model, const Dataset& train_set, const RunConfig& config,
                  const TrainOptions& options) {
  validate(config);
  const auto& tc = config.train;
  std::mt19937_64 data_rng(tc.seed);
  std::mt19937_64 interp_rng(tc.seed ^ kInterpolationStream);
  Adam<float> adam(model.parameters(), {tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay});

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log_file.open(options.out_dir / "train_log.csv");
    if (!log_file) throw IoError("cannot write " + (options.out_dir / "train_log.csv").string());
    log_file << "episode,loss,acc\n";
    log_file << std::setprecision(9);
  }

  TrainResult result;
  const std::size_t per_step = tc.episodes_per_step();
  std::size_t done = 0;
  while (done < tc.total_episodes) {
    const std::size_t E = std::min(per_step, tc.total_episodes - done);
    StepBatch batch;
    const auto classes = sample_classes(train_set, tc.n_way_train, data_rng);
    std::size_t row = 0;
    for (std::size_t e = 0; e < E; ++e) {
      batch.episodes.push_back(
          sample_episode_for_classes(train_set, classes, tc.k_shot, tc.n_query, data_rng, true));
      batch.offsets.push_back(row);
      row += batch.episodes.back().support_images.dim(0) + batch.episodes.back().query_images.dim(0);
    }

    auto z = encode_step(model, batch, config.model.interpolation, interp_rng);
    auto f = model.refine(z, true);
    std::vector<Tensor<float>> losses;
    std::vector<TrainLogEntry> entries;
    for (std::size_t e = 0; e < E; ++e) {
      const auto& ep = batch.episodes[e];
      const std::size_t s0 = batch.offsets[e], q0 = s0 + ep.support_images.dim(0);
      const std::size_t end = q0 + ep.query_images.dim(0);
      auto out = model.classify(ops::slice_rows(f, s0, q0), ops::slice_rows(f, q0, end), ep.n_way(), tc.k_shot);
      auto loss = episode_loss(out.logits, ep.query_labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at episode " + std::to_string(done + e + 1));
      }
      losses.push_back(loss);
      entries.push_back({done + e + 1, value, accuracy(predict(out.logits), ep.query_labels)});
    }
    auto total = ops::scale(ops::sum(ops::concat(losses, 0)), 1.0 / static_cast<double>(E));
    backward(total);
    adam.step();

    for (const auto& entry : entries) {
      if (log_file.is_open()) log_file << entry.episode << ',' << entry.loss << ',' << entry.accuracy << '\n';
      if (options.on_episode) options.on_episode(entry);
      result.log.push_back(entry);
    }
    const std::size_t before = done;
    done += E;
    if (!options.out_dir.empty() && done / tc.save_every > before / tc.save_every) {
      const auto path = options.out_dir / episode_name((done / tc.save_every) * tc.save_every);
      save_checkpoint(path, model, config);
      result.checkpoints.push_back(path);
    }
  }
  if (!options.out_dir.empty()) {
    const auto path = options.out_dir / "final.relfsl";
    save_checkpoint(path, model, config);
    result.checkpoints.push_back(path);
    log_file.flush();
  }
  return result;
}

// ---------------------------------------------------------------- evaluation

Metrics compute_metrics(const std::vector<std::vector<std::uint64_t>>& confusion) {
  const std::size_t n = confusion.size();
  std::uint64_t total = 0, trace = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (confusion[i].size() != n) throw ShapeError("compute_metrics: confusion matrix must be square");
    for (std::size_t j = 0; j < n; ++j) total += confusion[i][j];
    trace += confusion[i][i];
  }
  if (total == 0) throw ContractError("compute_metrics: confusion matrix is all zero");
  double precision = 0, recall = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < n; ++k) {
      predicted += confusion[k][c];
      actual += confusion[c][k];
    }
    const double tp = static_cast<double>(confusion[c][c]);
    precision += predicted == 0 ? 0.0 : tp / static_cast<double>(predicted);
    recall += actual == 0 ? 0.0 : tp / static_cast<double>(actual);
  }
  Metrics m;
  m.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  m.precision = precision / static_cast<double>(n);
  m.recall = recall / static_cast<double>(n);
  m.f1 = m.precision + m.recall == 0 ? 0.0 : 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

double MetricsReport::mean_inference_ms(std::size_t first_n) const {
  const std::size_t n = std::min(first_n, episode_ms.size());
  if (n == 0) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += episode_ms[i];
  return total / static_cast<double>(n);
}

MetricsReport evaluate(FslModel<float>& model, const Dataset& test_set, std::size_t episodes, const RunConfig& config,
                       std::uint64_t seed, std::size_t threads) {
  if (episodes < 1) throw ContractError("evaluate: need at least one episode");
  const auto& tc = config.train;
  const std::size_t n_way = tc.n_way_test;
  std::mt19937_64 rng(seed);
  std::vector<Episode> sampled;
  sampled.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    sampled.push_back(sample_episode(test_set, n_way, tc.k_shot, tc.n_query, rng, false));
  }

  std::vector<std::vector<std::int64_t>> predictions(episodes);
  std::vector<double> ms(episodes);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    NoGradGuard guard;
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= episodes) return;
      try {
        const auto start = std::chrono::steady_clock::now();
        auto out = model.forward(sampled[i], false);
        const auto stop = std::chrono::steady_clock::now();
        predictions[i] = predict(out.logits);
        ms[i] = std::chrono::duration<double, std::milli>(stop - start).count();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = episodes;
      }
    }
  };
  threads = std::max<std::size_t>(1, threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  MetricsReport report;
  report.confusion.assign(n_way, std::vector<std::uint64_t>(n_way, 0));
  report.episode_count = episodes;
  report.episode_ms = ms;
  for (std::size_t i = 0; i < episodes; ++i) {
    const auto& labels = sampled[i].query_labels;
    for (std::size_t q = 0; q < labels.size(); ++q) {
      ++report.confusion[static_cast<std::size_t>(labels[q])][static_cast<std::size_t>(predictions[i][q])];
    }
    report.episode_accuracy.push_back(accuracy(predictions[i], labels));
  }
  const auto m = compute_metrics(report.confusion);
  report.accuracy = m.accuracy;
  report.precision = m.precision;
  report.recall = m.recall;
  report.f1 = m.f1;
  double mean = 0;
  for (double a : report.episode_accuracy) mean += a;
  mean /= static_cast<double>(episodes);
  double var = 0;
  for (double a : report.episode_accuracy) var += (a - mean) * (a - mean);
  const double sd = episodes > 1 ? std::sqrt(var / static_cast<double>(episodes - 1)) : 0.0;
  report.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(episodes));
  return report;
}

std::string format_report(const MetricsReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "accuracy  " << r.accuracy << " +- " << r.ci95 << "\n";
  out << "precision " << r.precision << "\n";
  out << "recall    " << r.recall << "\n";
  out << "f1        " << r.f1 << "\n";
  out << "episodes  " << r.episode_count << "\n";
  out << "confusion";
  for (const auto& row : r.confusion) {
    out << "\n ";
    for (auto v : row) out << ' ' << v;
  }
  out << "\n";
  return out.str();
}

}  // namespace relfsl
