// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one pass/fail line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "relfsl/checkpoint.hpp"
#include "relfsl/cli.hpp"
#include "relfsl/gradcheck_suite.hpp"
#include "relfsl/relational.hpp"
#include "relfsl/trainer.hpp"

using namespace relfsl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

Tensor<double> from(const oracle::Vec& v, Shape shape) { return Tensor<double>::from_data(std::move(shape), v); }

oracle::Vec values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  if (!o.pass) ++failures;
  std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << "  [" << o.detail << "]"
            << std::endl;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

Outcome gradcheck_criterion() {
  const auto start = Clock::now();
  auto s64 = run_gradcheck_suite(Precision::f64, 5);
  auto s32 = run_gradcheck_suite(Precision::f32, 5);
  const double total = seconds_since(start);
  double worst32 = 0, worst64 = 0;
  std::string failed;
  for (const auto& r : s64.results) {
    worst64 = std::max(worst64, r.report.max_rel_error);
    if (!r.report.pass) failed += " " + r.name + "/64/seed" + std::to_string(r.seed);
  }
  for (const auto& r : s32.results) {
    worst32 = std::max(worst32, r.report.max_rel_error);
    if (!r.report.pass) failed += " " + r.name + "/32/seed" + std::to_string(r.seed);
  }
  Outcome o;
  o.pass = s64.pass() && s32.pass() && total < 120.0;
  o.detail = std::to_string(gradcheck_cases().size()) + " cases x 5 seeds; worst 32-bit " + fmt("%.2e", worst32) +
             ", 64-bit " + fmt("%.2e", worst64) + "; " + fmt("%.1f s", total) + (failed.empty() ? "" : ";" + failed);
  return o;
}

Outcome oracle_criterion() {
  std::mt19937_64 rng(2024);
  double conv = 0, mm = 0, attn = 0, sc = 0, match = 0;
  for (int i = 0; i < 10; ++i) {
    {
      const std::size_t B = 2, Ci = 3, H = 8 + i % 3, W = 8, Co = 4, stride = 1 + i % 2, pad = i % 2;
      auto x = oracle::random_vec(B * Ci * H * W, rng), w = oracle::random_vec(Co * Ci * 9, rng),
           b = oracle::random_vec(Co, rng);
      auto got = ops::conv2d(from(x, {B, Ci, H, W}), from(w, {Co, Ci, 3, 3}), from(b, {Co}), stride, pad);
      conv = std::max(conv, max_abs_diff(got.data(), oracle::conv2d(x, w, b, B, Ci, H, W, Co, 3, 3, stride, pad)));
    }
    {
      const std::size_t n = 4 + i, k = 9, m = 6;
      auto a = oracle::random_vec(n * k, rng), b = oracle::random_vec(k * m, rng);
      mm = std::max(mm, max_abs_diff(ops::matmul(from(a, {n, k}), from(b, {k, m})).data(), oracle::matmul(a, b, n, k, m)));
    }
    {
      const std::size_t n = 16, m = 12 + i, d = 8;
      auto q = oracle::random_vec(n * d, rng), k = oracle::random_vec(m * d, rng), v = oracle::random_vec(m * d, rng);
      auto got = vanilla_attention(from(q, {n, d}), from(k, {m, d}), from(v, {m, d}));
      attn = std::max(attn, max_abs_diff(got.data(), oracle::attention(q, k, v, n, m, d, d)));
    }
    {
      const std::size_t C = 4 + i, H = 5, W = 5, d = 5;
      auto z = oracle::random_vec(C * H * W, rng);
      sc = std::max(sc, max_abs_diff(self_correlation(from(z, {C, H, W}), d).data(),
                                     oracle::self_correlation(z, C, H, W, d)));
    }
    {
      const std::size_t S = 5, c = 16;
      auto x = oracle::random_vec(S * S * S * S, rng);
      auto p = MatchingParams<double>::make(c, 0.3, rng);
      std::normal_distribution<double> n(0.0, 0.2);
      for (auto* bs : {&p.q_bias, &p.s_bias})
        for (auto& b : *bs)
          for (auto& v : b.mutable_data()) v = n(rng);
      oracle::Matching m;
      m.c = c;
      for (std::size_t b = 0; b < 2; ++b) {
        m.qw[b] = values(p.q_weight[b]);
        m.qb[b] = values(p.q_bias[b]);
        m.sw[b] = values(p.s_weight[b]);
        m.sb[b] = values(p.s_bias[b]);
      }
      match = std::max(match, max_abs_diff(convolutional_matching(from(x, {S, S, S, S}), p).data(),
                                           oracle::matching(x, m, S)));
    }
  }
  Outcome o;
  o.pass = conv <= 1e-5 && mm <= 1e-5 && attn <= 1e-5 && sc <= 1e-5 && match <= 1e-5;
  o.detail = "max |diff| conv2d " + fmt("%.1e", conv) + ", matmul " + fmt("%.1e", mm) + ", attention " +
             fmt("%.1e", attn) + ", self-correlation " + fmt("%.1e", sc) + ", matching " + fmt("%.1e", match);
  return o;
}

Outcome routing_criterion() {
  double worst = 0;
  bool bitwise = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t side = 16, grid = 4, d = 16, n = side * side, R = grid * grid;
    auto g = make_region_grid(side, side, grid);
    auto q = oracle::random_vec(n * d, rng), k = oracle::random_vec(n * d, rng), v = oracle::random_vec(n * d, rng);
    RoutingIndex all{R, R, R, {}};
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < R; ++j) all.indices.push_back(j);
    auto routed = routed_attention(from(q, {n, d}), from(k, {n, d}), from(v, {n, d}), all, g, g);
    worst = std::max(worst, max_abs_diff(routed.data(), vanilla_attention(from(q, {n, d}), from(k, {n, d}),
                                                                          from(v, {n, d}))
                                                            .data()));

    auto routing = topk_routing(from(oracle::random_vec(R * R, rng), {R, R}), 4);
    // Per query region: everything outside its own routed regions moves.
    for (std::size_t region = 0; region < R; ++region) {
      std::vector<bool> keep(R, false);
      for (std::size_t j = 0; j < routing.k; ++j) keep[routing.at(region, j)] = true;
      auto k2 = k, v2 = v;
      for (std::size_t t = 0; t < n; ++t) {
        if (keep[g.region_of(t)]) continue;
        for (std::size_t j = 0; j < d; ++j) {
          k2[t * d + j] += 5.0;
          v2[t * d + j] *= -7.0;
        }
      }
      auto base = routed_attention(from(q, {n, d}), from(k, {n, d}), from(v, {n, d}), routing, g, g);
      auto moved = routed_attention(from(q, {n, d}), from(k2, {n, d}), from(v2, {n, d}), routing, g, g);
      for (auto t : g.tokens_of(region))
        bitwise = bitwise && std::equal(base.data().begin() + t * d, base.data().begin() + (t + 1) * d,
                                        moved.data().begin() + t * d);
    }
  }
  Outcome o;
  o.pass = worst <= 1e-6 && bitwise;
  o.detail = "k = all vs vanilla max |diff| " + fmt("%.1e", worst) + " over 10 seeds; non-routed perturbation " +
             (bitwise ? "bit-identical" : "CHANGED OUTPUT");
  return o;
}

Outcome interpolation_criterion() {
  std::mt19937_64 rng(7);
  auto a = TaskHidden<double>{from(oracle::random_vec(2 * 64 * 21 * 21, rng), {2, 64, 21, 21}),
                              from(oracle::random_vec(30 * 64 * 21 * 21, rng), {30, 64, 21, 21})};
  auto b = TaskHidden<double>{from(oracle::random_vec(2 * 64 * 21 * 21, rng), {2, 64, 21, 21}),
                              from(oracle::random_vec(30 * 64 * 21 * 21, rng), {30, 64, 21, 21})};
  auto same = [](const Tensor<double>& x, const Tensor<double>& y) {
    return std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  const auto one = interpolate_tasks(a, b, 1.0), zero = interpolate_tasks(a, b, 0.0);
  const bool endpoints = same(one.support, a.support) && same(one.query, a.query) && same(zero.support, b.support) &&
                         same(zero.query, b.query);
  TaskHidden<double> two{Tensor<double>::full({1}, 2.0), Tensor<double>::full({1}, 2.0)};
  TaskHidden<double> four{Tensor<double>::full({1}, 4.0), Tensor<double>::full({1}, 4.0)};
  const auto mid = interpolate_tasks(two, four, 0.5);
  const bool midpoint = mid.support.item() == 3.0 && mid.query.item() == 3.0;
  const auto half = interpolate_tasks(a, b, 0.5);
  double mid_err = 0;
  for (std::size_t i = 0; i < a.query.numel(); ++i)
    mid_err = std::max(mid_err, std::abs(half.query.data()[i] - 0.5 * (a.query.data()[i] + b.query.data()[i])));

  InterpolationConfig cfg;
  std::mt19937_64 lrng(11);
  double mean = 0;
  for (int i = 0; i < 10000; ++i) mean += sample_lambda(cfg, lrng);
  mean /= 10000.0;
  Outcome o;
  o.pass = endpoints && midpoint && mid_err <= 1e-12 && std::abs(mean - 0.5) <= 0.02;
  o.detail = std::string("endpoints ") + (endpoints ? "exact" : "DIFFER") + ", midpoint 2,4 -> " +
             fmt("%g", mid.support.item()) + ", Beta(2,2) mean over 10000 draws " + fmt("%.4f", mean);
  return o;
}

Outcome flop_criterion() {
  const auto c = flop_count(256, 256, 64, 4, 4);
  Outcome o;
  o.pass = c.routed == 2129920u && c.vanilla == 8388608u && std::abs(c.ratio() - 3.94) < 0.005;
  o.detail = "routed " + std::to_string(c.routed) + " vs vanilla " + std::to_string(c.vanilla) + ", ratio " +
             fmt("%.3f", c.ratio());
  return o;
}

Outcome persistence_criterion() {
  const auto dir = fs::temp_directory_path() / "relfsl_acceptance_persist";
  fs::remove_all(dir);
  RunConfig c;
  c.model.encoder.channels = 8;
  c.model.relational.match_channels = 8;
  c.train.total_episodes = 6;
  c.train.save_every = 6;
  c.train.seed = 21;
  auto ds = generate_synthetic(7, 20, 84, 3);
  auto split = split_for_run(ds, c);
  FslModel<float> a(c.model, c.train.seed), b(c.model, c.train.seed);
  train(a, split.train, c, {dir / "a", {}});
  train(b, split.train, c, {dir / "b", {}});
  const bool same_runs = file_bytes(dir / "a" / "final.relfsl") == file_bytes(dir / "b" / "final.relfsl");

  save_checkpoint(dir / "again.relfsl", load_checkpoint(dir / "a" / "final.relfsl").model, c);
  auto loaded = load_checkpoint(dir / "again.relfsl");
  bool round_trip = true;
  const auto want = a.state(), got = loaded.model.state();
  round_trip = want.size() == got.size();
  for (std::size_t i = 0; round_trip && i < want.size(); ++i) {
    round_trip = want[i].first == got[i].first && want[i].second.shape() == got[i].second.shape() &&
                 std::equal(want[i].second.data().begin(), want[i].second.data().end(), got[i].second.data().begin());
  }

  std::ostringstream out, err;
  const int code = run_cli({"synth", "--out", (dir / "data").string(), "--classes", "5", "--per-class", "6"}, out, err);
  {
    std::ofstream cfg(dir / "run.cfg");
    RunConfig e = c;
    e.data.train_fraction = 0.6;
    e.train.n_way_train = 3;
    e.train.n_query = 2;
    e.train.total_episodes = 2;
    e.train.batch_size = 16;
    cfg << serialize_config(e);
  }
  const int code_train = run_cli({"train", "--config", (dir / "run.cfg").string(), "--data", (dir / "data").string(),
                                  "--out", (dir / "cli").string()},
                                 out, err);
  const int code_eval = run_cli({"eval", "--checkpoint", (dir / "cli" / "final.relfsl").string(), "--data",
                                 (dir / "data").string(), "--episodes", "3", "--report", (dir / "r.json").string()},
                                out, err);
  const auto json = file_bytes(dir / "r.json");
  const auto pa = json.find("\"accuracy\""), pp = json.find("\"precision\""), pr = json.find("\"recall\""),
             pf = json.find("\"f1\"");
  const bool schema = code == 0 && code_train == 0 && code_eval == 0 && pa != std::string::npos && pa < pp &&
                      pp < pr && pr < pf && pf != std::string::npos;
  Outcome o;
  o.pass = same_runs && round_trip && schema;
  o.detail = std::string("same-seed checkpoints ") + (same_runs ? "identical" : "DIFFER") + ", round trip " +
             (round_trip ? "bit-exact" : "MISMATCH") + ", report fields " +
             (schema ? "accuracy, precision, recall, f1" : "MISSING");
  return o;
}

Outcome metrics_criterion() {
  const auto m = compute_metrics({{1, 1}, {1, 1}});
  Outcome o;
  o.pass = m.accuracy == 0.5 && m.precision == 0.5 && m.recall == 0.5 && m.f1 == 0.5;
  o.detail = "accuracy " + fmt("%g", m.accuracy) + ", precision " + fmt("%g", m.precision) + ", recall " +
             fmt("%g", m.recall) + ", F1 " + fmt("%g", m.f1);
  return o;
}

// Desk-scale run shared by the learning and ablation criteria.
RunConfig desk_config() {
  RunConfig c;
  c.model.encoder.channels = 16;
  c.train.total_episodes = 500;
  c.train.save_every = 500;
  c.data.train_fraction = 5.0 / 7.0;
  c.eval.episodes = 200;
  return c;
}

void learning_criteria() {
  const auto config = desk_config();
  const auto ds = generate_synthetic(7, 40, 84, 3);
  const auto split = split_for_run(ds, config);

  auto start = Clock::now();
  FslModel<float> model(config.model, config.train.seed);
  const auto log = train(model, split.train, config).log;
  const auto full = evaluate(model, split.test, config.eval.episodes, config, 1, 1);
  const double full_seconds = seconds_since(start);

  // Trailing 100-episode moving average (shorter window before episode 100).
  auto moving_average = [&](std::size_t episode) {
    const std::size_t begin = episode > 100 ? episode - 100 : 0;
    double total = 0;
    for (std::size_t i = begin; i < episode; ++i) total += log[i].loss;
    return total / static_cast<double>(episode - begin);
  };
  const double early = moving_average(50), late = moving_average(500);
  Outcome learn;
  learn.pass = full.accuracy >= 0.80 && full_seconds < 600.0;
  learn.detail = "held-out 2-way accuracy " + fmt("%.4f", full.accuracy) + " +- " + fmt("%.4f", full.ci95) +
                 " over 200 episodes; train+eval " + fmt("%.0f s", full_seconds);
  report(5, "end-to-end learning on held-out classes", learn);
  Outcome curve;
  curve.pass = late < early;
  curve.detail = "100-episode moving-average loss at episode 50 " + fmt("%.3f", early) + ", at 500 " +
                 fmt("%.3f", late);
  report(5, "training loss decreases (episode 50 to 500)", curve);

  const auto no_cca_config = apply_variant(config, "no_cca");
  FslModel<float> no_cca(no_cca_config.model, config.train.seed);
  train(no_cca, split.train, no_cca_config);
  const auto ablated = evaluate(no_cca, split.test, config.eval.episodes, no_cca_config, 1, 1);
  Outcome dir;
  dir.pass = ablated.accuracy <= full.accuracy + full.ci95;
  dir.detail = "no_cca " + fmt("%.4f", ablated.accuracy) + " vs full " + fmt("%.4f", full.accuracy) + " + CI95 " +
               fmt("%.4f", full.ci95);
  report(6, "ablation direction (no_cca does not beat full)", dir);
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  report(9, "metrics on the 2x2 example", metrics_criterion());
  report(7, "MAC accounting", flop_criterion());
  report(4, "interpolation endpoints and Beta(2,2) mean", interpolation_criterion());
  report(2, "oracle equivalence", oracle_criterion());
  report(3, "routing equivalence and locality", routing_criterion());
  report(8, "determinism and persistence", persistence_criterion());
  report(1, "gradcheck suite", gradcheck_criterion());
  if (quick) {
    std::cout << "criteria 5 and 6 skipped (--quick)" << std::endl;
  } else {
    learning_criteria();
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
