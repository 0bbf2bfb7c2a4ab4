// SPDX-License-Identifier: Apache-2.0

#include "relfsl/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "relfsl/checkpoint.hpp"
#include "relfsl/error.hpp"
#include "relfsl/gradcheck_suite.hpp"
#include "relfsl/routing.hpp"
#include "relfsl/trainer.hpp"

namespace relfsl {

namespace fs = std::filesystem;

ClassSplit split_for_run(const Dataset& dataset, const RunConfig& config) {
  return split_classes(dataset, config.data.train_fraction, config.train.seed, config.train.n_way_train,
                       config.train.n_way_test);
}

// ---------------------------------------------------------------- ablation

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names = {"full",    "no_scr",    "no_cca", "vanilla_attn",
                                                 "no_attn", "no_interp", "mixup",  "channels_64"};
  return names;
}

RunConfig apply_variant(RunConfig c, const std::string& variant) {
  if (variant == "full") {
  } else if (variant == "no_scr") {
    c.model.relational.scr_enabled = false;
  } else if (variant == "no_cca") {
    c.model.relational.cca_enabled = false;
  } else if (variant == "vanilla_attn") {
    c.model.routing.mode = AttentionMode::vanilla;
  } else if (variant == "no_attn") {
    c.model.routing.mode = AttentionMode::none;
  } else if (variant == "no_interp") {
    c.model.interpolation.mode = InterpolationMode::off;
  } else if (variant == "mixup") {
    c.model.interpolation.mode = InterpolationMode::mixup;
  } else if (variant == "channels_64") {
    c.model.encoder.channels = 64;
  } else {
    std::string known;
    for (const auto& v : ablation_variants()) known += (known.empty() ? "" : ", ") + v;
    throw ConfigError("unknown ablation variant '" + variant + "' (expected one of " + known + ")");
  }
  return c;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& variants,
                                      const Dataset& train_set, const Dataset& test_set, std::size_t eval_episodes,
                                      std::uint64_t eval_seed, std::size_t threads, std::ostream* progress) {
  std::vector<RunConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(base, v));
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& cfg = configs[i];
    validate(cfg);
    FslModel<float> model(cfg.model, cfg.train.seed);
    train(model, train_set, cfg);
    const auto report = evaluate(model, test_set, eval_episodes, cfg, eval_seed, threads);
    rows.push_back({variants[i], report.accuracy, report.ci95, report.mean_inference_ms(100)});
    if (progress) {
      *progress << std::left << std::setw(14) << variants[i] << std::right << std::fixed << std::setprecision(4)
                << " accuracy " << report.accuracy << " +- " << report.ci95 << "  " << std::setprecision(2)
                << rows.back().mean_inference_ms << " ms/episode\n"
                << std::flush;
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,accuracy,mean_inference_ms\n" << std::setprecision(9);
  for (const auto& r : rows) out << r.variant << ',' << r.accuracy << ',' << r.mean_inference_ms << '\n';
  return out.str();
}

// ---------------------------------------------------------------- heatmaps

std::vector<std::uint8_t> heatmap_pixels(std::span<const float> map, std::size_t height, std::size_t width,
                                         std::size_t size) {
  if (map.size() != height * width || map.empty()) throw ShapeError("heatmap: map size does not match its shape");
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::uint8_t> pixels(size * size, 0);
  if (hi == lo) return pixels;
  for (std::size_t y = 0; y < size; ++y) {
    const std::size_t r = y * height / size;
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t c = x * width / size;
      const double v = (map[r * width + c] - lo) / (hi - lo);
      pixels[y * size + x] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
  }
  return pixels;
}

AttentionMaps<float> pair_attention(FslModel<float>& model, const Tensor<float>& support_image,
                                    const Tensor<float>& query_image) {
  if (!model.config().relational.cca_enabled) {
    throw ContractError("heatmap: the model has cross-correlational attention disabled");
  }
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  auto s = preprocess(support_image, false, rng);
  auto q = preprocess(query_image, false, rng);
  auto batch = ops::concat<float>({ops::reshape(s, {1, 3, kInputSize, kInputSize}),
                                   ops::reshape(q, {1, 3, kInputSize, kInputSize})},
                                  0);
  auto f = model.refine(model.encoder().encode(batch, false).features, false);
  return model.attention(ops::slice_rows(f, 0, 1), ops::slice_rows(f, 1, 2));
}

AttentionMaps<float> export_heatmap(FslModel<float>& model, const fs::path& support_image, const fs::path& query_image,
                                    const fs::path& out_dir) {
  auto maps = pair_attention(model, read_pnm(support_image), read_pnm(query_image));
  fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "heatmap.csv");
  if (!csv) throw IoError("cannot write " + (out_dir / "heatmap.csv").string());
  csv << "map,row,col,value\n" << std::setprecision(9);
  for (const auto& [name, t] : {std::pair<std::string, Tensor<float>>{"query", maps.a_q}, {"support", maps.a_s}}) {
    const std::size_t h = t.dim(1), w = t.dim(2);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) csv << name << ',' << r << ',' << c << ',' << t.data()[r * w + c] << '\n';
    }
    write_pgm(out_dir / (name + ".pgm"), kInputSize, kInputSize, heatmap_pixels(t.data(), h, w));
  }
  if (!csv) throw IoError("failed writing " + (out_dir / "heatmap.csv").string());
  return maps;
}

// ---------------------------------------------------------------- subcommands

namespace {

struct Options {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t threads = 1;

  std::string config, data, out, checkpoint, init, report, split = "test", support, query, file;
  bool reset_head = false;
  std::size_t episodes = 0;

  std::size_t classes = 7, per_class = 40, size = kInputSize;
  int bits = 64;
  std::size_t seeds = 5;

  std::size_t tokens = 256, dim = 64, grid = 4, top_k = 4;
  std::vector<std::string> variants;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

RunConfig run_config(const Options& o) {
  auto c = load_config(o.config);
  if (o.seed_given) c.train.seed = o.seed;
  validate(c);
  return c;
}

int cmd_synth(const Options& o, std::ostream& out) {
  auto ds = generate_synthetic(o.classes, o.per_class, o.size, o.seed);
  write_dataset(ds, o.out);
  out << "wrote " << ds.num_classes() << " classes x " << o.per_class << " images to " << o.out << "\n";
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  auto config = run_config(o);
  const auto ds = load_dataset(o.data);
  config.data.source = ds.source;
  const auto split = split_for_run(ds, config);
  FslModel<float> model(config.model, config.train.seed);
  if (!o.init.empty()) {
    assign_state(model, read_checkpoint(o.init));
    if (o.reset_head) model.reset_head(config.train.seed);
  } else if (o.reset_head) {
    throw ConfigError("--reset-head needs --init");
  }
  out << "training on " << split.train.num_classes() << " classes (" << split.train.num_items() << " images), "
      << config.train.total_episodes << " episodes\n";
  double loss_sum = 0, acc_sum = 0;
  std::size_t n = 0;
  TrainOptions opts;
  opts.out_dir = o.out;
  opts.on_episode = [&](const TrainLogEntry& e) {
    loss_sum += e.loss;
    acc_sum += e.accuracy;
    ++n;
    if (e.episode % 50 == 0 || e.episode == config.train.total_episodes) {
      out << "episode " << e.episode << " loss " << std::fixed << std::setprecision(4) << loss_sum / n << " acc "
          << acc_sum / n << "\n"
          << std::defaultfloat << std::flush;
      loss_sum = acc_sum = 0;
      n = 0;
    }
  };
  const auto result = train(model, split.train, config, opts);
  for (const auto& p : result.checkpoints) out << "checkpoint " << p.string() << "\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  auto loaded = load_checkpoint(o.checkpoint);
  const auto ds = load_dataset(o.data);
  Dataset test_set;
  if (o.split == "test") {
    test_set = split_for_run(ds, loaded.config).test;
  } else if (o.split == "all") {
    test_set = ds;
  } else {
    throw ConfigError("--split must be test or all");
  }
  const std::size_t episodes = o.episodes ? o.episodes : loaded.config.eval.episodes;
  const std::uint64_t seed = o.seed_given ? o.seed : loaded.config.train.seed;
  const auto report = evaluate(loaded.model, test_set, episodes, loaded.config, seed, o.threads);
  out << format_report(report);
  if (!o.report.empty()) {
    nlohmann::ordered_json j;
    j["accuracy"] = report.accuracy;
    j["precision"] = report.precision;
    j["recall"] = report.recall;
    j["f1"] = report.f1;
    j["ci95"] = report.ci95;
    j["confusion"] = report.confusion;
    j["episode_count"] = report.episode_count;
    j["mean_inference_ms"] = report.mean_inference_ms(100);
    write_text(o.report, j.dump(2) + "\n");
  }
  return 0;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  if (o.bits != 32 && o.bits != 64) throw ConfigError("--bits must be 32 or 64");
  const auto precision = o.bits == 32 ? Precision::f32 : Precision::f64;
  const auto summary = run_gradcheck_suite(precision, o.seeds);
  struct Agg {
    double worst = 0;
    int resampled = 0;
    bool pass = true;
  };
  std::vector<std::pair<std::string, Agg>> rows;
  for (const auto& r : summary.results) {
    if (rows.empty() || rows.back().first != r.name) rows.push_back({r.name, {}});
    auto& a = rows.back().second;
    a.worst = std::max(a.worst, r.report.max_rel_error);
    a.resampled += r.report.resampled;
    a.pass = a.pass && r.report.pass;
  }
  const double tol = suite_options(precision).tolerance;
  out << "gradcheck " << o.bits << "-bit, tolerance " << tol << ", " << o.seeds << " seeds\n";
  for (const auto& [name, a] : rows) {
    out << std::left << std::setw(26) << name << std::right << std::scientific << std::setprecision(3) << a.worst
        << std::defaultfloat << "  resampled " << std::setw(3) << a.resampled << "  " << (a.pass ? "pass" : "FAIL")
        << "\n";
  }
  out << (summary.pass() ? "all passed" : "FAILED") << " in " << std::fixed << std::setprecision(2)
      << summary.seconds << " s\n"
      << std::defaultfloat;
  return summary.pass() ? 0 : 1;
}

int cmd_bench_attn(const Options& o, std::ostream& out) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(o.tokens))));
  if (side * side != o.tokens) throw ConfigError("--tokens must be a square number");
  const auto grid = make_region_grid(side, side, o.grid);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](std::size_t rows) {
    std::vector<float> v(rows * o.dim);
    for (auto& x : v) x = static_cast<float>(normal(rng));
    return Tensor<float>::from_data({rows, o.dim}, std::move(v));
  };
  const auto q = random(o.tokens), k = random(o.tokens), v = random(o.tokens);
  auto time_ms = [](auto&& fn) {
    constexpr int kReps = 5;
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < kReps; ++i) fn();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() / kReps;
  };
  NoGradGuard guard;
  const double vanilla_ms = time_ms([&] { vanilla_attention(q, k, v); });
  std::ostringstream csv;
  csv << "k,vanilla_macs,routed_macs,ratio,vanilla_ms,routed_ms\n";
  out << "tokens " << o.tokens << "  d " << o.dim << "  grid " << o.grid << "\n";
  out << std::setw(4) << "k" << std::setw(14) << "vanilla MACs" << std::setw(14) << "routed MACs" << std::setw(9)
      << "ratio" << std::setw(12) << "vanilla ms" << std::setw(11) << "routed ms" << "\n";
  std::vector<std::size_t> ks;
  for (std::size_t kk = 1; kk <= grid.num_regions(); kk *= 2) ks.push_back(kk);
  if (std::find(ks.begin(), ks.end(), o.top_k) == ks.end()) ks.push_back(o.top_k);
  if (ks.back() != grid.num_regions()) ks.push_back(grid.num_regions());
  std::sort(ks.begin(), ks.end());
  for (auto kk : ks) {
    const auto macs = flop_count(o.tokens, o.tokens, o.dim, o.grid, kk);
    auto qr = partition_regions(ops::reshape(ops::transpose(q), {o.dim, side, side}), o.grid);
    auto kr = partition_regions(ops::reshape(ops::transpose(k), {o.dim, side, side}), o.grid);
    const double routed_ms = time_ms([&] {
      auto routing = topk_routing(region_affinity(qr.descriptors, kr.descriptors), kk);
      routed_attention(q, k, v, routing, grid, grid);
    });
    out << std::setw(4) << kk << std::setw(14) << macs.vanilla << std::setw(14) << macs.routed << std::setw(9)
        << std::fixed << std::setprecision(3) << macs.ratio() << std::setw(12) << vanilla_ms << std::setw(11)
        << routed_ms << std::defaultfloat << "\n";
    csv << kk << ',' << macs.vanilla << ',' << macs.routed << ',' << std::setprecision(9) << macs.ratio() << ','
        << vanilla_ms << ',' << routed_ms << '\n';
  }
  if (!o.out.empty()) write_text(o.out, csv.str());
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const auto config = run_config(o);
  const auto variants = o.variants.empty() ? ablation_variants() : o.variants;
  for (const auto& v : variants) apply_variant(config, v);
  const auto ds = load_dataset(o.data);
  const auto split = split_for_run(ds, config);
  const std::size_t episodes = o.episodes ? o.episodes : config.eval.episodes;
  const auto rows = run_ablation(config, variants, split.train, split.test, episodes, config.train.seed, o.threads,
                                 &out);
  if (!o.out.empty()) write_text(o.out, ablation_csv(rows));
  return 0;
}

int cmd_heatmap(const Options& o, std::ostream& out) {
  auto loaded = load_checkpoint(o.checkpoint);
  const auto maps = export_heatmap(loaded.model, o.support, o.query, o.out);
  out << "wrote heatmap.csv, query.pgm, support.pgm to " << o.out << " (" << maps.a_q.dim(1) << "x"
      << maps.a_q.dim(2) << " maps)\n";
  return 0;
}

bool is_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  char magic[8] = {};
  f.read(magic, 8);
  return f.gcount() == 8 && std::equal(magic, magic + 4, kCheckpointMagic);
}

int cmd_inspect(const Options& o, std::ostream& out) {
  if (!is_checkpoint(o.file)) {
    out << serialize_config(load_config(o.file));
    return 0;
  }
  const auto data = read_checkpoint(o.file);
  const auto config = parse_config(data.config_text);
  out << "format_version " << data.version << "\n\n" << serialize_config(config) << "\n";
  std::size_t total = 0;
  for (const auto& [name, t] : data.tensors) {
    out << std::left << std::setw(36) << name << std::right << std::setw(20) << shape_string(t.shape())
        << std::setw(10) << t.numel() << "\n";
    total += t.numel();
  }
  out << data.tensors.size() << " tensors, " << total << " values\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot image classification with relational embeddings and routed co-attention", "relfsl"};
  app.require_subcommand(1);
  Options o;
  auto seed_opt = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t s) {
          o.seed = s;
          o.seed_given = true;
        },
        "Random seed");
  };
  auto threads_opt = [&](CLI::App* sub) {
    sub->add_option("--threads", o.threads, "Evaluation worker threads")->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset in corpus layout");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--classes", o.classes, "Number of classes")->check(CLI::Range(2, 10000));
  synth->add_option("--per-class", o.per_class, "Images per class")->check(CLI::Range(2, 100000));
  synth->add_option("--size", o.size, "Image side")->check(CLI::Range(8, 4096));
  seed_opt(synth);

  auto* train_cmd = app.add_subcommand("train", "Episodic training");
  train_cmd->add_option("--config", o.config, "Run config file")->required();
  train_cmd->add_option("--data", o.data, "Dataset root")->required();
  train_cmd->add_option("--out", o.out, "Checkpoint and log directory")->required();
  train_cmd->add_option("--init", o.init, "Start from this checkpoint");
  train_cmd->add_flag("--reset-head", o.reset_head, "Re-draw the routing projections of --init");
  seed_opt(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out classes");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", o.data, "Dataset root")->required();
  eval_cmd->add_option("--episodes", o.episodes, "Episodes (default: eval.episodes)")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--split", o.split, "test (held-out classes of the run) or all")
      ->check(CLI::IsMember({"test", "all"}));
  eval_cmd->add_option("--report", o.report, "Write the report as JSON");
  seed_opt(eval_cmd);
  threads_opt(eval_cmd);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  gc->add_option("--bits", o.bits, "32 or 64")->check(CLI::IsMember({32, 64}));
  gc->add_option("--seeds", o.seeds, "Seeds per case")->check(CLI::Range(1, 1000));

  auto* bench = app.add_subcommand("bench-attn", "MAC counts and timings of routed vs vanilla attention");
  bench->add_option("--tokens", o.tokens, "Tokens per map (square)")->check(CLI::PositiveNumber);
  bench->add_option("--dim", o.dim, "Token dimension")->check(CLI::PositiveNumber);
  bench->add_option("--grid", o.grid, "Regions per side")->check(CLI::PositiveNumber);
  bench->add_option("--top-k", o.top_k, "Routed regions to include in the table")->check(CLI::PositiveNumber);
  bench->add_option("--out", o.out, "CSV output");
  seed_opt(bench);

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate ablation variants");
  ablate->add_option("--config", o.config, "Base run config")->required();
  ablate->add_option("--data", o.data, "Dataset root")->required();
  ablate->add_option("--variants", o.variants, "Variants (default: all)")->delimiter(',');
  ablate->add_option("--episodes", o.episodes, "Evaluation episodes")->check(CLI::PositiveNumber);
  ablate->add_option("--out", o.out, "CSV output");
  seed_opt(ablate);
  threads_opt(ablate);

  auto* heat = app.add_subcommand("heatmap", "Export co-attention maps of one query/support pair");
  heat->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  heat->add_option("--support", o.support, "Support image (PNM)")->required();
  heat->add_option("--query", o.query, "Query image (PNM)")->required();
  heat->add_option("--out", o.out, "Output directory")->required();

  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint or config file");
  inspect->add_option("file", o.file, "Checkpoint or config")->required();

  std::vector<std::string> storage{"relfsl"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "synth") return cmd_synth(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "gradcheck") return cmd_gradcheck(o, out);
    if (name == "bench-attn") return cmd_bench_attn(o, out);
    if (name == "ablate") return cmd_ablate(o, out);
    if (name == "heatmap") return cmd_heatmap(o, out);
    return cmd_inspect(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace relfsl
