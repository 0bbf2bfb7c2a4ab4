// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "relfsl/checkpoint.hpp"
#include "relfsl/head.hpp"
#include "relfsl/trainer.hpp"

using namespace relfsl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("relfsl_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_config() {
  RunConfig c;
  c.model.encoder.channels = 4;
  c.model.relational.match_channels = 4;
  c.train.total_episodes = 8;
  c.train.save_every = 4;
  c.train.n_way_train = 3;
  c.train.n_query = 3;
  c.train.batch_size = 24;  // two episodes per step
  c.train.seed = 5;
  return c;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Tensor<double> rows(std::vector<std::vector<double>> r) {
  std::vector<double> flat;
  for (auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor<double>::from_data({r.size(), r[0].size()}, flat);
}

}  // namespace

TEST_SUITE("fsl-head-trainer") {
  TEST_CASE("cosine head") {
    auto support = rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    std::vector<std::int64_t> labels{0, 1, 2};
    auto logits = classify_episode(rows({{0, 2, 0}}), support, labels);
    CHECK(predict(logits)[0] == 1);
    CHECK(logits.data()[1] == doctest::Approx(10.0));

    auto ortho = classify_episode(rows({{0, 0, 0, 1}}), rows({{1, 0, 0, 0}, {0, 1, 0, 0}}), {0, 1});
    CHECK(ortho.data()[0] == 0.0);
    CHECK(ortho.data()[1] == 0.0);

    // K = 2 identical supports behave like one.
    auto twice = classify_episode(rows({{0.3, 0.4, 0.1}}), rows({{1, 2, 3}, {1, 2, 3}, {3, 1, 0}, {3, 1, 0}}),
                                  {0, 0, 1, 1});
    auto once = classify_episode(rows({{0.3, 0.4, 0.1}}), rows({{1, 2, 3}, {3, 1, 0}}), {0, 1});
    CHECK(twice.data()[0] == doctest::Approx(once.data()[0]).epsilon(1e-12));
    CHECK(twice.data()[1] == doctest::Approx(once.data()[1]).epsilon(1e-12));

    CHECK_THROWS_AS(classify_episode(rows({{1, 0}}), rows({{1, 0}, {0, 1}}), {0, 2}), ContractError);
  }

  TEST_CASE("cosine head is scale invariant") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> q(10 * 6), s(5 * 6);
    for (auto& v : q) v = n(rng);
    for (auto& v : s) v = n(rng);
    auto qt = Tensor<double>::from_data({10, 6}, q), st = Tensor<double>::from_data({5, 6}, s);
    std::vector<std::int64_t> labels{0, 1, 2, 3, 4};
    auto base = predict(classify_episode(qt, st, labels));
    for (double factor : {0.01, 3.0, 250.0}) {
      CHECK(predict(classify_episode(ops::scale(qt, factor), ops::scale(st, factor * 0.5), labels)) == base);
    }
  }

  TEST_CASE("pair head reduces to the prototype head for shared embeddings") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t nq = 4, N = 3, K = 2, C = 5;
    std::vector<double> q(nq * C), s(N * K * C);
    for (auto& v : q) v = n(rng);
    for (auto& v : s) v = n(rng);
    std::vector<double> qp, sp;
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < N * K; ++j) {
        qp.insert(qp.end(), q.begin() + i * C, q.begin() + (i + 1) * C);
        sp.insert(sp.end(), s.begin() + j * C, s.begin() + (j + 1) * C);
      }
    auto pairs = classify_pairs(Tensor<double>::from_data({nq, N * K, C}, qp),
                                Tensor<double>::from_data({nq, N * K, C}, sp), N, K);
    auto proto = classify_episode(Tensor<double>::from_data({nq, C}, q), Tensor<double>::from_data({N * K, C}, s),
                                  {0, 0, 1, 1, 2, 2});
    for (std::size_t i = 0; i < nq * N; ++i) CHECK(pairs.data()[i] == doctest::Approx(proto.data()[i]).epsilon(1e-12));
  }

  TEST_CASE("episode loss") {
    auto uniform = Tensor<double>::zeros({3, 5});
    CHECK(episode_loss(uniform, {0, 3, 4}).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    auto peaked = Tensor<double>::from_data({1, 5}, {10, 0, 0, 0, 0});
    const double want = std::log(1.0 + 4.0 * std::exp(-10.0));
    CHECK(episode_loss(peaked, {0}).item() == doctest::Approx(want).epsilon(1e-9));
    CHECK(want == doctest::Approx(1.8e-4).epsilon(0.01));
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 5.0);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> v(8);
      for (auto& x : v) x = n(rng);
      CHECK(episode_loss(Tensor<double>::from_data({2, 4}, v), {1, 3}).item() >= 0.0);
    }
  }

  TEST_CASE("adam step") {
    AdamOptions opt;
    opt.learning_rate = 1e-3;
    SUBCASE("first step moves by lr against the gradient sign") {
      std::vector<float> p{1.0f, -2.0f, 0.5f};
      std::vector<float> g{0.3f, -4.0f, 1e-3f};
      AdamState s;
      adam_step<float>(p, g, s, opt, "w");
      CHECK(p[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
      CHECK(p[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-6));
      CHECK(p[2] == doctest::Approx(0.5 - 1e-3).epsilon(1e-4));
      CHECK(s.step == 1);
    }
    SUBCASE("zero gradient or zero rate leaves parameters unchanged") {
      std::vector<double> p{1.0, -2.0};
      std::vector<double> zero{0.0, 0.0};
      AdamState s;
      adam_step<double>(p, zero, s, opt, "w");
      CHECK(p == std::vector<double>{1.0, -2.0});
      AdamOptions still = opt;
      still.learning_rate = 0.0;
      still.weight_decay = 0.002;
      std::vector<double> g{5.0, 7.0};
      adam_step<double>(p, g, s, still, "w");
      CHECK(p == std::vector<double>{1.0, -2.0});
    }
    SUBCASE("weight decay is folded into the gradient") {
      AdamOptions wd = opt;
      wd.weight_decay = 0.5;
      std::vector<double> p{2.0};
      std::vector<double> g{-1.0};  // g + wd * p = 0
      AdamState s;
      adam_step<double>(p, g, s, wd, "w");
      CHECK(p[0] == 2.0);
    }
    SUBCASE("deterministic") {
      std::vector<double> a{0.1, 0.2}, b{0.1, 0.2}, g{0.7, -0.3};
      AdamState sa, sb;
      for (int i = 0; i < 3; ++i) {
        adam_step<double>(a, g, sa, opt, "w");
        adam_step<double>(b, g, sb, opt, "w");
      }
      CHECK(a == b);
    }
    SUBCASE("non-finite gradient names the parameter") {
      std::vector<float> p{1.0f};
      std::vector<float> g{NAN};
      AdamState s;
      try {
        adam_step<float>(p, g, s, opt, "encoder.block0.conv.weight");
        FAIL("expected NumericError");
      } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("encoder.block0.conv.weight") != std::string::npos);
      }
    }
  }

  TEST_CASE("metrics") {
    // predictions [1,1,0,0] vs labels [1,0,0,1]
    std::vector<std::vector<std::uint64_t>> confusion{{1, 1}, {1, 1}};
    auto m = compute_metrics(confusion);
    CHECK(m.accuracy == 0.5);
    CHECK(m.precision == 0.5);
    CHECK(m.recall == 0.5);
    CHECK(m.f1 == 0.5);
    auto perfect = compute_metrics({{3, 0, 0}, {0, 2, 0}, {0, 0, 5}});
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.f1 == 1.0);
    CHECK(compute_metrics({{0, 4}, {6, 0}}).accuracy == 0.0);
    auto skew = compute_metrics({{5, 2, 0}, {1, 3, 1}, {0, 0, 0}});
    CHECK(skew.accuracy == 8.0 / 12.0);
    CHECK_THROWS_AS(compute_metrics({{0, 0}, {0, 0}}), ContractError);
  }

  TEST_CASE("shipped configs load") {
    const fs::path dir = fs::path(RELFSL_SOURCE_DIR) / "configs";
    const auto full = load_config(dir / "full.cfg");
    CHECK(serialize_config(full) == serialize_config(RunConfig{}));
    const auto desk = load_config(dir / "desk.cfg");
    CHECK(desk.model.encoder.channels == 16);
    CHECK(desk.train.total_episodes == 500);
    CHECK(desk.eval.episodes == 200);
    CHECK(desk.train.episodes_per_step() == 2);
  }

  TEST_CASE("config format") {
    RunConfig c;
    c.model.encoder.channels = 16;
    c.model.interpolation.mode = InterpolationMode::mixup;
    c.model.routing.mode = AttentionMode::vanilla;
    c.train.learning_rate = 3.3e-5;
    c.train.seed = 0xfffffffffffull;
    c.data.source = "synthetic:7x40@84 seed 3";
    const auto text = serialize_config(c);
    const auto parsed = parse_config(text);
    CHECK(serialize_config(parsed) == text);
    CHECK(parsed.train.learning_rate == 3.3e-5);
    CHECK(parsed.model.routing.mode == AttentionMode::vanilla);
    CHECK(parse_config("# comment\n\nencoder.channels = 64\n").model.encoder.channels == 64);

    auto error_line = [](const std::string& text) {
      try {
        parse_config(text);
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(error_line("encoder.channels = 8\nbogus.key = 1\n").find("line 2") != std::string::npos);
    CHECK(error_line("encoder.channels = 8\nencoder.channels = 9\n").find("line 2") != std::string::npos);
    CHECK(error_line("train.learning_rate = fast\n").find("line 1") != std::string::npos);
    CHECK_FALSE(error_line("attention.grid = 2\n").empty());  // does not divide 5
    CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
  }

  TEST_CASE("episodes per step follow the image batch") {
    TrainConfig t;
    CHECK(t.images_per_episode() == 80);
    CHECK(t.episodes_per_step() == 2);
    t.n_way_train = 2;
    CHECK(t.episodes_per_step() == 4);
  }

  TEST_CASE("model initial loss is near uniform") {
    RunConfig c;
    c.model.encoder.channels = 8;
    FslModel<float> model(c.model, 1);
    auto ds = generate_synthetic(5, 20, 84, 2);
    std::mt19937_64 rng(9);
    double total = 0;
    for (int e = 0; e < 3; ++e) {
      NoGradGuard guard;
      auto ep = sample_episode(ds, 5, 1, 15, rng, false);
      auto out = model.forward(ep, true);
      REQUIRE(out.logits.shape() == Shape{75, 5});
      REQUIRE(out.maps.a_q.shape() == Shape{75 * 5, 5, 5});
      total += episode_loss(out.logits, ep.query_labels).item();
    }
    total /= 3;
    CHECK(total >= std::log(5.0) - 0.5);
    CHECK(total <= std::log(5.0) + 0.5);
  }

  TEST_CASE("every ablation switch runs forward") {
    auto ds = generate_synthetic(3, 6, 84, 2);
    std::mt19937_64 rng(1);
    auto ep = sample_episode(ds, 3, 1, 2, rng, false);
    for (int variant = 0; variant < 4; ++variant) {
      RunConfig c = tiny_config();
      if (variant == 0) c.model.relational.scr_enabled = false;
      if (variant == 1) c.model.relational.cca_enabled = false;
      if (variant == 2) c.model.routing.mode = AttentionMode::vanilla;
      if (variant == 3) c.model.routing.mode = AttentionMode::none;
      FslModel<float> model(c.model, 3);
      NoGradGuard guard;
      auto out = model.forward(ep, false);
      CHECK(out.logits.shape() == Shape{6, 3});
      CHECK(out.maps.a_q.defined() == c.model.relational.cca_enabled);
    }
  }

  TEST_CASE("training writes checkpoints and a log, deterministically") {
    auto ds = generate_synthetic(4, 8, 84, 2);
    const auto config = tiny_config();
    auto dir_a = scratch_dir("train_a"), dir_b = scratch_dir("train_b");
    FslModel<float> a(config.model, config.train.seed), b(config.model, config.train.seed);
    auto ra = train(a, ds, config, {dir_a, {}});
    auto rb = train(b, ds, config, {dir_b, {}});
    REQUIRE(ra.log.size() == 8);
    CHECK(ra.log.front().episode == 1);
    CHECK(fs::exists(dir_a / "episode_4.relfsl"));
    CHECK(fs::exists(dir_a / "episode_8.relfsl"));
    CHECK(fs::exists(dir_a / "final.relfsl"));
    CHECK(file_bytes(dir_a / "final.relfsl") == file_bytes(dir_b / "final.relfsl"));
    CHECK(file_bytes(dir_a / "train_log.csv") == file_bytes(dir_b / "train_log.csv"));
    std::ifstream log(dir_a / "train_log.csv");
    std::string header;
    std::getline(log, header);
    CHECK(header == "episode,loss,acc");
  }

  TEST_CASE("checkpoint round trip and errors") {
    const auto config = tiny_config();
    FslModel<float> model(config.model, 11);
    auto dir = scratch_dir("ckpt");
    save_checkpoint(dir / "m.relfsl", model, config);
    auto loaded = load_checkpoint(dir / "m.relfsl");
    CHECK(serialize_config(loaded.config) == serialize_config(config));
    auto want = model.state(), got = loaded.model.state();
    REQUIRE(want.size() == got.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(want[i].first == got[i].first);
      CHECK(std::equal(want[i].second.data().begin(), want[i].second.data().end(), got[i].second.data().begin()));
    }
    CHECK(read_checkpoint(dir / "m.relfsl").version == 1);

    const auto bytes = file_bytes(dir / "m.relfsl");
    CHECK(bytes.substr(0, 8) == "RELFSL01");
    {
      std::ofstream out(dir / "short.relfsl", std::ios::binary);
      out << bytes.substr(0, bytes.size() / 2);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "short.relfsl"), IoError);
    {
      std::ofstream out(dir / "magic.relfsl", std::ios::binary);
      out << "NOTRELFS" << bytes.substr(8);
    }
    try {
      load_checkpoint(dir / "magic.relfsl");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("not a RELFSL checkpoint") != std::string::npos);
    }
    {
      std::string v2 = bytes;
      v2[8] = 2;
      std::ofstream out(dir / "version.relfsl", std::ios::binary);
      out << v2;
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "version.relfsl"), IoError);

    RunConfig wider = config;
    wider.model.encoder.channels = 8;
    FslModel<float> other(wider.model, 1);
    try {
      assign_state(other, read_checkpoint(dir / "m.relfsl"));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("encoder.block0.conv.weight") != std::string::npos);
    }
  }

  TEST_CASE("reset_head keeps encoder and relational weights") {
    const auto config = tiny_config();
    FslModel<float> model(config.model, 2);
    auto before = model.state();
    std::vector<std::vector<float>> copies;
    for (auto& [name, t] : before) copies.emplace_back(t.data().begin(), t.data().end());
    model.reset_head(99);
    auto after = model.state();
    bool projections_changed = false;
    for (std::size_t i = 0; i < after.size(); ++i) {
      const bool same = std::equal(copies[i].begin(), copies[i].end(), after[i].second.data().begin());
      if (after[i].first.rfind("route.", 0) == 0) {
        projections_changed = projections_changed || !same;
      } else {
        CHECK(same);
      }
    }
    CHECK(projections_changed);
  }

  TEST_CASE("evaluation report") {
    const auto config = tiny_config();
    FslModel<float> model(config.model, 2);
    auto ds = generate_synthetic(3, 20, 84, 4);
    auto r1 = evaluate(model, ds, 6, config, 17, 1);
    auto r2 = evaluate(model, ds, 6, config, 17, 2);
    CHECK(r1.accuracy == r2.accuracy);
    CHECK(r1.confusion == r2.confusion);
    CHECK(r1.episode_count == 6);
    std::uint64_t total = 0, trace = 0;
    for (std::size_t i = 0; i < r1.confusion.size(); ++i)
      for (std::size_t j = 0; j < r1.confusion.size(); ++j) {
        total += r1.confusion[i][j];
        if (i == j) trace += r1.confusion[i][j];
      }
    CHECK(total == 6u * 2u * 3u);
    for (const auto& row : r1.confusion) {
      std::uint64_t s = 0;
      for (auto v : row) s += v;
      CHECK(s == 6u * 3u);
    }
    CHECK(compute_metrics(r1.confusion).accuracy == static_cast<double>(trace) / static_cast<double>(total));
    const auto text = format_report(r1);
    const auto a = text.find("accuracy"), p = text.find("precision"), r = text.find("recall"), f = text.find("f1");
    CHECK(a < p);
    CHECK(p < r);
    CHECK(r < f);
    CHECK(f != std::string::npos);
    CHECK_THROWS_AS(evaluate(model, ds, 0, config, 1, 1), ContractError);
  }
}
