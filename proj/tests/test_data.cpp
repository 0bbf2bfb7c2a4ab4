// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "relfsl/data.hpp"

using namespace relfsl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("relfsl_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor<float> constant_image(std::size_t h, std::size_t w, float value) {
  return Tensor<float>::full({3, h, w}, value);
}

}  // namespace

TEST_SUITE("episodic-data") {
  TEST_CASE("pnm round trip and header errors") {
    auto dir = scratch_dir("pnm");
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> byte(0, 255);
    std::vector<float> px(3 * 5 * 7);
    for (auto& v : px) v = static_cast<float>(byte(rng)) / 255.0f;
    auto img = Tensor<float>::from_data({3, 5, 7}, px);
    write_ppm(dir / "a.ppm", img);
    auto back = read_pnm(dir / "a.ppm");
    REQUIRE(back.shape() == img.shape());
    for (std::size_t i = 0; i < px.size(); ++i) CHECK(back.data()[i] == px[i]);

    std::vector<std::uint8_t> gray{0, 128, 255, 7, 8, 9};
    write_pgm(dir / "g.pgm", 3, 2, gray);
    auto g = read_pnm(dir / "g.pgm");
    REQUIRE(g.shape() == Shape{3, 2, 3});
    CHECK(g.data()[1] == doctest::Approx(128.0 / 255.0));
    CHECK(g.data()[6 + 1] == g.data()[1]);

    {
      std::ofstream bad(dir / "bad.ppm");
      bad << "P9\n3 3\n255\n";
    }
    try {
      read_pnm(dir / "bad.ppm");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("bad.ppm") != std::string::npos);
    }
  }

  TEST_CASE("load_dataset counts classes and items") {
    auto dir = scratch_dir("load");
    auto ds = generate_synthetic(8, 10, 84, 5);
    write_dataset(ds, dir);
    auto loaded = load_dataset(dir);
    CHECK(loaded.num_classes() == 8);
    CHECK(loaded.num_items() == 80);
    CHECK(std::is_sorted(loaded.classes.begin(), loaded.classes.end()));
    auto a = ds.image(3, 4), b = loaded.image(3, 4);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 0.5f / 255.0f + 1e-6f);
  }

  TEST_CASE("load_dataset errors") {
    auto empty = scratch_dir("empty");
    try {
      load_dataset(empty);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("no class directories") != std::string::npos);
    }
    auto dir = scratch_dir("noimages");
    fs::create_directories(dir / "cls");
    CHECK_THROWS_AS(load_dataset(dir), IoError);
  }

  TEST_CASE("synthetic generator shape and determinism") {
    auto a = generate_synthetic(5, 20, 84, 7);
    CHECK(a.num_classes() == 5);
    CHECK(a.num_items() == 100);
    CHECK(a.image(0, 0).shape() == Shape{3, 84, 84});
    auto b = generate_synthetic(5, 20, 84, 7);
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < 20; i += 7) {
        auto x = a.image(c, i), y = b.image(c, i);
        CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
      }
    auto other = generate_synthetic(5, 20, 84, 8);
    auto x = a.image(0, 0), y = other.image(0, 0);
    CHECK_FALSE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  }

  TEST_CASE("nearest-centroid on raw pixels beats chance on a 5-way episode") {
    auto ds = generate_synthetic(5, 20, 84, 7);
    std::mt19937_64 rng(3);
    std::size_t correct = 0, total = 0;
    for (int e = 0; e < 4; ++e) {
      auto ep = sample_episode(ds, 5, 1, 15, rng, false);
      const std::size_t n = 3 * 84 * 84;
      for (std::size_t q = 0; q < ep.query_labels.size(); ++q) {
        double best = INFINITY;
        std::int64_t arg = -1;
        for (std::size_t s = 0; s < 5; ++s) {
          double d = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const double diff = ep.query_images.data()[q * n + i] - ep.support_images.data()[s * n + i];
            d += diff * diff;
          }
          if (d < best) best = d, arg = ep.support_labels[s];
        }
        correct += arg == ep.query_labels[q];
        ++total;
      }
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.2);
  }

  TEST_CASE("split_classes is disjoint, complete and deterministic") {
    auto ds = generate_synthetic(8, 4, 84, 1);
    auto split = split_classes(ds, 0.75, 9, 5, 2);
    CHECK(split.train.num_classes() == 6);
    CHECK(split.test.num_classes() == 2);
    std::set<std::string> tr(split.train.classes.begin(), split.train.classes.end());
    std::set<std::string> all(ds.classes.begin(), ds.classes.end());
    for (const auto& c : split.test.classes) {
      CHECK(tr.count(c) == 0);
      tr.insert(c);
    }
    CHECK(tr == all);
    auto again = split_classes(ds, 0.75, 9, 5, 2);
    CHECK(again.train.classes == split.train.classes);
    CHECK(again.test.classes == split.test.classes);
    CHECK_THROWS_AS(split_classes(ds, 1.0, 9, 5, 2), ContractError);
  }

  TEST_CASE("episode composition") {
    auto ds = generate_synthetic(6, 20, 84, 2);
    std::mt19937_64 rng(4);
    SUBCASE("5-way 1-shot 15 queries") {
      auto ep = sample_episode(ds, 5, 1, 15, rng, true);
      CHECK(ep.support_images.shape() == Shape{5, 3, 84, 84});
      CHECK(ep.query_images.shape() == Shape{75, 3, 84, 84});
      for (std::int64_t c = 0; c < 5; ++c) {
        CHECK(std::count(ep.support_labels.begin(), ep.support_labels.end(), c) == 1);
        CHECK(std::count(ep.query_labels.begin(), ep.query_labels.end(), c) == 15);
      }
      std::set<std::size_t> classes(ep.class_map.begin(), ep.class_map.end());
      CHECK(classes.size() == 5);
    }
    SUBCASE("2-way") {
      auto ep = sample_episode(ds, 2, 1, 15, rng, false);
      CHECK(ep.support_images.dim(0) == 2);
      CHECK(ep.query_images.dim(0) == 30);
    }
    SUBCASE("support and query items are disjoint") {
      // Identical pixels in support and query would reveal a reused item.
      auto ep = sample_episode(ds, 2, 4, 15, rng, false);
      const std::size_t n = 3 * 84 * 84;
      for (std::size_t s = 0; s < ep.support_labels.size(); ++s)
        for (std::size_t q = 0; q < ep.query_labels.size(); ++q) {
          const float* a = ep.support_images.data().data() + s * n;
          const float* b = ep.query_images.data().data() + q * n;
          CHECK_FALSE(std::equal(a, a + n, b));
        }
    }
    SUBCASE("insufficient items") {
      CHECK_THROWS_AS(sample_episode(ds, 2, 10, 15, rng, false), ContractError);
      CHECK_THROWS_AS(sample_episode(ds, 7, 1, 1, rng, false), ContractError);
    }
  }

  TEST_CASE("preprocess normalization, determinism and range") {
    std::mt19937_64 rng(5);
    auto img = constant_image(100, 120, static_cast<float>(125.3 / 255.0));
    auto out = preprocess(img, false, rng);
    REQUIRE(out.shape() == Shape{3, 84, 84});
    for (std::size_t i = 0; i < 84 * 84; ++i) CHECK(std::abs(out.data()[i]) <= 1e-6f);

    auto ds = generate_synthetic(2, 2, 84, 1);
    auto a = preprocess(ds.image(0, 0), false, rng);
    auto b = preprocess(ds.image(0, 0), false, rng);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    for (int t = 0; t < 5; ++t) {
      auto x = preprocess(ds.image(1, 1), true, rng);
      CHECK(x.shape() == Shape{3, 84, 84});
      for (std::size_t c = 0; c < 3; ++c) {
        const double lo = (0.0 - kChannelMean[c]) / kChannelStd[c], hi = (1.0 - kChannelMean[c]) / kChannelStd[c];
        for (std::size_t i = 0; i < 84 * 84; ++i) {
          const double v = x.data()[c * 84 * 84 + i];
          CHECK(v >= lo - 1e-5);
          CHECK(v <= hi + 1e-5);
        }
      }
    }
  }

  TEST_CASE("bilinear resize keeps constants and uses half-pixel centres") {
    auto c = resize_bilinear(constant_image(10, 13, 0.25f), 92, 119);
    for (auto v : c.data()) CHECK(v == doctest::Approx(0.25f));
    // 1x2 -> 1x4: centres at -0.25, 0.25, 0.75, 1.25 in source pixels, clamped.
    auto img = Tensor<float>::from_data({3, 1, 2}, {0, 1, 0, 1, 0, 1});
    auto up = resize_bilinear(img, 1, 4);
    CHECK(up.data()[0] == doctest::Approx(0.0));
    CHECK(up.data()[1] == doctest::Approx(0.25));
    CHECK(up.data()[2] == doctest::Approx(0.75));
    CHECK(up.data()[3] == doctest::Approx(1.0));
  }
}
