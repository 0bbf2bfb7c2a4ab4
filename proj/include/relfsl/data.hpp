// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relfsl/tensor.hpp"

namespace relfsl {

/// Side of the square network input.
inline constexpr std::size_t kInputSize = 84;
/// Images are resized so that their shorter side has this length before cropping.
inline constexpr std::size_t kResizeSize = 92;
inline constexpr std::array<double, 3> kChannelMean{125.3 / 255.0, 123.0 / 255.0, 113.9 / 255.0};
inline constexpr std::array<double, 3> kChannelStd{63.0 / 255.0, 62.1 / 255.0, 66.7 / 255.0};

// ---------------------------------------------------------------- images
// Images are Tensor<float> [3,h,w] with values in [0,1].

/// Reads a portable anymap (P2/P3/P5/P6). Graymaps are replicated to three channels.
Tensor<float> read_pnm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
/// Binary graymap (P5), row-major, 8-bit.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);

/// Bilinear resize with the half-pixel (align-corners = false) convention.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w);

/// Resize shorter side to 92, crop 84x84 (random in training, centred
/// otherwise), flip horizontally with probability 0.5 in training, then
/// normalize every channel with kChannelMean / kChannelStd.
Tensor<float> preprocess(const Tensor<float>& image, bool train_mode, std::mt19937_64& rng);

// ---------------------------------------------------------------- datasets

struct ImageRef {
  std::filesystem::path path;                   // on-disk image, decoded on access
  std::shared_ptr<const Tensor<float>> pixels;  // in-memory image (synthetic)
};

struct Dataset {
  std::vector<std::string> classes;
  std::vector<std::vector<ImageRef>> items;  // per class
  std::string source;                        // "disk:<root>" or "synthetic:..."

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_items() const;
  Tensor<float> image(std::size_t cls, std::size_t item) const;
};

/// `<root>/<class>/<image>.{ppm,pgm,pnm}`; classes are the sorted directory names.
Dataset load_dataset(const std::filesystem::path& root);

/// Deterministic parametric families: class c is a disc of stripes at angle
/// c * 180 / num_classes degrees. Items jitter position, radius, colour and
/// background noise.
Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                           std::uint64_t seed);

/// Materializes a dataset in the on-disk corpus layout (binary PPM).
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);

struct ClassSplit {
  Dataset train;
  Dataset test;
};

/// Disjoint class split. round(fraction * classes) classes go to train; each
/// side must keep at least min_train / min_test classes.
ClassSplit split_classes(const Dataset& dataset, double train_fraction, std::uint64_t seed, std::size_t min_train,
                         std::size_t min_test);

// ---------------------------------------------------------------- episodes

struct Episode {
  Tensor<float> support_images;  // [N*K,3,84,84], label-major
  std::vector<std::int64_t> support_labels;
  Tensor<float> query_images;  // [N*Q,3,84,84], label-major
  std::vector<std::int64_t> query_labels;
  std::vector<std::size_t> class_map;  // episode label -> dataset class

  std::size_t n_way() const { return class_map.size(); }
};

/// n_way distinct dataset classes in random order.
std::vector<std::size_t> sample_classes(const Dataset& dataset, std::size_t n_way, std::mt19937_64& rng);

/// Episode over the given classes; episode label i refers to classes[i].
Episode sample_episode_for_classes(const Dataset& dataset, std::span<const std::size_t> classes,
                                   std::size_t k_shot, std::size_t n_query, std::mt19937_64& rng, bool train_mode);

Episode sample_episode(const Dataset& dataset, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                       std::mt19937_64& rng, bool train_mode);

}  // namespace relfsl
