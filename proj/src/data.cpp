// SPDX-License-Identifier: Apache-2.0

#include "relfsl/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "relfsl/error.hpp"

namespace relfsl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- pnm

namespace {

struct PnmHeader {
  char kind = 0;  // '2', '3', '5' or '6'
  std::size_t width = 0, height = 0, maxval = 0;
};

// Reads one whitespace-delimited header token, skipping '#' comments.
bool next_token(std::istream& in, std::string& token) {
  token.clear();
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (c == EOF) return false;
  token.push_back(static_cast<char>(c));
  while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') token.push_back(static_cast<char>(in.get()));
  return true;
}

std::size_t parse_positive(const std::string& token, const fs::path& path, const char* what) {
  std::size_t value = 0;
  if (token.empty() || !std::all_of(token.begin(), token.end(), [](char ch) { return std::isdigit(ch); }) ||
      token.size() > 9 || (value = std::stoul(token)) == 0) {
    throw IoError(path.string() + ": invalid " + what + " '" + token + "' in pixmap header");
  }
  return value;
}

PnmHeader read_header(std::istream& in, const fs::path& path) {
  PnmHeader h;
  std::string token;
  if (!next_token(in, token) || token.size() != 2 || token[0] != 'P' ||
      (token[1] != '2' && token[1] != '3' && token[1] != '5' && token[1] != '6')) {
    throw IoError(path.string() + ": not a supported portable pixmap (expected P2/P3/P5/P6 magic)");
  }
  h.kind = token[1];
  if (!next_token(in, token)) throw IoError(path.string() + ": truncated pixmap header");
  h.width = parse_positive(token, path, "width");
  if (!next_token(in, token)) throw IoError(path.string() + ": truncated pixmap header");
  h.height = parse_positive(token, path, "height");
  if (!next_token(in, token)) throw IoError(path.string() + ": truncated pixmap header");
  h.maxval = parse_positive(token, path, "maxval");
  if (h.maxval > 65535) throw IoError(path.string() + ": maxval above 65535");
  // Exactly one whitespace byte separates the header from binary data.
  in.get();
  return h;
}

PnmHeader probe_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return read_header(in, path);
}

}  // namespace

Tensor<float> read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const auto h = read_header(in, path);
  const bool color = h.kind == '3' || h.kind == '6';
  const bool binary = h.kind == '5' || h.kind == '6';
  const std::size_t channels = color ? 3 : 1;
  const std::size_t samples = h.width * h.height * channels;
  std::vector<double> raw(samples);
  if (binary) {
    const std::size_t bytes_per = h.maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(samples * bytes_per);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw IoError(path.string() + ": truncated pixel data");
    for (std::size_t i = 0; i < samples; ++i) {
      raw[i] = bytes_per == 2 ? static_cast<double>((buf[2 * i] << 8) | buf[2 * i + 1]) : buf[i];
    }
  } else {
    std::string token;
    for (std::size_t i = 0; i < samples; ++i) {
      if (!next_token(in, token)) throw IoError(path.string() + ": truncated pixel data");
      raw[i] = static_cast<double>(std::stoul(token));
    }
  }
  std::vector<float> out(3 * h.width * h.height);
  const std::size_t plane = h.width * h.height;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = raw[p * channels + (color ? c : 0)];
      if (v > static_cast<double>(h.maxval)) throw IoError(path.string() + ": sample exceeds maxval");
      out[c * plane + p] = static_cast<float>(v / static_cast<double>(h.maxval));
    }
  }
  return Tensor<float>::from_data({3, h.height, h.width}, std::move(out));
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3,h,w], got " + shape_string(image.shape()));
  const std::size_t height = image.dim(1), width = image.dim(2), plane = height * width;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> buf(3 * plane);
  auto v = image.data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double x = std::clamp(static_cast<double>(v[c * plane + p]), 0.0, 1.0);
      buf[3 * p + c] = static_cast<unsigned char>(std::lround(x * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) throw ShapeError("write_pgm: pixel count does not match size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------- preprocessing

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear: expected [C,h,w], got " + shape_string(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H == out_h && W == out_w) return image.detach();
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(src, 0.0, static_cast<double>(in - 1));
  };
  std::vector<float> out(C * out_h * out_w);
  auto v = image.data();
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, H, out_h);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, W, out_w);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = v.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - fx) + p[y0 * W + x1] * fx;
        const double bottom = p[y1 * W + x0] * (1 - fx) + p[y1 * W + x1] * fx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return Tensor<float>::from_data({C, out_h, out_w}, std::move(out));
}

Tensor<float> preprocess(const Tensor<float>& image, bool train_mode, std::mt19937_64& rng) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("preprocess: expected [3,h,w], got " + shape_string(image.shape()));
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::size_t rh = kResizeSize, rw = kResizeSize;
  if (H < W) {
    rw = static_cast<std::size_t>(std::lround(static_cast<double>(W) * kResizeSize / static_cast<double>(H)));
  } else if (W < H) {
    rh = static_cast<std::size_t>(std::lround(static_cast<double>(H) * kResizeSize / static_cast<double>(W)));
  }
  const auto resized = resize_bilinear(image, rh, rw);
  if (rh < kInputSize || rw < kInputSize) throw ShapeError("preprocess: image smaller than 84 after resize");

  std::size_t top = (rh - kInputSize) / 2, left = (rw - kInputSize) / 2;
  bool flip = false;
  if (train_mode) {
    top = std::uniform_int_distribution<std::size_t>(0, rh - kInputSize)(rng);
    left = std::uniform_int_distribution<std::size_t>(0, rw - kInputSize)(rng);
    flip = std::bernoulli_distribution(0.5)(rng);
  }
  std::vector<float> out(3 * kInputSize * kInputSize);
  auto v = resized.data();
  for (std::size_t c = 0; c < 3; ++c) {
    const double m = kChannelMean[c], s = kChannelStd[c];
    for (std::size_t y = 0; y < kInputSize; ++y) {
      for (std::size_t x = 0; x < kInputSize; ++x) {
        const std::size_t sx = left + (flip ? kInputSize - 1 - x : x);
        const double pixel = v[(c * rh + top + y) * rw + sx];
        out[(c * kInputSize + y) * kInputSize + x] = static_cast<float>((pixel - m) / s);
      }
    }
  }
  return Tensor<float>::from_data({3, kInputSize, kInputSize}, std::move(out));
}

// ---------------------------------------------------------------- datasets

std::size_t Dataset::num_items() const {
  std::size_t n = 0;
  for (const auto& c : items) n += c.size();
  return n;
}

Tensor<float> Dataset::image(std::size_t cls, std::size_t item) const {
  const auto& ref = items.at(cls).at(item);
  if (ref.pixels) return *ref.pixels;
  return read_pnm(ref.path);
}

Dataset load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  if (dirs.empty()) throw IoError("no class directories under " + root.string());
  std::sort(dirs.begin(), dirs.end());

  Dataset ds;
  ds.source = "disk:" + root.string();
  for (const auto& dir : dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") files.push_back(entry.path());
    }
    if (files.empty()) throw IoError("class directory " + dir.string() + " contains no images");
    std::sort(files.begin(), files.end());
    std::vector<ImageRef> refs;
    for (const auto& f : files) {
      probe_header(f);
      refs.push_back(ImageRef{f, nullptr});
    }
    ds.classes.push_back(dir.filename().string());
    ds.items.push_back(std::move(refs));
  }
  return ds;
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  // splitmix64 over the combined key
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL ^ (b + 0xBF58476D1CE4E5B9ULL) * 0x94D049BB133111EBULL ^ (c << 17) ^ c;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Class c is a field of stripes at angle c * 180 / num_classes degrees,
// phase-locked to the shape centre and clipped to a disc.
double stripe_mask(double angle, double u, double v, double r) {
  if (std::hypot(u, v) >= r) return 0.0;
  const double period = r * 0.45;
  const double t = u * std::cos(angle) + v * std::sin(angle);
  return std::fmod(t + 8 * period + period / 4, period) < period / 2 ? 1.0 : 0.0;
}

Tensor<float> render_item(std::size_t cls, std::size_t num_classes, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double angle = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes);
  // colour is drawn per item, so only the pattern identifies the class
  auto fg = hsv_to_rgb(unit(rng), 0.6 + 0.3 * unit(rng), 0.8 + 0.15 * unit(rng));
  const double background = 0.15 + 0.1 * unit(rng);
  const double s = static_cast<double>(size);
  const double cx = s / 2 + (unit(rng) - 0.5) * s / 4;
  const double cy = s / 2 + (unit(rng) - 0.5) * s / 4;
  const double radius = s * 0.28 * (0.8 + 0.4 * unit(rng));

  std::vector<float> out(3 * size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double m = stripe_mask(angle, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, radius);
      for (std::size_t c = 0; c < 3; ++c) {
        const double value = m * fg[c] + (1 - m) * background + noise(rng);
        out[(c * size + y) * size + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return Tensor<float>::from_data({3, size, size}, std::move(out));
}

}  // namespace

Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                           std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("generate_synthetic: num_classes must be >= 2");
  if (per_class < 2) throw ContractError("generate_synthetic: per_class must be >= 2");
  if (image_size < 8) throw ContractError("generate_synthetic: image_size must be >= 8");
  Dataset ds;
  ds.source = "synthetic:classes=" + std::to_string(num_classes) + ",per_class=" + std::to_string(per_class) +
              ",size=" + std::to_string(image_size) + ",seed=" + std::to_string(seed);
  for (std::size_t c = 0; c < num_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%02zu", c);
    ds.classes.emplace_back(name);
    std::vector<ImageRef> refs;
    for (std::size_t i = 0; i < per_class; ++i) {
      std::mt19937_64 rng(mix_seed(seed, c, i));
      refs.push_back(ImageRef{{}, std::make_shared<const Tensor<float>>(render_item(c, num_classes, image_size, rng))});
    }
    ds.items.push_back(std::move(refs));
  }
  return ds;
}

void write_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  for (std::size_t c = 0; c < dataset.num_classes(); ++c) {
    const auto dir = root / dataset.classes[c];
    fs::create_directories(dir);
    for (std::size_t i = 0; i < dataset.items[c].size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%04zu.ppm", i);
      write_ppm(dir / name, dataset.image(c, i));
    }
  }
  std::ofstream descriptor(root / "DATASET.txt");
  descriptor << dataset.source << "\n";
}

namespace {

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& classes) {
  Dataset out;
  out.source = ds.source;
  for (auto c : classes) {
    out.classes.push_back(ds.classes[c]);
    out.items.push_back(ds.items[c]);
  }
  return out;
}

}  // namespace

ClassSplit split_classes(const Dataset& dataset, double train_fraction, std::uint64_t seed, std::size_t min_train,
                         std::size_t min_test) {
  const std::size_t total = dataset.num_classes();
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw ContractError("split_classes: train fraction must lie in [0,1]");
  }
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(total)));
  const std::size_t n_test = total - n_train;
  if (n_train < min_train || n_test < min_test) {
    throw ContractError("split_classes: fraction " + std::to_string(train_fraction) + " over " +
                        std::to_string(total) + " classes gives " + std::to_string(n_train) + " train / " +
                        std::to_string(n_test) + " test classes; need at least " + std::to_string(min_train) +
                        " train and " + std::to_string(min_test) + " test");
  }
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {subset(dataset, train), subset(dataset, test)};
}

std::vector<std::size_t> sample_classes(const Dataset& dataset, std::size_t n_way, std::mt19937_64& rng) {
  if (n_way == 0 || dataset.num_classes() < n_way) {
    throw ContractError("sample_episode: need " + std::to_string(n_way) + " classes, dataset has " +
                        std::to_string(dataset.num_classes()));
  }
  std::vector<std::size_t> order(dataset.num_classes());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n_way);
  return order;
}

Episode sample_episode_for_classes(const Dataset& dataset, std::span<const std::size_t> classes,
                                   std::size_t k_shot, std::size_t n_query, std::mt19937_64& rng, bool train_mode) {
  if (k_shot == 0 || n_query == 0) throw ContractError("sample_episode: k_shot and n_query must be positive");
  for (auto c : classes) {
    if (c >= dataset.num_classes()) throw ContractError("sample_episode: class index out of range");
    if (dataset.items[c].size() < k_shot + n_query) {
      throw ContractError("sample_episode: class '" + dataset.classes[c] + "' has " +
                          std::to_string(dataset.items[c].size()) + " items, need " + std::to_string(k_shot + n_query));
    }
  }
  const std::size_t n_way = classes.size();
  const std::size_t plane = 3 * kInputSize * kInputSize;
  std::vector<float> support(n_way * k_shot * plane), query(n_way * n_query * plane);
  Episode ep;
  ep.class_map.assign(classes.begin(), classes.end());
  for (std::size_t label = 0; label < n_way; ++label) {
    const std::size_t cls = classes[label];
    std::vector<std::size_t> order(dataset.items[cls].size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < k_shot + n_query; ++i) {
      auto img = preprocess(dataset.image(cls, order[i]), train_mode, rng);
      const bool is_support = i < k_shot;
      const std::size_t slot = is_support ? label * k_shot + i : label * n_query + (i - k_shot);
      auto& dst = is_support ? support : query;
      std::copy(img.data().begin(), img.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(slot * plane));
    }
    for (std::size_t i = 0; i < k_shot; ++i) ep.support_labels.push_back(static_cast<std::int64_t>(label));
    for (std::size_t i = 0; i < n_query; ++i) ep.query_labels.push_back(static_cast<std::int64_t>(label));
  }
  ep.support_images = Tensor<float>::from_data({n_way * k_shot, 3, kInputSize, kInputSize}, std::move(support));
  ep.query_images = Tensor<float>::from_data({n_way * n_query, 3, kInputSize, kInputSize}, std::move(query));
  return ep;
}

Episode sample_episode(const Dataset& dataset, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                       std::mt19937_64& rng, bool train_mode) {
  const auto classes = sample_classes(dataset, n_way, rng);
  return sample_episode_for_classes(dataset, classes, k_shot, n_query, rng, train_mode);
}

}  // namespace relfsl
