// SPDX-License-Identifier: Apache-2.0

#include "relfsl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "relfsl/error.hpp"

namespace relfsl {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw IoError("truncated checkpoint " + path_ + ": expected " + std::to_string(n) + " more bytes for " + what +
                    " at offset " + std::to_string(pos_) + ", file has " + std::to_string(data_.size()));
    }
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::string& config_text,
                      const NamedTensors<float>& tensors) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint64_t>(config_text.size());
  w.bytes(config_text.data(), config_text.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(0);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.le<std::uint64_t>(d);
    for (float v : t.data()) w.f32(v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(raw), path.string());
  CheckpointData out;
  std::string magic;
  try {
    magic = r.bytes(sizeof(kCheckpointMagic), "magic");
  } catch (const IoError&) {
    throw IoError("not a RELFSL checkpoint: " + path.string());
  }
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw IoError("not a RELFSL checkpoint: " + path.string());
  }
  out.version = r.le<std::uint32_t>("version");
  if (out.version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(out.version) + " in " + path.string());
  }
  const auto config_len = r.le<std::uint64_t>("config length");
  out.config_text = r.bytes(config_len, "config text");
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    auto name = r.bytes(name_len, "tensor name");
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype != 0) throw IoError("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.le<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw IoError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.le<std::uint64_t>("dimension");
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw IoError("tensor '" + name + "' has invalid dimension");
      shape.push_back(static_cast<std::size_t>(d));
      numel *= d;
      if (numel > (std::uint64_t{1} << 34)) throw IoError("tensor '" + name + "' is implausibly large");
    }
    r.need(numel * 4, "tensor payload");
    std::vector<float> values(numel);
    for (auto& v : values) v = std::bit_cast<float>(r.le<std::uint32_t>("tensor payload"));
    out.tensors.emplace_back(std::move(name), Tensor<float>::from_data(std::move(shape), std::move(values)));
  }
  if (!r.at_end()) throw IoError("trailing bytes after the last tensor in " + path.string());
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const FslModel<float>& model, const RunConfig& config) {
  write_checkpoint(path, serialize_config(config), model.state());
}

void assign_state(FslModel<float>& model, const CheckpointData& data) {
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& [name, t] : data.tensors) {
    if (!stored.emplace(name, &t).second) throw IoError("duplicate tensor '" + name + "' in checkpoint");
  }
  auto expected = model.state();
  if (expected.size() != stored.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(stored.size()) + " tensors but the config expects " +
                     std::to_string(expected.size()));
  }
  for (auto& [name, t] : expected) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                       " but the config expects " + shape_string(t.shape()));
    }
  }
  for (auto& [name, t] : expected) {
    auto src = stored.at(name)->data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  auto data = read_checkpoint(path);
  auto config = parse_config(data.config_text);
  LoadedModel out{config, FslModel<float>(config.model, config.train.seed)};
  assign_state(out.model, data);
  return out;
}

}  // namespace relfsl
