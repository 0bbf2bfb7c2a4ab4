// SPDX-License-Identifier: Apache-2.0

#include "relfsl/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "relfsl/error.hpp"

namespace relfsl {

std::size_t TrainConfig::episodes_per_step() const {
  const std::size_t per = images_per_episode();
  const std::size_t rounded = per == 0 ? 1 : (batch_size + per / 2) / per;
  return std::max<std::size_t>(2, rounded);
}

std::string to_string(InterpolationMode mode) {
  switch (mode) {
    case InterpolationMode::task_interpolation: return "task_interpolation";
    case InterpolationMode::mixup: return "mixup";
    case InterpolationMode::off: return "off";
  }
  return "off";
}

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::routed: return "routed";
    case AttentionMode::vanilla: return "vanilla";
    case AttentionMode::none: return "none";
  }
  return "none";
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

struct ParseFailure {
  std::string message;
};

double parse_double(const std::string& s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) throw ParseFailure{"expected a number"};
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseFailure{"expected a non-negative integer"};
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ParseFailure{"expected true or false"};
}

// One entry per key: reader and writer over a RunConfig.
struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> read;
  std::function<std::string(const RunConfig&)> write;
};

template <typename Get>
Field size_field(const char* key, Get get) {
  return {key, [get](RunConfig& c, const std::string& v) { get(c) = static_cast<std::size_t>(parse_uint(v)); },
          [get](const RunConfig& c) { return std::to_string(get(c)); }};
}

template <typename Get>
Field double_field(const char* key, Get get) {
  return {key, [get](RunConfig& c, const std::string& v) { get(c) = parse_double(v); },
          [get](const RunConfig& c) { return format_double(get(c)); }};
}

template <typename Get>
Field bool_field(const char* key, Get get) {
  return {key, [get](RunConfig& c, const std::string& v) { get(c) = parse_bool(v); },
          [get](const RunConfig& c) { return std::string(get(c) ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      size_field("encoder.channels", [](auto& c) -> auto& { return c.model.encoder.channels; }),
      size_field("encoder.shared_layers", [](auto& c) -> auto& { return c.model.encoder.shared_layers; }),
      {"interp.mode",
       [](RunConfig& c, const std::string& v) {
         if (v == "task_interpolation") c.model.interpolation.mode = InterpolationMode::task_interpolation;
         else if (v == "mixup") c.model.interpolation.mode = InterpolationMode::mixup;
         else if (v == "off") c.model.interpolation.mode = InterpolationMode::off;
         else throw ParseFailure{"expected task_interpolation, mixup or off"};
       },
       [](const RunConfig& c) { return to_string(c.model.interpolation.mode); }},
      double_field("interp.alpha", [](auto& c) -> auto& { return c.model.interpolation.alpha; }),
      double_field("interp.beta", [](auto& c) -> auto& { return c.model.interpolation.beta; }),
      bool_field("scr.enabled", [](auto& c) -> auto& { return c.model.relational.scr_enabled; }),
      size_field("scr.window", [](auto& c) -> auto& { return c.model.relational.scr_window; }),
      bool_field("cca.enabled", [](auto& c) -> auto& { return c.model.relational.cca_enabled; }),
      size_field("cca.match_channels", [](auto& c) -> auto& { return c.model.relational.match_channels; }),
      double_field("cca.temperature", [](auto& c) -> auto& { return c.model.relational.attention_temperature; }),
      {"attention.mode",
       [](RunConfig& c, const std::string& v) {
         if (v == "routed") c.model.routing.mode = AttentionMode::routed;
         else if (v == "vanilla") c.model.routing.mode = AttentionMode::vanilla;
         else if (v == "none") c.model.routing.mode = AttentionMode::none;
         else throw ParseFailure{"expected routed, vanilla or none"};
       },
       [](const RunConfig& c) { return to_string(c.model.routing.mode); }},
      size_field("attention.grid", [](auto& c) -> auto& { return c.model.routing.grid; }),
      size_field("attention.top_k", [](auto& c) -> auto& { return c.model.routing.top_k; }),
      double_field("head.temperature", [](auto& c) -> auto& { return c.model.head.temperature; }),
      double_field("train.learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }),
      double_field("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }),
      size_field("train.total_episodes", [](auto& c) -> auto& { return c.train.total_episodes; }),
      size_field("train.save_every", [](auto& c) -> auto& { return c.train.save_every; }),
      size_field("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
      size_field("train.n_way_train", [](auto& c) -> auto& { return c.train.n_way_train; }),
      size_field("train.n_way_test", [](auto& c) -> auto& { return c.train.n_way_test; }),
      size_field("train.k_shot", [](auto& c) -> auto& { return c.train.k_shot; }),
      size_field("train.n_query", [](auto& c) -> auto& { return c.train.n_query; }),
      {"train.seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_uint(v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      double_field("data.train_fraction", [](auto& c) -> auto& { return c.data.train_fraction; }),
      {"data.source",
       [](RunConfig& c, const std::string& v) {
         if (v.find('\n') != std::string::npos) throw ParseFailure{"newline in value"};
         c.data.source = v;
       },
       [](const RunConfig& c) { return c.data.source; }},
      size_field("eval.episodes", [](auto& c) -> auto& { return c.eval.episodes; }),
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  const auto& m = c.model;
  if (m.encoder.channels == 0) fail("encoder.channels must be positive");
  if (m.encoder.shared_layers != 4) fail("encoder.shared_layers must equal the 4 encoder layers");
  if (!(m.interpolation.alpha > 0) || !(m.interpolation.beta > 0)) fail("interp.alpha and interp.beta must be > 0");
  if (m.relational.scr_window % 2 == 0 || m.relational.scr_window < 3 || m.relational.scr_window > 9) {
    fail("scr.window must be odd and in [3,9] (the Conv4 map is 5x5)");
  }
  if (m.relational.match_channels < 2) fail("cca.match_channels must be >= 2");
  if (!(m.relational.attention_temperature > 0)) fail("cca.temperature must be > 0");
  if (m.routing.grid == 0 || 5 % m.routing.grid != 0) fail("attention.grid must divide the 5x5 feature map (1 or 5)");
  if (m.routing.top_k == 0 || m.routing.top_k > m.routing.grid * m.routing.grid) {
    fail("attention.top_k must lie in [1, grid^2]");
  }
  if (!(m.head.temperature > 0)) fail("head.temperature must be > 0");
  const auto& t = c.train;
  if (!(t.learning_rate >= 0)) fail("train.learning_rate must be >= 0");
  if (!(t.weight_decay >= 0)) fail("train.weight_decay must be >= 0");
  if (t.total_episodes == 0 || t.save_every == 0 || t.batch_size == 0) {
    fail("train.total_episodes, train.save_every and train.batch_size must be positive");
  }
  if (t.n_way_train < 2 || t.n_way_test < 2) fail("train.n_way_train and train.n_way_test must be >= 2");
  if (t.k_shot == 0 || t.n_query == 0) fail("train.k_shot and train.n_query must be positive");
  if (!(c.data.train_fraction > 0 && c.data.train_fraction < 1)) fail("data.train_fraction must lie in (0,1)");
  if (c.eval.episodes == 0) fail("eval.episodes must be positive");
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key.emplace(f.key, &f);
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value'");
    }
    const auto key = trim(body.substr(0, eq));
    const auto value = trim(body.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("line " + std::to_string(number) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    try {
      it->second->read(config, value);
    } catch (const ParseFailure& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + key + ": " + e.message + ", got '" + value + "'");
    }
  }
  validate(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key;
    out += " = ";
    out += f.write(config);
    out += "\n";
  }
  return out;
}

}  // namespace relfsl
