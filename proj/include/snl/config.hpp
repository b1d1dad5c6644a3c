#pragma once
// JSON experiment configuration. Every section is optional and falls back to
// the desk-scale defaults; unknown keys are rejected so typos surface early.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "snl/channel.hpp"
#include "snl/error.hpp"
#include "snl/model.hpp"
#include "snl/positioning.hpp"
#include "snl/scene.hpp"
#include "snl/sensing.hpp"

namespace snl {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + section);
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& section) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + " has the wrong type");
  }
}

inline ScenarioSpec scenario_from_json(const json& j) {
  check_keys(j, "scenario",
             {"kind", "width", "depth", "building_count", "street_width", "seed", "altitude", "snapshots_per_route",
              "grid_side", "grid_g"});
  const auto kind = scenario_kind_from_string(get_or<std::string>(j, "kind", "crossroad", "scenario"));
  ScenarioSpec s = kind == ScenarioKind::WideLane ? ScenarioSpec::wide_lane() : ScenarioSpec::crossroad();
  s.width = get_or(j, "width", s.width, "scenario");
  s.depth = get_or(j, "depth", s.depth, "scenario");
  s.building_count = get_or(j, "building_count", s.building_count, "scenario");
  s.street_width = get_or(j, "street_width", s.street_width, "scenario");
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed, "scenario");
  s.altitude = get_or(j, "altitude", s.altitude, "scenario");
  s.snapshots_per_route = get_or(j, "snapshots_per_route", s.snapshots_per_route, "scenario");
  s.grid.side = get_or(j, "grid_side", s.grid.side, "scenario");
  s.grid.g = get_or(j, "grid_g", s.grid.g, "scenario");
  return s;
}

inline json to_json(const ScenarioSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"width", s.width},
          {"depth", s.depth},
          {"building_count", s.building_count},
          {"street_width", s.street_width},
          {"seed", s.seed},
          {"altitude", s.altitude},
          {"snapshots_per_route", s.snapshots_per_route},
          {"grid_side", s.grid.side},
          {"grid_g", s.grid.g}};
}

// A missing footprint means "tile the receiver grid exactly".
inline CameraSpec camera_from_json(const json& j, const GridSpec& grid) {
  check_keys(j, "camera", {"resolution", "footprint_side"});
  CameraSpec c = CameraSpec::for_grid(grid, get_or(j, "resolution", 96, "camera"));
  c.footprint_side = get_or(j, "footprint_side", c.footprint_side, "camera");
  if (c.resolution < 32) throw ConfigError("camera.resolution must be >= 32");
  if (!(c.footprint_side > 0.0)) throw ConfigError("camera.footprint_side must be positive");
  return c;
}

inline ChannelConfig channel_from_json(const json& j) {
  check_keys(j, "channel", {"frequency_hz", "max_order", "reflection_loss"});
  ChannelConfig c;
  c.freq_hz = get_or(j, "frequency_hz", c.freq_hz, "channel");
  c.max_order = get_or(j, "max_order", c.max_order, "channel");
  c.reflection_loss = get_or(j, "reflection_loss", c.reflection_loss, "channel");
  if (!(c.freq_hz > 0.0)) throw ConfigError("channel.frequency_hz must be positive");
  if (c.max_order < 0 || c.max_order > 2) throw ConfigError("channel.max_order must be 0, 1 or 2");
  if (c.reflection_loss < 0.0 || c.reflection_loss > 1.0) throw ConfigError("channel.reflection_loss must be in [0, 1]");
  return c;
}

inline TrainConfig train_from_json(const json& j, TrainConfig c = {}) {
  check_keys(j, "train", {"batch_size", "epochs", "lr", "beta1", "beta2", "eps", "seed", "max_steps"});
  c.batch_size = get_or(j, "batch_size", c.batch_size, "train");
  c.epochs = get_or(j, "epochs", c.epochs, "train");
  c.adam.lr = get_or(j, "lr", c.adam.lr, "train");
  c.adam.beta1 = get_or(j, "beta1", c.adam.beta1, "train");
  c.adam.beta2 = get_or(j, "beta2", c.adam.beta2, "train");
  c.adam.eps = get_or(j, "eps", c.adam.eps, "train");
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "train");
  c.max_steps = get_or(j, "max_steps", c.max_steps, "train");
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"epochs", c.epochs},         {"lr", c.adam.lr}, {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},      {"eps", c.adam.eps},           {"seed", c.seed},  {"max_steps", c.max_steps}};
}

struct ModelSpec {
  ModelKind kind = ModelKind::Fusion;
  ModelConfig config;
};

inline ModelSpec model_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model must be an object");
  json rest = j;
  ModelSpec s;
  if (rest.contains("kind")) {
    s.kind = model_kind_from_string(get_or<std::string>(rest, "kind", "fusion", "model"));
    rest.erase("kind");
  }
  check_keys(rest, "model",
             {"image_side", "patch", "embed_dim", "depth", "heads", "branch_channels", "grid", "fusion_depth",
              "classifier_depth", "stem_channels", "ffn_ratio", "rgb_head_depth", "rgb_head_channels",
              "mlp_hidden_ratio", "paper_scale"});
  s.config = model_config_from_json(rest);
  return s;
}

inline json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(is, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline const json& section(const json& root, const char* key) {
  static const json empty = json::object();
  return root.contains(key) && !root.at(key).is_null() ? root.at(key) : empty;
}

// FNV-1a 64-bit over the canonical (sorted-key, compact) JSON dump.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash(const json& j) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(j.dump());
  return os.str();
}

}  // namespace snl
