#include "cidet/config.hpp"

#include <fstream>
#include <sstream>

#include "cidet/prompt.hpp"

using nlohmann::json;

namespace cidet {

json Config::defaults() {
  PromptConfig prompt_defaults;
  return json{
      {"world",
       {{"classes", 12},
        {"train_images", 200},
        {"eval_images", 50},
        {"min_objects", 1},
        {"max_objects", 5},
        {"min_size", 0.10},
        {"max_size", 0.40},
        {"canvas", 64},
        {"seed", 7}}},
      {"detector",
       {{"queries", 24},
        {"decoder_layers", 6},
        {"encoder_layers", 1},
        {"hidden", 64},
        {"heads", 4},
        {"ffn", 256},
        {"patch", 8},
        {"background_weight", 0.1}}},
      {"loss", {{"w_cls", 1.0}, {"w_l1", 5.0}, {"w_giou", 2.0}}},
      {"train",
       {{"epochs", 24},
        {"batch", 8},
        {"lr", 1e-3},
        {"lr_decay", 0.1},
        {"lr_decay_at", 0.8},
        {"grad_clip", 5.0},
        {"weight_decay", 1e-4},
        {"flip_augment", true},
        {"noise_augment", 0.02},
        {"seed", 1}}},
      {"prompt",
       {{"scene_env", prompt_defaults.scene_env},
        {"negative", prompt_defaults.negative}}},
      {"grounding", {{"fourier_frequencies", 8}, {"label_dim", 16}}},
      {"generator",
       {{"kind", "procedural"},
        {"guidance_scale", 7.5},
        {"grounding_strength", 1.0},
        {"style_dim", 8},
        {"exchange_dir", ""},
        {"timeout_s", 30.0},
        {"fidelity",
         {{"base_quality", 0.7},
          {"jitter_scale", 0.05},
          {"drop_prob", 0.15},
          {"distractor_rate", 0.3}}}}},
      {"refiner",
       {{"quota", 8},
        {"unlimited", false},
        {"p_hi", 0.8},
        {"p_lo", 0.4},
        {"step", 0.05},
        {"iou_match", 0.5},
        {"batch", 8},
        {"fallback_budget_factor", 20},
        {"max_cycles_guard", 64}}},
      {"distill",
       {{"lambda", 2.0},
        {"alpha", 2.0},
        {"beta", 5.0},
        {"layer_agg", "mean"},
        {"compare", "scores"},
        {"enabled", true}}},
      {"pseudo", {{"threshold", 0.3}, {"cache", "off"}, {"enabled", true}}},
      {"replay", {{"enabled", true}}},
      {"eval", {{"max_dets", 100}, {"score_threshold", 0.0}}},
      {"seeds", json::array({1, 2, 3})},
  };
}

namespace {

// Merge b into a recursively; scalar/array values in b replace a's.
void merge(json& a, const json& b, const std::string& prefix) {
  for (auto it = b.begin(); it != b.end(); ++it) {
    std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!a.contains(it.key()))
      throw ConfigError("unknown config key: " + key);
    if (it->is_object() && a[it.key()].is_object())
      merge(a[it.key()], *it, key);
    else
      a[it.key()] = *it;
  }
}

}  // namespace

void Config::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  merge(tree_, doc, "");
}

const json* Config::find(const std::string& key) const {
  const json* node = &tree_;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
  }
  return node;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

void Config::set(const std::string& key, const json& value) {
  json* node = &tree_;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty config key");
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw ConfigError("unknown config key: " + key);
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back()))
    throw ConfigError("unknown config key: " + key);
  (*node)[parts.back()] = value;
}

void Config::apply_override(const std::string& key, const std::string& value) {
  // Interpret the literal: number, boolean, "inf", list, else string.
  if (value == "true" || value == "false") {
    set(key, value == "true");
    return;
  }
  if (value == "inf") {
    // Unlimited quota spelling used by sweeps.
    if (key == "refiner.quota") {
      set("refiner.unlimited", true);
      return;
    }
  }
  if (!value.empty() && value.front() == '[') {
    try {
      set(key, nlohmann::json::parse(value));
      return;
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("bad list literal for " + key + ": " + value);
    }
  }
  try {
    size_t pos = 0;
    double d = std::stod(value, &pos);
    if (pos == value.size()) {
      if (d == static_cast<long long>(d) && value.find_first_of(".eE") == std::string::npos)
        set(key, static_cast<long long>(d));
      else
        set(key, d);
      return;
    }
  } catch (const std::exception&) {
  }
  set(key, value);
}

void Config::apply_set_expr(const std::string& expr) {
  size_t eq = expr.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key=value, got: " + expr);
  apply_override(expr.substr(0, eq), expr.substr(eq + 1));
}

double Config::get_double(const std::string& key) const {
  const json* n = find(key);
  if (!n || !n->is_number()) throw ConfigError("missing numeric config key: " + key);
  return n->get<double>();
}

int Config::get_int(const std::string& key) const {
  const json* n = find(key);
  if (!n || !n->is_number()) throw ConfigError("missing integer config key: " + key);
  return n->get<int>();
}

bool Config::get_bool(const std::string& key) const {
  const json* n = find(key);
  if (!n || !n->is_boolean()) throw ConfigError("missing boolean config key: " + key);
  return n->get<bool>();
}

std::string Config::get_string(const std::string& key) const {
  const json* n = find(key);
  if (!n || !n->is_string()) throw ConfigError("missing string config key: " + key);
  return n->get<std::string>();
}

std::vector<int> Config::get_int_list(const std::string& key) const {
  const json* n = find(key);
  if (!n || !n->is_array()) throw ConfigError("missing list config key: " + key);
  std::vector<int> out;
  for (const json& v : *n) out.push_back(v.get<int>());
  return out;
}

void Config::write_resolved(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write resolved config to " + path);
  f << tree_.dump(1) << "\n";
}

}  // namespace cidet
