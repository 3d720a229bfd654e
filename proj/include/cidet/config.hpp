#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "cidet/error.hpp"

namespace cidet {

// Layered configuration tree. Defaults are built in; a config file and
// then `--set key=value` overrides are layered on top. Keys use dotted
// paths ("refiner.p_hi"). Overriding a key that does not exist in the
// defaults is an error, which catches typos before a run starts.
class Config {
 public:
  Config() : tree_(defaults()) {}
  explicit Config(nlohmann::json tree) : tree_(std::move(tree)) {}

  static nlohmann::json defaults();

  void load_file(const std::string& path);
  void apply_override(const std::string& key, const std::string& value);
  void apply_set_expr(const std::string& expr);  // "key=value"

  bool has(const std::string& key) const;

  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  void set(const std::string& key, const nlohmann::json& value);

  const nlohmann::json& tree() const { return tree_; }
  // Fully-resolved snapshot written next to every command's outputs.
  void write_resolved(const std::string& path) const;

 private:
  const nlohmann::json* find(const std::string& key) const;
  nlohmann::json tree_;
};

}  // namespace cidet
