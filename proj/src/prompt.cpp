#include "cidet/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "cidet/kernels.hpp"
#include "cidet/rng.hpp"

namespace cidet {

std::string number_word(int n) {
  if (n < 1) throw ConfigError("number_word requires n >= 1");
  static const char* words[] = {"one", "two",   "three", "four", "five",
                                "six", "seven", "eight", "nine", "ten"};
  if (n <= 10) return words[n - 1];
  return std::to_string(n);
}

std::string pluralize(const std::string& noun) {
  static const std::map<std::string, std::string> exceptions = {
      {"person", "persons"}, {"sheep", "sheep"},     {"mouse", "mice"},
      {"scissors", "scissors"}, {"skis", "skis"},
  };
  // Pluralize only the head noun's spelling; multi-word names ("stop
  // sign") inflect the last word.
  size_t sp = noun.rfind(' ');
  std::string head = sp == std::string::npos ? noun : noun.substr(sp + 1);
  std::string prefix = sp == std::string::npos ? "" : noun.substr(0, sp + 1);
  auto it = exceptions.find(head);
  if (it != exceptions.end()) return prefix + it->second;

  auto ends_with = [&](const char* suf) {
    size_t m = std::strlen(suf);
    return head.size() >= m && head.compare(head.size() - m, m, suf) == 0;
  };
  if (ends_with("s") || ends_with("x") || ends_with("z") || ends_with("ch") ||
      ends_with("sh"))
    return prefix + head + "es";
  return prefix + head + "s";
}

PromptSpec build_prompt(const AnnotationSet& a,
                        const std::vector<ClassId>& catalog,
                        const PromptConfig& cfg) {
  if (a.instances.empty())
    throw ConfigError("build_prompt requires at least one instance");

  std::map<int, int> counts;
  for (const Instance& inst : a.instances) counts[inst.class_id]++;

  struct Group {
    int class_id;
    int count;
  };
  std::vector<Group> groups;
  for (auto& [cid, n] : counts) groups.push_back({cid, n});
  std::sort(groups.begin(), groups.end(), [](const Group& x, const Group& y) {
    if (x.count != y.count) return x.count > y.count;
    return x.class_id < y.class_id;
  });

  auto name_of = [&](int cid) -> const std::string& {
    for (const ClassId& c : catalog)
      if (c.id == cid) {
        if (c.name.empty()) throw ValidationError("class without a name");
        return c.name;
      }
    throw ValidationError("class id " + std::to_string(cid) + " not in catalog");
  };

  std::string text = "A photo of ";
  for (size_t i = 0; i < groups.size(); ++i) {
    if (i > 0) text += groups.size() >= 2 && i == groups.size() - 1 ? ", and " : ", ";
    const std::string& name = name_of(groups[i].class_id);
    if (groups[i].count >= 2)
      text += number_word(groups[i].count) + " " + pluralize(name);
    else
      text += name;
  }
  if (!cfg.scene_env.empty()) text += ", " + cfg.scene_env;
  return {text, cfg.negative};
}

std::vector<double> fourier_embed(const Box& b, int frequencies) {
  if (frequencies < 1) throw ConfigError("fourier frequencies must be >= 1");
  const double coords[4] = {b.x_min, b.y_min, b.x_max, b.y_max};
  std::vector<double> out;
  out.reserve(static_cast<size_t>(8) * frequencies);
  constexpr double pi = 3.141592653589793238462643383279502884;
  for (double p : coords) {
    for (int k = 0; k < frequencies; ++k) {
      double arg = std::ldexp(1.0, k) * pi * p;
      out.push_back(std::sin(arg));
      out.push_back(std::cos(arg));
    }
  }
  return out;
}

std::vector<double> label_embed(int class_id, int label_dim) {
  if (label_dim < 1) throw ConfigError("label_dim must be >= 1");
  Rng rng(Rng::derive(0x1abe1, static_cast<uint64_t>(class_id)));
  std::vector<double> v(label_dim);
  for (double& x : v) x = rng.normal();
  double norm = std::sqrt(kernels::dot(v.data(), v.data(), v.size()));
  if (norm > 0) kernels::scale(1.0 / norm, v.data(), v.size());
  return v;
}

GroundingEmbedding encode_grounding(const GroundingInput& g, int frequencies,
                                    int label_dim) {
  if (g.entities.empty())
    throw ConfigError("grounding input must be non-empty");
  GroundingEmbedding e;
  e.entity_count = g.entities.size();
  e.dim = static_cast<size_t>(label_dim) + 8 * static_cast<size_t>(frequencies);
  e.values.reserve(e.entity_count * e.dim);
  for (const Instance& inst : g.entities) {
    std::vector<double> lab = label_embed(inst.class_id, label_dim);
    std::vector<double> four = fourier_embed(inst.box, frequencies);
    e.values.insert(e.values.end(), lab.begin(), lab.end());
    e.values.insert(e.values.end(), four.begin(), four.end());
  }
  return e;
}

GroundingInput grounding_from_annotation(const AnnotationSet& a) {
  GroundingInput g;
  g.entities = a.instances;
  return g;
}

}  // namespace cidet
