#include "cidet/refiner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>

using nlohmann::json;

namespace cidet {

void RefinerConfig::validate() const {
  if (!unlimited && quota < 1) throw ConfigError("refiner quota must be >= 1");
  if (!(0.0 < p_lo && p_lo <= p_hi && p_hi < 1.0))
    throw ConfigError("refiner thresholds must satisfy 0 < p_lo <= p_hi < 1");
  if (step <= 0) throw ConfigError("refiner step must be > 0");
  if (batch_size < 1) throw ConfigError("refiner batch size must be >= 1");
  if (max_cycles_guard < 1) throw ConfigError("refiner cycle guard must be >= 1");
}

std::vector<double> RefinerConfig::threshold_schedule() const {
  std::vector<double> out;
  int n = static_cast<int>(std::floor((p_hi - p_lo) / step + 1e-9)) + 1;
  for (int i = 0; i < n; ++i) out.push_back(p_hi - i * step);
  return out;
}

ClassMap ClassMap::identity(int num_classes) {
  ClassMap m;
  for (int i = 0; i < num_classes; ++i) {
    m.column_to_id.push_back(i);
    m.id_to_column[i] = i;
  }
  return m;
}

ClassMap ClassMap::from_columns(const std::vector<int>& ids) {
  ClassMap m;
  m.append(ids);
  return m;
}

void ClassMap::append(const std::vector<int>& new_ids) {
  for (int id : new_ids) {
    if (id_to_column.count(id))
      throw ConfigError("class " + std::to_string(id) + " already mapped");
    id_to_column[id] = static_cast<int>(column_to_id.size());
    column_to_id.push_back(id);
  }
}

int ClassMap::column(int class_id) const {
  auto it = id_to_column.find(class_id);
  if (it == id_to_column.end())
    throw ConfigError("class " + std::to_string(class_id) + " not in head");
  return it->second;
}

std::vector<Detection> ModelScorer::score(const ImageRecord& image,
                                          double threshold) const {
  std::vector<Detection> dets = predict(*model_, image, threshold);
  for (Detection& d : dets) d.class_id = map_.id(d.class_id);
  return dets;
}

FilterDecision filter_sample(const GeneratedSample& sample,
                             const DetectionScorer& old_model, double p_refine,
                             double iou_match) {
  if (sample.grounding_used.entities.empty())
    throw ConfigError("filter_sample: sample has no grounding entities");
  std::vector<Detection> dets = old_model.score(sample.image, p_refine);

  const size_t n = sample.grounding_used.entities.size();
  struct Pair {
    double iou_v;
    size_t entity;
    size_t det;
  };
  std::vector<Pair> pairs;
  for (size_t e = 0; e < n; ++e) {
    const Instance& ent = sample.grounding_used.entities[e];
    for (size_t d = 0; d < dets.size(); ++d) {
      if (dets[d].class_id != ent.class_id) continue;
      if (dets[d].score < p_refine) continue;
      double v = iou(ent.box, dets[d].box);
      if (v >= iou_match) pairs.push_back({v, e, d});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou_v != b.iou_v) return a.iou_v > b.iou_v;
    if (a.entity != b.entity) return a.entity < b.entity;
    return a.det < b.det;
  });
  std::vector<char> entity_done(n, 0), det_used(dets.size(), 0);
  size_t confirmed = 0;
  for (const Pair& p : pairs) {
    if (entity_done[p.entity] || det_used[p.det]) continue;
    entity_done[p.entity] = 1;
    det_used[p.det] = 1;
    ++confirmed;
  }
  FilterDecision out;
  out.accepted = confirmed == n;
  if (!out.accepted) {
    for (size_t e = 0; e < n; ++e) {
      if (!entity_done[e]) {
        out.reject_reason =
            "unconfirmed class " +
            std::to_string(sample.grounding_used.entities[e].class_id) +
            " (entity " + std::to_string(e) + ")";
        break;
      }
    }
  }
  return out;
}

std::vector<double> style_vector_for_image(int64_t image_id, int style_dim) {
  Rng rng(Rng::derive(0x57a1e, static_cast<uint64_t>(image_id)));
  std::vector<double> v(style_dim);
  for (double& x : v) x = rng.normal();
  return v;
}

namespace {

GenerationRequest make_request(const AnnotationSet& annotation,
                               const std::vector<ClassId>& catalog,
                               const GenerationSettings& settings,
                               uint64_t seed) {
  GenerationRequest req;
  req.prompt = build_prompt(annotation, catalog, settings.prompt);
  req.grounding = grounding_from_annotation(annotation);
  req.grounding_strength = settings.grounding_strength;
  req.guidance_scale = settings.guidance_scale;
  req.style_vector = style_vector_for_image(annotation.image_id, settings.style_dim);
  req.seed = seed;
  req.count = 1;
  return req;
}

}  // namespace

RefinementResult run_refinement(const std::vector<AnnotationSet>& old_annotations,
                                const Generator& generator,
                                const DetectionScorer& old_model,
                                const RefinerConfig& cfg,
                                const std::set<int>& quota_classes,
                                const std::vector<ClassId>& catalog,
                                const GenerationSettings& settings,
                                uint64_t seed) {
  cfg.validate();
  if (old_annotations.empty())
    throw ConfigError("run_refinement: no old annotations");
  auto t_start = std::chrono::steady_clock::now();

  RefinementResult result;
  RefinerState& state = result.state;
  for (int c : quota_classes) state.accepted_counts[c] = 0;

  auto satisfied = [&](int c) {
    return !cfg.unlimited && state.accepted_counts.at(c) >= cfg.quota;
  };
  auto all_satisfied = [&]() {
    if (cfg.unlimited) return false;
    for (int c : quota_classes)
      if (!satisfied(c)) return false;
    return true;
  };

  std::vector<GeneratedSample> accepted;
  std::vector<char> annotation_done(old_annotations.size(), 0);  // unlimited mode

  const std::vector<double> schedule = cfg.threshold_schedule();
  if (static_cast<int>(schedule.size()) > cfg.max_cycles_guard)
    throw ConfigError("refiner threshold schedule exceeds max_cycles_guard");

  Rng pick_rng(Rng::derive(seed, "refine-pick"));
  uint64_t gen_seed_base = Rng::derive(seed, "refine-gen");

  for (size_t ci = 0; ci < schedule.size(); ++ci) {
    if (all_satisfied()) break;
    double threshold = schedule[ci];
    state.cycle_index = static_cast<int>(ci);
    state.current_threshold = threshold;
    state.visited_thresholds.push_back(threshold);
    RefinerState::CycleStats stats{threshold, 0, 0};

    // One attempted sample per missing accepted image this cycle.
    int attempts;
    std::vector<size_t> eligible;
    if (cfg.unlimited) {
      for (size_t i = 0; i < old_annotations.size(); ++i)
        if (!annotation_done[i]) eligible.push_back(i);
      attempts = static_cast<int>(eligible.size());
    } else {
      int deficit = 0;
      for (int c : quota_classes)
        deficit += std::max(0, cfg.quota - state.accepted_counts.at(c));
      attempts = deficit;
    }

    for (int a = 0; a < attempts; ++a) {
      size_t pick;
      if (cfg.unlimited) {
        if (a >= static_cast<int>(eligible.size())) break;
        pick = eligible[a];
        if (annotation_done[pick]) continue;
      } else {
        if (all_satisfied()) break;
        // Uniform with replacement over annotations that still serve an
        // unsatisfied class.
        std::vector<size_t> pool;
        for (size_t i = 0; i < old_annotations.size(); ++i) {
          for (const Instance& inst : old_annotations[i].instances) {
            if (quota_classes.count(inst.class_id) && !satisfied(inst.class_id)) {
              pool.push_back(i);
              break;
            }
          }
        }
        if (pool.empty()) break;
        pick = pool[pick_rng.uniform_int(pool.size())];
      }

      uint64_t gseed = Rng::derive(gen_seed_base,
                                   (static_cast<uint64_t>(ci) << 32) ^
                                       static_cast<uint64_t>(a));
      GenerationRequest req =
          make_request(old_annotations[pick], catalog, settings, gseed);
      std::vector<GeneratedSample> samples = generator.generate(req);
      for (GeneratedSample& s : samples) {
        ++stats.attempted;
        FilterDecision decision =
            filter_sample(s, old_model, threshold, cfg.iou_match);
        if (decision.accepted) {
          ++stats.accepted;
          for (const Instance& inst : s.grounding_used.entities) {
            auto it = state.accepted_counts.find(inst.class_id);
            if (it != state.accepted_counts.end()) ++it->second;
          }
          if (cfg.unlimited) annotation_done[pick] = 1;
          accepted.push_back(std::move(s));
        } else {
          state.rejection_log.push_back({gseed, threshold, decision.reject_reason});
        }
      }
    }
    state.cycles.push_back(stats);
  }

  // Class-specific fallback for shortfall classes.
  if (!cfg.unlimited) {
    for (int c : quota_classes) {
      if (satisfied(c)) continue;
      state.fallback_classes.insert(c);
      std::vector<GeneratedSample> extra = class_specific_generate(
          c, generator, old_model, cfg, catalog, settings,
          state.accepted_counts.at(c), Rng::derive(seed, "fallback"), &state);
      for (GeneratedSample& s : extra) {
        for (const Instance& inst : s.grounding_used.entities) {
          auto it = state.accepted_counts.find(inst.class_id);
          if (it != state.accepted_counts.end()) ++it->second;
        }
        accepted.push_back(std::move(s));
      }
      if (state.accepted_counts.at(c) < cfg.quota) state.unsatisfied.insert(c);
    }
  }

  // Assemble D_gen with fresh sequential ids; annotations are the
  // grounding actually used (candidate labels, not supervision).
  result.d_gen.catalog = catalog;
  int64_t next_id = 1000000;
  for (GeneratedSample& s : accepted) {
    s.image.image_id = next_id;
    s.image.annotation.image_id = next_id;
    for (Instance& inst : s.image.annotation.instances) {
      inst.box.x_min = quantize_coord(inst.box.x_min);
      inst.box.y_min = quantize_coord(inst.box.y_min);
      inst.box.x_max = quantize_coord(inst.box.x_max);
      inst.box.y_max = quantize_coord(inst.box.y_max);
    }
    result.d_gen.records.push_back(s.image);
    ++next_id;
  }
  result.d_gen.validate();

  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

std::vector<GeneratedSample> class_specific_generate(
    int class_id, const Generator& generator, const DetectionScorer& old_model,
    const RefinerConfig& cfg, const std::vector<ClassId>& catalog,
    const GenerationSettings& settings, int already_accepted, uint64_t seed,
    RefinerState* state) {
  cfg.validate();
  std::vector<GeneratedSample> accepted;
  if (cfg.unlimited) return accepted;
  int needed = cfg.quota - already_accepted;
  if (needed <= 0) return accepted;

  std::string name;
  for (const ClassId& c : catalog)
    if (c.id == class_id) name = c.name;
  if (name.empty())
    throw ConfigError("class_specific_generate: class " +
                      std::to_string(class_id) + " has no name");

  GenerationRequest req;
  req.prompt = {name, settings.prompt.negative};  // bare class-name prompt
  req.grounding.entities = {{class_id, Box{0.3, 0.3, 0.6, 0.6}}};
  req.grounding_strength = settings.grounding_strength;
  req.guidance_scale = settings.guidance_scale;
  req.count = 1;

  const int budget = cfg.fallback_budget_factor * cfg.quota;
  for (int attempt = 0; attempt < budget && needed > 0; ++attempt) {
    req.seed = Rng::derive(Rng::derive(seed, static_cast<uint64_t>(class_id)),
                           static_cast<uint64_t>(attempt));
    std::vector<GeneratedSample> samples = generator.generate(req);
    for (GeneratedSample& s : samples) {
      if (state != nullptr) ++state->fallback_attempts;
      FilterDecision decision =
          filter_sample(s, old_model, cfg.p_lo, cfg.iou_match);
      if (decision.accepted) {
        if (state != nullptr) ++state->fallback_accepted;
        accepted.push_back(std::move(s));
        --needed;
      } else if (state != nullptr) {
        state->rejection_log.push_back({req.seed, cfg.p_lo, decision.reject_reason});
      }
    }
  }
  return accepted;
}

void write_refinement_report(const RefinementResult& result,
                             const std::vector<ClassId>& catalog,
                             const std::string& path) {
  json doc;
  json counts = json::object();
  for (auto& [cls, n] : result.state.accepted_counts) {
    std::string name = std::to_string(cls);
    for (const ClassId& c : catalog)
      if (c.id == cls) name = c.name;
    counts[name] = n;
  }
  doc["accepted_counts"] = counts;
  json cycles = json::array();
  for (const auto& c : result.state.cycles) {
    double rate = c.attempted > 0 ? static_cast<double>(c.accepted) / c.attempted : 0.0;
    cycles.push_back({{"threshold", c.threshold},
                      {"attempted", c.attempted},
                      {"accepted", c.accepted},
                      {"acceptance_rate", rate}});
  }
  doc["cycles"] = cycles;
  doc["visited_thresholds"] = result.state.visited_thresholds;
  doc["fallback_classes"] = std::vector<int>(result.state.fallback_classes.begin(),
                                             result.state.fallback_classes.end());
  doc["unsatisfied_classes"] = std::vector<int>(result.state.unsatisfied.begin(),
                                                result.state.unsatisfied.end());
  doc["fallback_attempts"] = result.state.fallback_attempts;
  doc["fallback_accepted"] = result.state.fallback_accepted;
  doc["rejections"] = result.state.rejection_log.size();
  doc["generated_images"] = result.d_gen.records.size();
  doc["wall_time_s"] = result.wall_time_s;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write refinement report " + path);
  f << doc.dump(1) << "\n";
}

}  // namespace cidet
