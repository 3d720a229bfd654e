#pragma once

#include <map>
#include <set>

#include "cidet/detector.hpp"
#include "cidet/generator.hpp"

namespace cidet {

struct RefinerConfig {
  int quota = 8;           // per-class target N
  bool unlimited = false;  // N = infinity: every old annotation is
                           // generated until accepted once, no fallback
  double p_hi = 0.8;
  double p_lo = 0.4;
  double step = 0.05;
  double iou_match = 0.5;
  int batch_size = 8;
  int fallback_budget_factor = 20;  // attempts per class = factor * N
  int max_cycles_guard = 64;

  void validate() const;
  // p_hi, p_hi - step, ..., down to p_lo.
  std::vector<double> threshold_schedule() const;
};

// What the refiner needs from the old model; stubs implement this in
// tests, ModelScorer wraps a trained detector.
class DetectionScorer {
 public:
  virtual ~DetectionScorer() = default;
  virtual std::vector<Detection> score(const ImageRecord& image,
                                       double threshold) const = 0;
};

// Maps between catalog class ids and head columns; identity for
// schedules that add classes in catalog order.
struct ClassMap {
  std::vector<int> column_to_id;
  std::map<int, int> id_to_column;

  static ClassMap identity(int num_classes);
  static ClassMap from_columns(const std::vector<int>& ids);
  void append(const std::vector<int>& new_ids);
  int column(int class_id) const;
  int id(int column) const { return column_to_id.at(column); }
  int size() const { return static_cast<int>(column_to_id.size()); }
};

class ModelScorer : public DetectionScorer {
 public:
  ModelScorer(const DetectorModel& model, const ClassMap& map)
      : model_(&model), map_(map) {}
  std::vector<Detection> score(const ImageRecord& image,
                               double threshold) const override;

 private:
  const DetectorModel* model_;
  ClassMap map_;
};

struct FilterDecision {
  bool accepted = false;
  std::string reject_reason;  // names the first unconfirmed entity
};

// Accept iff every grounding entity is confirmed by a same-class
// detection with IoU >= iou_match and score >= p_refine; a detection
// confirms at most one entity (greedy by descending IoU).
FilterDecision filter_sample(const GeneratedSample& sample,
                             const DetectionScorer& old_model, double p_refine,
                             double iou_match);

struct RefinerState {
  std::map<int, int> accepted_counts;
  double current_threshold = 0;
  int cycle_index = 0;
  std::vector<double> visited_thresholds;
  struct CycleStats {
    double threshold;
    int attempted = 0;
    int accepted = 0;
  };
  std::vector<CycleStats> cycles;
  struct Rejection {
    uint64_t seed;
    double threshold;
    std::string reason;
  };
  std::vector<Rejection> rejection_log;
  std::set<int> fallback_classes;    // classes that needed class-specific generation
  std::set<int> unsatisfied;         // still short after fallback
  int fallback_attempts = 0;
  int fallback_accepted = 0;
};

struct GenerationSettings {
  PromptConfig prompt;
  double grounding_strength = 1.0;
  double guidance_scale = 7.5;
  int style_dim = 8;
};

// Deterministic stand-in for an image-conditioned style embedding,
// derived from the source image id.
std::vector<double> style_vector_for_image(int64_t image_id, int style_dim);

struct RefinementResult {
  Dataset d_gen;
  RefinerState state;
  double wall_time_s = 0;
};

// The iterative class-wise refinement loop: sample old annotations that
// still serve an unsatisfied class, generate, filter at a threshold
// descending from p_hi to p_lo by `step`, then run class-specific
// fallback generation for shortfall classes.
RefinementResult run_refinement(const std::vector<AnnotationSet>& old_annotations,
                                const Generator& generator,
                                const DetectionScorer& old_model,
                                const RefinerConfig& cfg,
                                const std::set<int>& quota_classes,
                                const std::vector<ClassId>& catalog,
                                const GenerationSettings& settings,
                                uint64_t seed);

// Fallback single-object generation: bare class-name prompt, fixed
// centered grounding box [0.3, 0.3, 0.6, 0.6], filtering at p_lo only.
std::vector<GeneratedSample> class_specific_generate(
    int class_id, const Generator& generator, const DetectionScorer& old_model,
    const RefinerConfig& cfg, const std::vector<ClassId>& catalog,
    const GenerationSettings& settings, int already_accepted, uint64_t seed,
    RefinerState* state = nullptr);

void write_refinement_report(const RefinementResult& result,
                             const std::vector<ClassId>& catalog,
                             const std::string& path);

}  // namespace cidet
