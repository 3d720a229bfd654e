#pragma once

#include <optional>

#include "cidet/config.hpp"
#include "cidet/continual.hpp"
#include "cidet/eval.hpp"
#include "cidet/refiner.hpp"

namespace cidet {

struct PhasePlan {
  int phase_index = 0;  // 0-based; paper's m is phase_index + 1
  std::set<int> new_classes;
  std::set<int> old_classes;
  const Dataset* real_dataset = nullptr;       // D_m, annotations filtered to new classes
  const Dataset* generated_dataset = nullptr;  // D_gen, present iff phase_index > 0 and replay on

  void validate() const;
};

struct PhaseResult {
  int phase_index = 0;
  std::string checkpoint_path;
  EvalReport all;                  // classes learned so far
  std::optional<EvalReport> old_report;  // T_{1:m-1}
  std::optional<EvalReport> new_report;  // T_m
  double first_phase_subset_ap = -1;     // AP over T_1 classes (for FPP)
  std::vector<double> training_curve;    // mean loss per epoch
};

// Per-sample loss provenance rows, the audit trail for the
// "generated samples never get a supervised term" contract.
struct ProvenanceRow {
  int phase;
  int epoch;
  int64_t image_id;
  Provenance provenance;
  enum class Kind { detection, distillation } kind;
  double loss;
};

class ProvenanceLog {
 public:
  explicit ProvenanceLog(const std::string& path);
  void append(const ProvenanceRow& row);
  ~ProvenanceLog();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct TrainedPhase {
  DetectorModel model;
  ClassMap class_map;
  PhaseResult result;
};

// One continual phase per supplementary-procedure semantics: phase 0 is
// plain detection training; later phases start from the widened old
// model, route generated samples through distillation only and real
// samples through pseudo-label-augmented detection loss.
TrainedPhase run_phase(const PhasePlan& plan, const Config& config,
                       const DetectorModel* old_model,
                       const ClassMap* old_class_map,
                       const std::vector<ClassId>& catalog, uint64_t seed,
                       ProvenanceLog* provenance);

struct ScenarioResult {
  std::vector<PhaseResult> phases;
  double fpp_value = -1;  // report scale, multi-phase only
  std::vector<double> refine_wall_times;  // per phase > 0
  double total_wall_time_s = 0;
};

// Full multi-phase run: splits by schedule, refines replay data against
// the previous model, trains, evaluates on the held-out split over all
// classes learned so far, and writes per-phase artifacts under out_dir.
ScenarioResult run_scenario(const TaskSchedule& schedule,
                            const Dataset& train_world,
                            const Dataset& eval_world, const Config& config,
                            uint64_t seed, const std::string& out_dir,
                            const std::string& resume_phase1_checkpoint = "");

// Detections for a whole dataset in catalog-id space.
std::vector<EvalDetection> detect_dataset(const DetectorModel& model,
                                          const ClassMap& map,
                                          const Dataset& data,
                                          double score_threshold);

nlohmann::json report_to_json(const EvalReport& r);
void write_metrics(const std::vector<std::pair<std::string, EvalReport>>& reports,
                   const std::string& path,
                   std::optional<double> fpp_value = std::nullopt,
                   const std::vector<double>* curve = nullptr);

// Rounds to the 1-decimal report scale (x100).
double report_scale(double ap01);

}  // namespace cidet
