#pragma once

#include <map>
#include <optional>
#include <set>

#include "cidet/data.hpp"

namespace cidet {

struct EvalDetection {
  int64_t image_id;
  int class_id;
  Box box;
  double score;
};

// All AP values are in [0,1] internally; -1 marks an undefined stratum
// (no ground truth). Reports are rendered x100 at one decimal.
struct EvalReport {
  double ap = -1;    // mean over IoU 0.50:0.05:0.95
  double ap50 = -1;
  double ap75 = -1;
  double ap_small = -1;
  double ap_medium = -1;
  double ap_large = -1;
  std::map<int, double> per_class_ap;  // threshold-mean, all areas
  std::string subset = "all";
};

struct EvalParams {
  // COCO size strata scaled from 640x480 to the configured canvas so the
  // S/M/L semantics survive at desk scale.
  int canvas = 64;
  int max_dets_per_image = 100;

  double area_scale() const {
    return static_cast<double>(canvas) * canvas / (640.0 * 480.0);
  }
};

// Greedy score-ordered matching per class and IoU threshold, 101-point
// interpolated AP, class-mean then threshold-mean. Classes without
// ground truth in the evaluation set are excluded from the mean.
EvalReport compute_ap(const std::vector<AnnotationSet>& ground_truth,
                      const std::vector<EvalDetection>& detections,
                      const std::vector<int>& class_ids,
                      const EvalParams& params);

// Evaluation restricted to a class subset. Errors on an empty subset.
EvalReport subset_report(const std::vector<AnnotationSet>& ground_truth,
                         const std::vector<EvalDetection>& detections,
                         const std::set<int>& subset, const EvalParams& params,
                         const std::string& subset_name);

// Forgetting percentage points, report scale: first minus final.
double fpp(double ap_old_at_first_phase, double ap_old_at_final_phase);

// (recall, precision) points at IoU 0.5 for one class, for plotting.
std::vector<std::pair<double, double>> precision_recall_curve(
    const std::vector<AnnotationSet>& ground_truth,
    const std::vector<EvalDetection>& detections, int class_id,
    const EvalParams& params);

}  // namespace cidet
