#pragma once

#include <set>

#include "cidet/detector.hpp"

namespace cidet {

struct PseudoLabel {
  int class_id;
  Box box;
  double score;
};

struct PseudoLabelSet {
  std::vector<PseudoLabel> labels;
};

struct DistillationConfig {
  double lambda = 2.0;
  double cls_weight = 2.0;  // alpha
  double reg_weight = 5.0;  // beta
  enum class LayerAgg { mean, sum } layer_agg = LayerAgg::mean;
  enum class CompareSpace { scores, logits } compare = CompareSpace::scores;

  void validate() const {
    if (lambda < 0 || cls_weight < 0 || reg_weight < 0)
      throw ConfigError("distillation weights must be non-negative");
  }
};

// Final-decoder-layer pseudo-labels from the frozen old model: per
// query, argmax over all C+1 columns; a query is labeled when the
// argmax is a non-background old class and its score >= p_pseudo
// (inclusive boundary).
PseudoLabelSet pseudo_label(const DetectorOutput& out_old, double p_pseudo,
                            const std::set<int>& old_classes);

// Union of new-class ground truth and old-class pseudo-labels. Ground
// truth instances come first, pseudo instances after, so the split is
// recoverable for diagnostics. Errors if a pseudo class collides with
// the new-class set.
struct MergedTargets {
  AnnotationSet merged;
  size_t gt_count = 0;
  size_t pseudo_count = 0;
};
MergedTargets merge_labels(const AnnotationSet& gt_new,
                           const PseudoLabelSet& pseudo,
                           const std::set<int>& new_classes);

// Mean squared difference over all entries; shapes must match.
double l2_cls_distill(const nn::Mat& f_new, const nn::Mat& f_old);
double l2_reg_distill(const nn::Mat& b_new, const nn::Mat& b_old);

struct DistillBreakdown {
  double total = 0;
  double cls = 0;  // aggregated over layers
  double reg = 0;
};

// lambda * (alpha * L_cls + beta * L_reg) aggregated over all decoder
// layers. The old model's column count drives the comparison: when the
// new model is wider, its old-class logits (background last) are
// re-normalized over that slice, which makes the loss exactly zero
// right after head widening.
DistillBreakdown total_distill_loss(const DetectorOutput& out_new,
                                    const DetectorOutput& out_old,
                                    const DistillationConfig& cfg);

// Same, also emitting gradients w.r.t. the new model's logits and
// sigmoid box outputs (full new-model width; new-class columns get
// zero gradient from the cls term).
DistillBreakdown total_distill_with_grads(const DetectorOutput& out_new,
                                          const DetectorOutput& out_old,
                                          const DistillationConfig& cfg,
                                          std::vector<nn::Mat>& dlogits,
                                          std::vector<nn::Mat>& dboxes);

// Old-column slice of a (possibly wider) score/logit row set: columns
// [0, old_classes) plus the background column mapped last.
nn::Mat slice_old_columns(const nn::Mat& wide, int old_classes);

}  // namespace cidet
