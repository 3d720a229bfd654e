#include "cidet/continual.hpp"

#include <cmath>

#include "cidet/kernels.hpp"

namespace cidet {

PseudoLabelSet pseudo_label(const DetectorOutput& out_old, double p_pseudo,
                            const std::set<int>& old_classes) {
  if (p_pseudo <= 0.0 || p_pseudo >= 1.0)
    throw ConfigError("pseudo threshold must lie in (0,1)");
  const nn::Mat& scores = out_old.scores.back();
  const nn::Mat& boxes = out_old.boxes.back();
  PseudoLabelSet out;
  for (int q = 0; q < scores.rows; ++q) {
    auto top = top_non_background(scores.row(q), scores.cols, out_old.num_classes,
                                  p_pseudo);
    if (!top) continue;
    if (!old_classes.count(top->first)) continue;
    out.labels.push_back({top->first, box_from_cxcywh(boxes.row(q)), top->second});
  }
  return out;
}

MergedTargets merge_labels(const AnnotationSet& gt_new,
                           const PseudoLabelSet& pseudo,
                           const std::set<int>& new_classes) {
  for (const Instance& inst : gt_new.instances)
    if (!new_classes.count(inst.class_id))
      throw ValidationError("merge_labels: ground truth contains non-new class " +
                            std::to_string(inst.class_id));
  MergedTargets out;
  out.merged = gt_new;
  out.gt_count = gt_new.instances.size();
  for (const PseudoLabel& p : pseudo.labels) {
    if (new_classes.count(p.class_id))
      throw ValidationError("merge_labels: pseudo label carries new-phase class " +
                            std::to_string(p.class_id));
    out.merged.instances.push_back({p.class_id, p.box});
    ++out.pseudo_count;
  }
  return out;
}

double l2_cls_distill(const nn::Mat& f_new, const nn::Mat& f_old) {
  if (f_new.rows != f_old.rows || f_new.cols != f_old.cols)
    throw ConfigError("l2_cls_distill: shape mismatch");
  return kernels::sq_diff_sum(f_new.v.data(), f_old.v.data(), f_new.size()) /
         static_cast<double>(f_new.size());
}

double l2_reg_distill(const nn::Mat& b_new, const nn::Mat& b_old) {
  if (b_new.rows != b_old.rows || b_new.cols != b_old.cols)
    throw ConfigError("l2_reg_distill: shape mismatch");
  return kernels::sq_diff_sum(b_new.v.data(), b_old.v.data(), b_new.size()) /
         static_cast<double>(b_new.size());
}

nn::Mat slice_old_columns(const nn::Mat& wide, int old_classes) {
  if (wide.cols < old_classes + 1)
    throw ConfigError("slice_old_columns: matrix narrower than old class count");
  nn::Mat out(wide.rows, old_classes + 1);
  for (int i = 0; i < wide.rows; ++i) {
    for (int j = 0; j < old_classes; ++j) out.at(i, j) = wide.at(i, j);
    out.at(i, old_classes) = wide.at(i, wide.cols - 1);  // background
  }
  return out;
}

namespace {

struct LayerPair {
  nn::Mat f_new;   // Q x (C_old+1), compare space
  nn::Mat f_old;   // same shape
  nn::Mat sliced_scores;  // populated in scores space for the softmax backward
};

LayerPair prepare_layer(const DetectorOutput& out_new,
                        const DetectorOutput& out_old, int layer,
                        DistillationConfig::CompareSpace space) {
  LayerPair p;
  const int c_old = out_old.num_classes;
  if (space == DistillationConfig::CompareSpace::logits) {
    p.f_new = slice_old_columns(out_new.logits[layer], c_old);
    p.f_old = out_old.logits[layer];
  } else {
    // Re-normalize the new model's old-column logits so both sides live
    // in the same (C_old+1)-way distribution space.
    nn::Mat sliced = slice_old_columns(out_new.logits[layer], c_old);
    nn::softmax_rows(sliced);
    p.sliced_scores = sliced;
    p.f_new = std::move(sliced);
    p.f_old = out_old.scores[layer];
  }
  return p;
}

}  // namespace

DistillBreakdown total_distill_loss(const DetectorOutput& out_new,
                                    const DetectorOutput& out_old,
                                    const DistillationConfig& cfg) {
  cfg.validate();
  if (out_new.layers != out_old.layers)
    throw ConfigError("distillation: decoder layer count mismatch");
  if (out_new.queries != out_old.queries)
    throw ConfigError("distillation: query count mismatch");
  if (out_new.num_classes < out_old.num_classes)
    throw ConfigError("distillation: new model has fewer classes than old");

  const int L = out_new.layers;
  DistillBreakdown b;
  for (int l = 0; l < L; ++l) {
    LayerPair p = prepare_layer(out_new, out_old, l, cfg.compare);
    b.cls += l2_cls_distill(p.f_new, p.f_old);
    b.reg += l2_reg_distill(out_new.boxes[l], out_old.boxes[l]);
  }
  if (cfg.layer_agg == DistillationConfig::LayerAgg::mean) {
    b.cls /= L;
    b.reg /= L;
  }
  b.total = cfg.lambda * (cfg.cls_weight * b.cls + cfg.reg_weight * b.reg);
  return b;
}

DistillBreakdown total_distill_with_grads(const DetectorOutput& out_new,
                                          const DetectorOutput& out_old,
                                          const DistillationConfig& cfg,
                                          std::vector<nn::Mat>& dlogits,
                                          std::vector<nn::Mat>& dboxes) {
  cfg.validate();
  if (out_new.layers != out_old.layers)
    throw ConfigError("distillation: decoder layer count mismatch");
  if (out_new.queries != out_old.queries)
    throw ConfigError("distillation: query count mismatch");
  if (out_new.num_classes < out_old.num_classes)
    throw ConfigError("distillation: new model has fewer classes than old");

  const int L = out_new.layers;
  const int Q = out_new.queries;
  const int c_old = out_old.num_classes;
  const int wide_cols = out_new.num_classes + 1;
  dlogits.assign(L, nn::Mat(Q, wide_cols));
  dboxes.assign(L, nn::Mat(Q, 4));

  const double layer_scale =
      cfg.layer_agg == DistillationConfig::LayerAgg::mean ? 1.0 / L : 1.0;

  DistillBreakdown b;
  for (int l = 0; l < L; ++l) {
    LayerPair p = prepare_layer(out_new, out_old, l, cfg.compare);
    double cls_l = l2_cls_distill(p.f_new, p.f_old);
    double reg_l = l2_reg_distill(out_new.boxes[l], out_old.boxes[l]);
    b.cls += cls_l;
    b.reg += reg_l;

    // d total / d f_new = lambda*alpha * 2 (f_new - f_old) / (Q*(C_old+1)) * layer_scale
    const double cls_coeff = cfg.lambda * cfg.cls_weight * layer_scale * 2.0 /
                             static_cast<double>(p.f_new.size());
    nn::Mat df(Q, c_old + 1);
    for (size_t i = 0; i < df.v.size(); ++i)
      df.v[i] = cls_coeff * (p.f_new.v[i] - p.f_old.v[i]);

    nn::Mat dsliced_logits;
    if (cfg.compare == DistillationConfig::CompareSpace::scores) {
      dsliced_logits = nn::softmax_backward_rows(p.sliced_scores, df);
    } else {
      dsliced_logits = std::move(df);
    }
    // Scatter the slice gradient back into the wide logit layout.
    for (int i = 0; i < Q; ++i) {
      for (int j = 0; j < c_old; ++j)
        dlogits[l].at(i, j) += dsliced_logits.at(i, j);
      dlogits[l].at(i, wide_cols - 1) += dsliced_logits.at(i, c_old);
    }

    const double reg_coeff = cfg.lambda * cfg.reg_weight * layer_scale * 2.0 /
                             static_cast<double>(out_new.boxes[l].size());
    for (size_t i = 0; i < dboxes[l].v.size(); ++i)
      dboxes[l].v[i] =
          reg_coeff * (out_new.boxes[l].v[i] - out_old.boxes[l].v[i]);
  }
  if (cfg.layer_agg == DistillationConfig::LayerAgg::mean) {
    b.cls /= L;
    b.reg /= L;
  }
  b.total = cfg.lambda * (cfg.cls_weight * b.cls + cfg.reg_weight * b.reg);
  return b;
}

}  // namespace cidet
