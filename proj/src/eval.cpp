#include "cidet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cidet {

namespace {

constexpr int kNumIouThresholds = 10;   // 0.50 : 0.05 : 0.95
constexpr int kNumRecallPoints = 101;   // 0.00 : 0.01 : 1.00

double iou_threshold(int t) { return 0.5 + 0.05 * t; }

struct AreaRange {
  double lo, hi;
};

struct ClassEval {
  // Per IoU threshold: flattened detection records over all images,
  // already sorted by descending score with deterministic tie-breaks.
  // tp[t][k] in {0,1}; ignored dets are dropped before accumulation.
  std::vector<std::vector<char>> tp;
  int num_positives = 0;  // non-ignored GT
};

struct DetRef {
  double score;
  int64_t image_id;
  int index_in_image;
  int det_index;  // into the per-image detection list
};

// Evaluates one class over one area range: returns per-threshold AP
// (or nullopt when the class has no ground truth in range).
std::optional<std::vector<double>> evaluate_class(
    const std::vector<AnnotationSet>& gt,
    const std::vector<std::vector<EvalDetection>>& dets_by_image,
    const std::vector<std::vector<DetRef>>& det_order, int class_id,
    const AreaRange& range, double canvas_px_area, int max_dets) {
  // Per-image matching at every IoU threshold.
  struct ImageResult {
    std::vector<char> det_tp[kNumIouThresholds];
    std::vector<char> det_ignore[kNumIouThresholds];
  };

  int total_positives = 0;
  std::vector<ImageResult> results(gt.size());
  for (size_t im = 0; im < gt.size(); ++im) {
    std::vector<int> gt_idx;
    std::vector<char> gt_ignore;
    for (size_t k = 0; k < gt[im].instances.size(); ++k) {
      const Instance& inst = gt[im].instances[k];
      if (inst.class_id != class_id) continue;
      double area_px = inst.box.area() * canvas_px_area;
      bool ign = area_px < range.lo || area_px >= range.hi;
      gt_idx.push_back(static_cast<int>(k));
      gt_ignore.push_back(ign ? 1 : 0);
      if (!ign) ++total_positives;
    }

    const std::vector<DetRef>& order = det_order[im];
    int n_dets = std::min(static_cast<int>(order.size()), max_dets);
    for (int t = 0; t < kNumIouThresholds; ++t) {
      results[im].det_tp[t].assign(n_dets, 0);
      results[im].det_ignore[t].assign(n_dets, 0);
      double thr = iou_threshold(t);
      std::vector<char> gt_used(gt_idx.size(), 0);
      for (int d = 0; d < n_dets; ++d) {
        const EvalDetection& det =
            dets_by_image[im][order[d].det_index];
        double best_iou = thr;
        int best_g = -1;
        for (size_t g = 0; g < gt_idx.size(); ++g) {
          if (gt_used[g] && !gt_ignore[g]) continue;
          // Once matched to a real GT, do not switch to an ignored one.
          if (best_g >= 0 && !gt_ignore[best_g] && gt_ignore[g]) break;
          double v = iou(det.box, gt[im].instances[gt_idx[g]].box);
          if (v >= best_iou) {
            best_iou = v;
            best_g = static_cast<int>(g);
          }
        }
        if (best_g >= 0) {
          gt_used[best_g] = 1;
          if (gt_ignore[best_g])
            results[im].det_ignore[t][d] = 1;
          else
            results[im].det_tp[t][d] = 1;
        } else {
          double det_area = det.box.area() * canvas_px_area;
          if (det_area < range.lo || det_area >= range.hi)
            results[im].det_ignore[t][d] = 1;
        }
      }
    }
  }

  if (total_positives == 0) return std::nullopt;

  // Merge detections across images in global score order with
  // deterministic tie-breaks (image id, then per-image rank).
  struct GlobalRef {
    double score;
    int64_t image_id;
    size_t im;
    int pos;  // rank within the image's score ordering
  };
  std::vector<GlobalRef> global;
  for (size_t im = 0; im < gt.size(); ++im) {
    int n_dets = std::min(static_cast<int>(det_order[im].size()), max_dets);
    for (int d = 0; d < n_dets; ++d)
      global.push_back({det_order[im][d].score, gt[im].image_id, im, d});
  }
  std::sort(global.begin(), global.end(), [](const GlobalRef& a, const GlobalRef& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.pos < b.pos;
  });

  std::vector<double> ap_per_threshold(kNumIouThresholds, 0.0);
  for (int t = 0; t < kNumIouThresholds; ++t) {
    std::vector<double> precisions, recalls;
    int tp_cum = 0, fp_cum = 0;
    for (const GlobalRef& ref : global) {
      if (results[ref.im].det_ignore[t][ref.pos]) continue;
      if (results[ref.im].det_tp[t][ref.pos])
        ++tp_cum;
      else
        ++fp_cum;
      precisions.push_back(static_cast<double>(tp_cum) / (tp_cum + fp_cum));
      recalls.push_back(static_cast<double>(tp_cum) / total_positives);
    }
    // Precision envelope (monotone non-increasing from the right).
    for (int k = static_cast<int>(precisions.size()) - 2; k >= 0; --k)
      precisions[k] = std::max(precisions[k], precisions[k + 1]);
    double ap_sum = 0.0;
    size_t ptr = 0;
    for (int r = 0; r < kNumRecallPoints; ++r) {
      double rec = r / 100.0;
      while (ptr < recalls.size() && recalls[ptr] < rec - 1e-12) ++ptr;
      if (ptr < precisions.size()) ap_sum += precisions[ptr];
    }
    ap_per_threshold[t] = ap_sum / kNumRecallPoints;
  }
  return ap_per_threshold;
}

}  // namespace

EvalReport compute_ap(const std::vector<AnnotationSet>& ground_truth,
                      const std::vector<EvalDetection>& detections,
                      const std::vector<int>& class_ids,
                      const EvalParams& params) {
  const double canvas_px_area =
      static_cast<double>(params.canvas) * params.canvas;
  const double scale = params.area_scale();
  const double small_hi = 32.0 * 32.0 * scale;
  const double medium_hi = 96.0 * 96.0 * scale;
  const double inf = std::numeric_limits<double>::infinity();
  const AreaRange all{0.0, inf};
  const AreaRange small{0.0, small_hi};
  const AreaRange medium{small_hi, medium_hi};
  const AreaRange large{medium_hi, inf};

  // Group detections by image, preserving input order for tie-breaks.
  std::map<int64_t, size_t> image_index;
  for (size_t im = 0; im < ground_truth.size(); ++im)
    image_index[ground_truth[im].image_id] = im;
  std::vector<std::vector<EvalDetection>> dets_by_image(ground_truth.size());
  for (const EvalDetection& det : detections) {
    auto it = image_index.find(det.image_id);
    if (it == image_index.end()) continue;  // detections on unknown images are dropped
    dets_by_image[it->second].push_back(det);
  }

  auto order_for_class = [&](int class_id) {
    std::vector<std::vector<DetRef>> order(ground_truth.size());
    for (size_t im = 0; im < dets_by_image.size(); ++im) {
      for (size_t k = 0; k < dets_by_image[im].size(); ++k) {
        if (dets_by_image[im][k].class_id != class_id) continue;
        order[im].push_back({dets_by_image[im][k].score,
                             ground_truth[im].image_id, static_cast<int>(k),
                             static_cast<int>(k)});
      }
      std::stable_sort(order[im].begin(), order[im].end(),
                       [](const DetRef& a, const DetRef& b) {
                         return a.score > b.score;
                       });
    }
    return order;
  };

  struct Accum {
    double sum = 0;
    int count = 0;
    void add(double v) {
      sum += v;
      ++count;
    }
    double mean() const { return count > 0 ? sum / count : -1.0; }
  };
  Accum acc_ap, acc50, acc75, acc_s, acc_m, acc_l;
  EvalReport report;

  for (int cid : class_ids) {
    auto order = order_for_class(cid);
    auto main = evaluate_class(ground_truth, dets_by_image, order, cid, all,
                               canvas_px_area, params.max_dets_per_image);
    if (main) {
      double mean_t = 0;
      for (double v : *main) mean_t += v;
      mean_t /= kNumIouThresholds;
      acc_ap.add(mean_t);
      acc50.add((*main)[0]);
      acc75.add((*main)[5]);
      report.per_class_ap[cid] = mean_t;
    }
    auto s = evaluate_class(ground_truth, dets_by_image, order, cid, small,
                            canvas_px_area, params.max_dets_per_image);
    if (s) {
      double m = 0;
      for (double v : *s) m += v;
      acc_s.add(m / kNumIouThresholds);
    }
    auto me = evaluate_class(ground_truth, dets_by_image, order, cid, medium,
                             canvas_px_area, params.max_dets_per_image);
    if (me) {
      double m = 0;
      for (double v : *me) m += v;
      acc_m.add(m / kNumIouThresholds);
    }
    auto la = evaluate_class(ground_truth, dets_by_image, order, cid, large,
                             canvas_px_area, params.max_dets_per_image);
    if (la) {
      double m = 0;
      for (double v : *la) m += v;
      acc_l.add(m / kNumIouThresholds);
    }
  }

  report.ap = acc_ap.mean();
  report.ap50 = acc50.mean();
  report.ap75 = acc75.mean();
  report.ap_small = acc_s.mean();
  report.ap_medium = acc_m.mean();
  report.ap_large = acc_l.mean();
  return report;
}

EvalReport subset_report(const std::vector<AnnotationSet>& ground_truth,
                         const std::vector<EvalDetection>& detections,
                         const std::set<int>& subset, const EvalParams& params,
                         const std::string& subset_name) {
  if (subset.empty()) throw ConfigError("subset_report: empty class subset");
  std::vector<AnnotationSet> gt_filtered;
  gt_filtered.reserve(ground_truth.size());
  for (const AnnotationSet& a : ground_truth) {
    AnnotationSet f = a;
    f.instances.clear();
    for (const Instance& inst : a.instances)
      if (subset.count(inst.class_id)) f.instances.push_back(inst);
    gt_filtered.push_back(std::move(f));
  }
  std::vector<EvalDetection> det_filtered;
  for (const EvalDetection& d : detections)
    if (subset.count(d.class_id)) det_filtered.push_back(d);
  std::vector<int> class_ids(subset.begin(), subset.end());
  EvalReport r = compute_ap(gt_filtered, det_filtered, class_ids, params);
  r.subset = subset_name;
  return r;
}

double fpp(double ap_old_at_first_phase, double ap_old_at_final_phase) {
  return ap_old_at_first_phase - ap_old_at_final_phase;
}

std::vector<std::pair<double, double>> precision_recall_curve(
    const std::vector<AnnotationSet>& ground_truth,
    const std::vector<EvalDetection>& detections, int class_id,
    const EvalParams& params) {
  struct Entry {
    double score;
    bool tp;
    int64_t image_id;
    int idx;
  };
  int positives = 0;
  std::map<int64_t, std::vector<const Instance*>> gt_by_image;
  for (const AnnotationSet& a : ground_truth)
    for (const Instance& inst : a.instances)
      if (inst.class_id == class_id) {
        gt_by_image[a.image_id].push_back(&inst);
        ++positives;
      }
  std::vector<Entry> entries;
  std::map<int64_t, std::vector<int>> dets_by_image;
  for (size_t k = 0; k < detections.size(); ++k)
    if (detections[k].class_id == class_id)
      dets_by_image[detections[k].image_id].push_back(static_cast<int>(k));
  for (auto& [image_id, idxs] : dets_by_image) {
    std::stable_sort(idxs.begin(), idxs.end(), [&](int a, int b) {
      return detections[a].score > detections[b].score;
    });
    auto git = gt_by_image.find(image_id);
    std::vector<char> used(git != gt_by_image.end() ? git->second.size() : 0, 0);
    int count = 0;
    for (int k : idxs) {
      if (count++ >= params.max_dets_per_image) break;
      double best = 0.5;
      int best_g = -1;
      if (git != gt_by_image.end())
        for (size_t g = 0; g < git->second.size(); ++g) {
          if (used[g]) continue;
          double v = iou(detections[k].box, git->second[g]->box);
          if (v >= best) {
            best = v;
            best_g = static_cast<int>(g);
          }
        }
      if (best_g >= 0) used[best_g] = 1;
      entries.push_back({detections[k].score, best_g >= 0, image_id, k});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.idx < b.idx;
  });
  std::vector<std::pair<double, double>> curve;
  int tp = 0, fp = 0;
  for (const Entry& e : entries) {
    if (e.tp)
      ++tp;
    else
      ++fp;
    double recall = positives > 0 ? static_cast<double>(tp) / positives : 0.0;
    curve.push_back({recall, static_cast<double>(tp) / (tp + fp)});
  }
  return curve;
}

}  // namespace cidet
