#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cidet/continual.hpp"
#include "cidet/rng.hpp"

using namespace cidet;
using nn::Mat;

namespace {

DetectorOutput output_from(const std::vector<Mat>& logits,
                           const std::vector<Mat>& boxes, int num_classes) {
  DetectorOutput o;
  o.layers = static_cast<int>(logits.size());
  o.queries = logits[0].rows;
  o.num_classes = num_classes;
  for (size_t l = 0; l < logits.size(); ++l) {
    Mat s = logits[l];
    nn::softmax_rows(s);
    o.logits.push_back(logits[l]);
    o.scores.push_back(s);
    o.boxes.push_back(boxes[l]);
  }
  return o;
}

DetectorOutput random_output(int layers, int queries, int num_classes,
                             uint64_t seed) {
  Rng rng(seed);
  std::vector<Mat> logits, boxes;
  for (int l = 0; l < layers; ++l) {
    Mat lg(queries, num_classes + 1), bx(queries, 4);
    for (double& v : lg.v) v = rng.uniform(-2, 2);
    for (double& v : bx.v) v = rng.uniform(0.1, 0.9);
    logits.push_back(lg);
    boxes.push_back(bx);
  }
  return output_from(logits, boxes, num_classes);
}

// The 3-query fixture shared with predict: row argmax/score
// (class0, 0.70), (background, 0.70), (class1, 0.31).
DetectorOutput pseudo_fixture() {
  DetectorOutput o;
  o.layers = 1;
  o.queries = 3;
  o.num_classes = 2;
  Mat scores(3, 3);
  scores.at(0, 0) = 0.70; scores.at(0, 1) = 0.05; scores.at(0, 2) = 0.25;
  scores.at(1, 0) = 0.10; scores.at(1, 1) = 0.20; scores.at(1, 2) = 0.70;
  scores.at(2, 0) = 0.05; scores.at(2, 1) = 0.31; scores.at(2, 2) = 0.10;
  Mat boxes(3, 4);
  for (int q = 0; q < 3; ++q) {
    boxes.at(q, 0) = 0.3 + 0.2 * q;
    boxes.at(q, 1) = 0.5;
    boxes.at(q, 2) = 0.2;
    boxes.at(q, 3) = 0.2;
  }
  o.scores.push_back(scores);
  o.logits.push_back(scores);
  o.boxes.push_back(boxes);
  return o;
}

}  // namespace

TEST_CASE("pseudo_label: fixture thresholds and boundary rule") {
  std::set<int> old_classes{0, 1};
  DetectorOutput out = pseudo_fixture();

  CHECK(pseudo_label(out, 0.3, old_classes).labels.size() == 2);

  PseudoLabelSet one = pseudo_label(out, 0.65, old_classes);
  REQUIRE(one.labels.size() == 1);  // the 0.31 row is excluded
  CHECK(one.labels[0].class_id == 0);
  CHECK(one.labels[0].score == doctest::Approx(0.70));

  // inclusive boundary: a score exactly at the threshold passes
  CHECK(pseudo_label(out, 0.31, old_classes).labels.size() == 2);

  // all-background output gives an empty set
  DetectorOutput bg;
  bg.layers = 1;
  bg.queries = 2;
  bg.num_classes = 2;
  Mat s(2, 3);
  s.at(0, 2) = 0.9; s.at(0, 0) = 0.05; s.at(0, 1) = 0.05;
  s.at(1, 2) = 0.8; s.at(1, 0) = 0.1; s.at(1, 1) = 0.1;
  bg.scores.push_back(s);
  bg.logits.push_back(s);
  Mat b(2, 4);
  for (double& v : b.v) v = 0.4;
  bg.boxes.push_back(b);
  CHECK(pseudo_label(bg, 0.3, old_classes).labels.empty());

  // classes outside old_classes are skipped
  CHECK(pseudo_label(out, 0.3, std::set<int>{0}).labels.size() == 1);

  CHECK_THROWS_AS(pseudo_label(out, 0.0, old_classes), ConfigError);
  CHECK_THROWS_AS(pseudo_label(out, 1.0, old_classes), ConfigError);
}

TEST_CASE("pseudo_label output is permutation-invariant up to reordering") {
  DetectorOutput out = pseudo_fixture();
  DetectorOutput swapped = out;
  // swap rows 0 and 2 in both scores and boxes
  for (int j = 0; j < 3; ++j)
    std::swap(swapped.scores[0].at(0, j), swapped.scores[0].at(2, j));
  for (int j = 0; j < 4; ++j)
    std::swap(swapped.boxes[0].at(0, j), swapped.boxes[0].at(2, j));

  auto a = pseudo_label(out, 0.3, {0, 1}).labels;
  auto b = pseudo_label(swapped, 0.3, {0, 1}).labels;
  REQUIRE(a.size() == b.size());
  auto key = [](const PseudoLabel& p) {
    return std::make_tuple(p.class_id, p.score, p.box.x_min);
  };
  std::sort(a.begin(), a.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  std::sort(b.begin(), b.end(), [&](auto& x, auto& y) { return key(x) < key(y); });
  for (size_t i = 0; i < a.size(); ++i) CHECK(key(a[i]) == key(b[i]));
}

TEST_CASE("merge_labels") {
  std::set<int> new_classes{8, 9};
  AnnotationSet gt;
  gt.image_id = 3;
  gt.instances.push_back({8, Box{0.1, 0.1, 0.3, 0.3}});
  gt.instances.push_back({9, Box{0.6, 0.6, 0.8, 0.8}});

  PseudoLabelSet empty;
  MergedTargets same = merge_labels(gt, empty, new_classes);
  CHECK(same.merged.instances.size() == 2);
  CHECK(same.pseudo_count == 0);

  PseudoLabelSet two;
  two.labels.push_back({0, Box{0.2, 0.2, 0.4, 0.4}, 0.9});
  two.labels.push_back({1, Box{0.1, 0.1, 0.3, 0.3}, 0.8});  // overlaps GT box
  MergedTargets merged = merge_labels(gt, two, new_classes);
  CHECK(merged.merged.instances.size() == 4);
  CHECK(merged.gt_count == 2);
  CHECK(merged.pseudo_count == 2);
  // both the overlapping pseudo and the GT instance are retained
  int count_at_gt_box = 0;
  for (const Instance& inst : merged.merged.instances)
    if (inst.box.x_min == 0.1 && inst.box.x_max == 0.3) ++count_at_gt_box;
  CHECK(count_at_gt_box == 2);

  PseudoLabelSet bad;
  bad.labels.push_back({8, Box{0.2, 0.2, 0.4, 0.4}, 0.9});
  CHECK_THROWS_AS(merge_labels(gt, bad, new_classes), ValidationError);

  AnnotationSet bad_gt = gt;
  bad_gt.instances.push_back({0, Box{0.4, 0.4, 0.6, 0.6}});
  CHECK_THROWS_AS(merge_labels(bad_gt, empty, new_classes), ValidationError);
}

TEST_CASE("l2 distillation losses: trivial values and double-loop oracle") {
  Mat a(5, 4), b(5, 4);
  Rng rng(6);
  for (double& v : a.v) v = rng.uniform(-1, 1);

  CHECK(l2_cls_distill(a, a) == 0.0);
  CHECK(l2_reg_distill(a, a) == 0.0);

  for (size_t i = 0; i < b.v.size(); ++i) b.v[i] = a.v[i] + 1.0;
  CHECK(l2_cls_distill(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  for (size_t i = 0; i < b.v.size(); ++i) b.v[i] = a.v[i] + 0.5;
  CHECK(l2_reg_distill(a, b) == doctest::Approx(0.25).epsilon(1e-15));

  for (double& v : b.v) v = rng.uniform(-1, 1);
  double oracle = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) {
      double d = a.at(i, j) - b.at(i, j);
      oracle += d * d;
    }
  oracle /= 20.0;
  CHECK(l2_cls_distill(a, b) == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(l2_cls_distill(a, b) == l2_cls_distill(b, a));  // symmetry

  Mat wrong(4, 4);
  CHECK_THROWS_AS(l2_cls_distill(a, wrong), ConfigError);
}

TEST_CASE("total distill composition: lambda(alpha Lcls + beta Lreg)") {
  // L_cls = 0.1, L_reg = 0.2, lambda = 2, alpha = 2, beta = 5 -> 2.4
  DistillationConfig cfg;
  CHECK(cfg.lambda * (cfg.cls_weight * 0.1 + cfg.reg_weight * 0.2) ==
        doctest::Approx(2.4));

  DetectorOutput a = random_output(3, 4, 3, 1);
  CHECK(total_distill_loss(a, a, cfg).total == doctest::Approx(0.0));

  DetectorOutput b = random_output(3, 4, 3, 2);
  DistillBreakdown d = total_distill_loss(a, b, cfg);
  // layered oracle: recompute per layer and aggregate
  double cls = 0, reg = 0;
  for (int l = 0; l < 3; ++l) {
    cls += l2_cls_distill(a.scores[l], b.scores[l]);
    reg += l2_reg_distill(a.boxes[l], b.boxes[l]);
  }
  cls /= 3;
  reg /= 3;
  CHECK(d.cls == doctest::Approx(cls).epsilon(1e-12));
  CHECK(d.reg == doctest::Approx(reg).epsilon(1e-12));
  CHECK(d.total == doctest::Approx(2.0 * (2.0 * cls + 5.0 * reg)).epsilon(1e-9));

  DistillationConfig sum_cfg = cfg;
  sum_cfg.layer_agg = DistillationConfig::LayerAgg::sum;
  DistillBreakdown ds = total_distill_loss(a, b, sum_cfg);
  CHECK(ds.cls == doctest::Approx(cls * 3).epsilon(1e-12));

  DetectorOutput wrong = random_output(2, 4, 3, 3);
  CHECK_THROWS_AS(total_distill_loss(a, wrong, cfg), ConfigError);
}

TEST_CASE("distill gradient matches closed form and finite differences") {
  DistillationConfig cfg;
  Rng rng(0xd15);
  for (int trial = 0; trial < 100; ++trial) {
    const int L = 2, Q = 3, C = 2;
    DetectorOutput nw = random_output(L, Q, C, 1000 + trial);
    DetectorOutput od = random_output(L, Q, C, 2000 + trial);

    std::vector<Mat> dlogits, dboxes;
    total_distill_with_grads(nw, od, cfg, dlogits, dboxes);

    // Closed form for the reg part: 2*lambda*beta*(B_new - B_old)/(Q*4)/L.
    for (int l = 0; l < L; ++l)
      for (size_t i = 0; i < dboxes[l].v.size(); ++i) {
        double expect = 2.0 * cfg.lambda * cfg.reg_weight *
                        (nw.boxes[l].v[i] - od.boxes[l].v[i]) /
                        (Q * 4.0) / L;
        CHECK(dboxes[l].v[i] == doctest::Approx(expect).epsilon(1e-9));
      }

    // Finite differences through the logits (the training input space).
    const double eps = 1e-6;
    int l = static_cast<int>(rng.uniform_int(L));
    int idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(Q * (C + 1))));
    auto perturbed = [&](double delta) {
      DetectorOutput p = nw;
      p.logits[l].v[idx] += delta;
      Mat s = p.logits[l];
      nn::softmax_rows(s);
      p.scores[l] = s;
      return total_distill_loss(p, od, cfg).total;
    };
    double fd = (perturbed(eps) - perturbed(-eps)) / (2 * eps);
    double an = dlogits[l].v[idx];
    CHECK(std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)) < 1e-6);
  }
}

TEST_CASE("distillation on the old-column slice is zero right after widening") {
  // Old model: 2 classes. New model mimics head widening: identical
  // old-class and background logits, extra class columns in between.
  const int L = 2, Q = 3, c_old = 2, c_new = 4;
  DetectorOutput od = random_output(L, Q, c_old, 42);
  DetectorOutput nw;
  nw.layers = L;
  nw.queries = Q;
  nw.num_classes = c_new;
  Rng rng(77);
  for (int l = 0; l < L; ++l) {
    Mat wide(Q, c_new + 1);
    for (int q = 0; q < Q; ++q) {
      for (int j = 0; j < c_old; ++j) wide.at(q, j) = od.logits[l].at(q, j);
      for (int j = c_old; j < c_new; ++j) wide.at(q, j) = rng.uniform(-2, 2);
      wide.at(q, c_new) = od.logits[l].at(q, c_old);  // background last
    }
    Mat s = wide;
    nn::softmax_rows(s);
    nw.logits.push_back(wide);
    nw.scores.push_back(s);
    nw.boxes.push_back(od.boxes[l]);
  }
  DistillationConfig cfg;
  DistillBreakdown d = total_distill_loss(nw, od, cfg);
  CHECK(d.cls == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(d.reg == doctest::Approx(0.0));
  CHECK(d.total == doctest::Approx(0.0));

  DistillationConfig logit_cfg;
  logit_cfg.compare = DistillationConfig::CompareSpace::logits;
  CHECK(total_distill_loss(nw, od, logit_cfg).total == doctest::Approx(0.0));
}
