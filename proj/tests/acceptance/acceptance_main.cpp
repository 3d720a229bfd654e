// Acceptance suite: one pass/fail line per criterion, nonzero exit when
// any criterion fails. The experiment criteria share cached phase-1
// checkpoints per seed and run cells on a small worker pool.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "cidet/config.hpp"
#include "cidet/continual.hpp"
#include "cidet/generator.hpp"
#include "cidet/refiner.hpp"
#include "cidet/trainer.hpp"

using namespace cidet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what,
            const std::string& detail = "") {
  std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", criterion,
              what.c_str(), detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Criterion 1: oracle equivalence

double giou_oracle(const Box& a, const Box& b) {
  auto seg = [](double a0, double a1, double b0, double b1) {
    double lo = std::max(a0, b0), hi = std::min(a1, b1);
    return hi > lo ? hi - lo : 0.0;
  };
  double inter = seg(a.x_min, a.x_max, b.x_min, b.x_max) *
                 seg(a.y_min, a.y_max, b.y_min, b.y_max);
  double uni = a.area() + b.area() - inter;
  double hull = (std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min)) *
                (std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min));
  return inter / uni - (hull - uni) / hull;
}

Box random_box(Rng& rng) {
  double x0 = rng.uniform(0.0, 0.7), y0 = rng.uniform(0.0, 0.7);
  return {x0, y0, x0 + rng.uniform(0.05, 0.3), y0 + rng.uniform(0.05, 0.3)};
}

bool check_hungarian() {
  Rng rng(1001);
  MatchWeights w;
  for (int trial = 0; trial < 500; ++trial) {
    int q = 2 + static_cast<int>(rng.uniform_int(7));
    int t = 1 + static_cast<int>(rng.uniform_int(
                    std::min<uint64_t>(6, static_cast<uint64_t>(q))));
    nn::Mat scores(q, 5), boxes(q, 4);
    for (double& v : scores.v) v = rng.uniform();
    for (double& v : boxes.v) v = rng.uniform(0.1, 0.9);
    AnnotationSet targets;
    for (int k = 0; k < t; ++k)
      targets.instances.push_back(
          {static_cast<int>(rng.uniform_int(4)), random_box(rng)});

    auto pair_cost = [&](int tt, int qq) {
      const Instance& tgt = targets.instances[tt];
      double tb[4];
      box_to_cxcywh(tgt.box, tb);
      double l1 = 0;
      for (int c = 0; c < 4; ++c) l1 += std::abs(boxes.at(qq, c) - tb[c]);
      return w.w_cls * (1.0 - scores.at(qq, tgt.class_id)) + w.w_l1 * l1 +
             w.w_giou * (1.0 - giou(box_from_cxcywh(boxes.row(qq)), tgt.box));
    };

    MatchResult m = hungarian_match(scores, boxes, targets, w);
    double got = 0;
    for (auto& [qq, tt] : m.pairs) got += pair_cost(tt, qq);

    // exhaustive minimum over ordered query subsets
    std::vector<int> perm(q);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double total = 0;
      for (int tt = 0; tt < t; ++tt) total += pair_cost(tt, perm[tt]);
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    if (std::abs(got - best) > 1e-9) return false;
  }
  return true;
}

bool check_giou() {
  if (std::abs(giou(Box{0, 0, 0.5, 0.5}, Box{0.5, 0.5, 1, 1}) - (-0.5)) > 1e-12)
    return false;
  Rng rng(1002);
  for (int i = 0; i < 1000; ++i) {
    Box a = random_box(rng), b = random_box(rng);
    if (std::abs(giou(a, b) - giou_oracle(a, b)) > 1e-12) return false;
  }
  return true;
}

bool check_distill_oracles() {
  Rng rng(1003);
  for (int trial = 0; trial < 50; ++trial) {
    nn::Mat a(7, 5), b(7, 5);
    for (double& v : a.v) v = rng.uniform(-1, 1);
    for (double& v : b.v) v = rng.uniform(-1, 1);
    double oracle = 0;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 5; ++j) {
        double d = a.at(i, j) - b.at(i, j);
        oracle += d * d;
      }
    oracle /= 35.0;
    if (std::abs(l2_cls_distill(a, b) - oracle) > 1e-12) return false;

    nn::Mat ra(7, 4), rb(7, 4);
    for (double& v : ra.v) v = rng.uniform(0, 1);
    for (double& v : rb.v) v = rng.uniform(0, 1);
    double roracle = 0;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 4; ++j) {
        double d = ra.at(i, j) - rb.at(i, j);
        roracle += d * d;
      }
    roracle /= 28.0;
    if (std::abs(l2_reg_distill(ra, rb) - roracle) > 1e-12) return false;
  }
  // Composition: lambda=2, alpha=2, beta=5 with L_cls=0.1, L_reg=0.2 -> 2.4
  DistillationConfig cfg;
  double composed = cfg.lambda * (cfg.cls_weight * 0.1 + cfg.reg_weight * 0.2);
  return std::abs(composed - 2.4) < 1e-12;
}

// Same exhaustive tiny-case AP oracle as the unit suite.
double oracle_ap_single_class(const std::vector<AnnotationSet>& gt,
                              const std::vector<EvalDetection>& dets,
                              double iou_thr) {
  struct Rec {
    double score;
    bool tp;
    int64_t image;
    int order;
  };
  std::vector<Rec> recs;
  int positives = 0;
  for (const AnnotationSet& a : gt) positives += a.instances.size();
  for (const AnnotationSet& a : gt) {
    std::vector<const EvalDetection*> mine;
    for (const EvalDetection& d : dets)
      if (d.image_id == a.image_id) mine.push_back(&d);
    std::stable_sort(mine.begin(), mine.end(),
                     [](auto* x, auto* y) { return x->score > y->score; });
    std::vector<bool> used(a.instances.size(), false);
    int order = 0;
    for (const EvalDetection* d : mine) {
      double best = iou_thr;
      int best_g = -1;
      for (size_t g = 0; g < a.instances.size(); ++g) {
        if (used[g]) continue;
        double v = iou(d->box, a.instances[g].box);
        if (v >= best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0) used[best_g] = true;
      recs.push_back({d->score, best_g >= 0, a.image_id, order++});
    }
  }
  if (positives == 0) return -1;
  std::sort(recs.begin(), recs.end(), [](const Rec& a, const Rec& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.order < b.order;
  });
  std::vector<double> prec, rec;
  int tp = 0, fp = 0;
  for (const Rec& r : recs) {
    r.tp ? ++tp : ++fp;
    prec.push_back(double(tp) / (tp + fp));
    rec.push_back(double(tp) / positives);
  }
  for (int i = int(prec.size()) - 2; i >= 0; --i)
    prec[i] = std::max(prec[i], prec[i + 1]);
  double sum = 0;
  for (int r101 = 0; r101 <= 100; ++r101) {
    double want = r101 / 100.0;
    for (size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= want - 1e-12) {
        sum += prec[i];
        break;
      }
  }
  return sum / 101.0;
}

bool check_ap_engine() {
  EvalParams params;
  // trivial cases
  std::vector<AnnotationSet> gt(1);
  gt[0].image_id = 1;
  gt[0].instances.push_back({0, Box{0.2, 0.2, 0.6, 0.6}});
  std::vector<EvalDetection> perfect{{1, 0, Box{0.2, 0.2, 0.6, 0.6}, 0.9}};
  if (std::abs(compute_ap(gt, perfect, {0}, params).ap - 1.0) > 1e-12) return false;
  if (std::abs(compute_ap(gt, {}, {0}, params).ap) > 1e-12) return false;

  Rng rng(1004);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<AnnotationSet> g;
    std::vector<EvalDetection> dets;
    int n_images = 1 + static_cast<int>(rng.uniform_int(2));
    for (int im = 0; im < n_images; ++im) {
      AnnotationSet a;
      a.image_id = im + 1;
      g.push_back(a);
    }
    int total_gt = 1 + static_cast<int>(rng.uniform_int(3));
    int total_det = static_cast<int>(rng.uniform_int(5));
    for (int k = 0; k < total_gt; ++k)
      g[rng.uniform_int(n_images)].instances.push_back({0, random_box(rng)});
    for (int k = 0; k < total_det; ++k)
      dets.push_back({static_cast<int64_t>(rng.uniform_int(n_images)) + 1, 0,
                      random_box(rng), rng.uniform()});
    EvalReport got = compute_ap(g, dets, {0}, params);
    double mean = 0;
    for (int t = 0; t < 10; ++t)
      mean += oracle_ap_single_class(g, dets, 0.5 + 0.05 * t);
    mean /= 10;
    if (std::abs(got.ap - mean) > 1e-12) return false;
  }
  return true;
}

bool check_fpp() {
  return std::abs(fpp(43.4, 0.0) - 43.4) < 1e-12 &&
         std::abs(fpp(43.4, 41.5) - 1.9) < 1e-12;
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient checks

bool check_distill_gradient() {
  DistillationConfig cfg;
  Rng rng(2001);
  for (int trial = 0; trial < 100; ++trial) {
    const int L = 2, Q = 3, C = 2;
    auto rand_out = [&](uint64_t seed) {
      Rng r(seed);
      DetectorOutput o;
      o.layers = L;
      o.queries = Q;
      o.num_classes = C;
      for (int l = 0; l < L; ++l) {
        nn::Mat lg(Q, C + 1), bx(Q, 4);
        for (double& v : lg.v) v = r.uniform(-2, 2);
        for (double& v : bx.v) v = r.uniform(0.1, 0.9);
        nn::Mat s = lg;
        nn::softmax_rows(s);
        o.logits.push_back(lg);
        o.scores.push_back(s);
        o.boxes.push_back(bx);
      }
      return o;
    };
    DetectorOutput nw = rand_out(3000 + trial), od = rand_out(4000 + trial);
    std::vector<nn::Mat> dlogits, dboxes;
    total_distill_with_grads(nw, od, cfg, dlogits, dboxes);

    const double eps = 1e-6;
    // box output entry
    {
      int l = static_cast<int>(rng.uniform_int(L));
      int i = static_cast<int>(rng.uniform_int(Q * 4));
      DetectorOutput p = nw, m = nw;
      p.boxes[l].v[i] += eps;
      m.boxes[l].v[i] -= eps;
      double fd = (total_distill_loss(p, od, cfg).total -
                   total_distill_loss(m, od, cfg).total) /
                  (2 * eps);
      double an = dboxes[l].v[i];
      if (std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)) > 1e-6)
        return false;
    }
    // logit entry (scores recomputed from perturbed logits)
    {
      int l = static_cast<int>(rng.uniform_int(L));
      int i = static_cast<int>(rng.uniform_int(Q * (C + 1)));
      auto loss_at = [&](double delta) {
        DetectorOutput p = nw;
        p.logits[l].v[i] += delta;
        nn::Mat s = p.logits[l];
        nn::softmax_rows(s);
        p.scores[l] = s;
        return total_distill_loss(p, od, cfg).total;
      };
      double fd = (loss_at(eps) - loss_at(-eps)) / (2 * eps);
      double an = dlogits[l].v[i];
      if (std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)) > 1e-6)
        return false;
    }
  }
  return true;
}

bool check_detr_param_gradient() {
  DetectorConfig cfg;
  cfg.num_queries = 3;
  cfg.num_decoder_layers = 2;
  cfg.num_encoder_layers = 1;
  cfg.num_classes = 3;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.patch = 8;
  cfg.canvas = 16;
  DetectorModel model = DetectorModel::init(cfg, 77);
  ImageRecord img;
  img.image_id = 1;
  img.height = img.width = 16;
  img.channels = 3;
  img.pixels.resize(16 * 16 * 3);
  Rng rng(2002);
  for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
  AnnotationSet targets;
  targets.instances.push_back({0, Box{0.1, 0.1, 0.5, 0.5}});
  targets.instances.push_back({2, Box{0.55, 0.5, 0.9, 0.95}});
  MatchWeights w;

  // Warmup so the assignment is stable around the probe point.
  {
    nn::Adam warm(model.params(), 1e-3);
    for (int step = 0; step < 150; ++step) {
      warm.zero_grad();
      DetectorModel::ForwardCache c;
      DetectorOutput o = model.forward(img, c);
      std::vector<nn::Mat> dl, db;
      detr_loss_with_grads(o, targets, w, 0.1, dl, db);
      model.backward(c, dl, db);
      warm.step();
    }
    for (nn::Param* p : model.params()) p->grad.zero();
  }

  DetectorModel::ForwardCache cache;
  DetectorOutput out = model.forward(img, cache);
  std::vector<nn::Mat> dl, db;
  detr_loss_with_grads(out, targets, w, 0.1, dl, db);
  model.backward(cache, dl, db);

  auto loss_at = [&]() {
    return detr_loss(model.forward(img), targets, w, 0.1).total;
  };
  auto params = model.params();
  const double eps = 1e-6;
  int checked = 0;
  for (size_t k = 0; k < params.size() && checked < 10; k += 5) {
    size_t i = params[k]->value.size() / 2;
    double saved = params[k]->value.v[i];
    params[k]->value.v[i] = saved + eps;
    double lp = loss_at();
    params[k]->value.v[i] = saved - eps;
    double lm = loss_at();
    params[k]->value.v[i] = saved;
    double fd = (lp - lm) / (2 * eps);
    double an = params[k]->grad.v[i];
    double rel =
        std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
    if (rel > 1e-3) return false;
    ++checked;
  }
  return checked == 10;
}

// ---------------------------------------------------------------------------
// Criterion 3: refiner schedule contract

class AlwaysScorer : public DetectionScorer {
 public:
  std::vector<Detection> score(const ImageRecord& image,
                               double threshold) const override {
    std::vector<Detection> out;
    for (const Instance& inst : image.annotation.instances)
      if (threshold <= 0.99) out.push_back({inst.class_id, inst.box, 0.99});
    return out;
  }
};

class NeverScorer : public DetectionScorer {
 public:
  std::vector<Detection> score(const ImageRecord&, double) const override {
    return {};
  }
};

class CapturingGenerator : public Generator {
 public:
  mutable std::vector<GenerationRequest> requests;
  std::vector<GeneratedSample> generate(const GenerationRequest& req) const override {
    requests.push_back(req);
    ProceduralGenerator inner(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
    return inner.generate(req);
  }
};

bool check_refiner_contract(std::string& detail) {
  std::vector<ClassId> catalog{{0, "person"}, {1, "boat"}};
  std::vector<AnnotationSet> annotations;
  for (int i = 0; i < 4; ++i) {
    AnnotationSet a;
    a.image_id = i + 1;
    a.instances.push_back({i % 2, Box{0.2, 0.2, 0.5, 0.5}});
    annotations.push_back(a);
  }
  RefinerConfig cfg;
  cfg.quota = 3;
  cfg.fallback_budget_factor = 2;

  // Never-accepting: the visited thresholds are exactly the 0.05 ladder.
  CapturingGenerator gen;
  NeverScorer never;
  RefinementResult r =
      run_refinement(annotations, gen, never, cfg, {0, 1}, catalog, {}, 55);
  const double expected[] = {0.80, 0.75, 0.70, 0.65, 0.60, 0.55, 0.50, 0.45, 0.40};
  if (r.state.visited_thresholds.size() != 9) {
    detail = "visited " + std::to_string(r.state.visited_thresholds.size()) +
             " thresholds";
    return false;
  }
  for (int i = 0; i < 9; ++i)
    if (std::abs(r.state.visited_thresholds[i] - expected[i]) > 1e-12) {
      detail = "threshold ladder mismatch";
      return false;
    }
  if (r.state.fallback_classes != std::set<int>({0, 1})) {
    detail = "fallback did not fire for every class";
    return false;
  }
  // class-specific fallback requests carry the fixed grounding box
  bool saw_fallback = false;
  for (const GenerationRequest& req : gen.requests) {
    if (req.grounding.entities.size() == 1) {
      const Box& b = req.grounding.entities[0].box;
      if (b.x_min == 0.3 && b.y_min == 0.3 && b.x_max == 0.6 && b.y_max == 0.6) {
        saw_fallback = true;
      }
    }
  }
  if (!saw_fallback) {
    detail = "no fallback request with box [0.3,0.3,0.6,0.6]";
    return false;
  }

  // Always-accepting: terminates in cycle 1 with all counts >= N.
  AlwaysScorer always;
  ProceduralGenerator pgen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  RefinementResult ok =
      run_refinement(annotations, pgen, always, cfg, {0, 1}, catalog, {}, 56);
  if (ok.state.visited_thresholds.size() != 1 ||
      std::abs(ok.state.visited_thresholds[0] - 0.8) > 1e-12) {
    detail = "always-accepting stub did not finish in cycle 1";
    return false;
  }
  for (int c : {0, 1})
    if (ok.state.accepted_counts.at(c) < cfg.quota) {
      detail = "quota not reached in cycle 1";
      return false;
    }
  return true;
}

// ---------------------------------------------------------------------------
// Criteria 4-7: desk-scale experiments

struct RunSummary {
  double ap_all = -1;
  double ap_old = -1;
  double fpp_v = 0;
  double wall = 0;
  std::vector<double> phase_ap_all;  // per phase
};

Config acceptance_config() {
  Config cfg;
  cfg.set("world.classes", 12);
  cfg.set("world.train_images", 240);
  cfg.set("world.eval_images", 60);
  cfg.set("world.seed", 4242);
  cfg.set("train.epochs", 40);
  cfg.set("train.batch", 8);
  cfg.set("train.lr", 1e-3);
  cfg.set("refiner.quota", 10);
  cfg.set("pseudo.cache", "phase");
  return cfg;
}

RunSummary summarize(const ScenarioResult& r) {
  RunSummary s;
  const PhaseResult& fin = r.phases.back();
  s.ap_all = report_scale(fin.all.ap);
  s.ap_old = fin.old_report ? report_scale(fin.old_report->ap) : -1;
  s.fpp_v = r.fpp_value;
  s.wall = r.total_wall_time_s;
  for (const PhaseResult& p : r.phases) s.phase_ap_all.push_back(report_scale(p.all.ap));
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  std::string bin;
  std::string out_root = "acceptance_out";
  for (int i = 1; i + 1 < argc; i += 2) {
    if (std::string(argv[i]) == "--bin") bin = argv[i + 1];
    if (std::string(argv[i]) == "--out") out_root = argv[i + 1];
  }
  fs::remove_all(out_root);
  fs::create_directories(out_root);

  // ---- criterion 1
  report(1, check_hungarian(), "Hungarian matching equals permutation brute force (500 cases)");
  report(1, check_giou(), "GIoU matches geometry oracle within 1e-12; hand case -0.5");
  report(1, check_distill_oracles(),
         "L2 distillation double-loop oracles within 1e-12; composition 2*(2*0.1+5*0.2)=2.4");
  report(1, check_ap_engine(), "AP engine equals exhaustive small-case oracle");
  report(1, check_fpp(), "FPP arithmetic: fpp(43.4,0.0)=43.4, fpp(43.4,41.5)=1.9");

  // ---- criterion 2
  report(2, check_distill_gradient(),
         "distillation gradient vs central differences (rel < 1e-6, 100 fixtures)");
  report(2, check_detr_param_gradient(),
         "detection-loss parameter gradient vs central differences (rel < 1e-3, 10 params)");

  // ---- criterion 3
  {
    std::string detail;
    bool ok = check_refiner_contract(detail);
    report(3, ok, "refiner threshold ladder 0.80..0.40 and class-specific fallback",
           detail);
  }

  // ---- criteria 4-7: experiments
  auto t_exp_start = std::chrono::steady_clock::now();

  Config base = acceptance_config();
  std::vector<ClassId> catalog;
  {
    const char* names[] = {"person", "car",  "boat",  "umbrella",
                           "stop sign", "fire hydrant", "sheep", "dog",
                           "bench", "kite", "bus",   "elephant"};
    for (int i = 0; i < 12; ++i) catalog.push_back({i, names[i]});
  }
  WorldParams wp;
  wp.num_images = base.get_int("world.train_images");
  wp.min_objects = base.get_int("world.min_objects");
  wp.max_objects = base.get_int("world.max_objects");
  wp.min_size = base.get_double("world.min_size");
  wp.max_size = base.get_double("world.max_size");
  wp.canvas = base.get_int("world.canvas");
  uint64_t world_seed = base.get_int("world.seed");
  Dataset train_world = synthesize_world(catalog, wp, world_seed);
  wp.num_images = base.get_int("world.eval_images");
  wp.first_image_id = 100000;
  Dataset eval_world = synthesize_world(catalog, wp, Rng::derive(world_seed, "eval"));

  TaskSchedule two_phase = schedule_from_sizes({8, 4}, catalog);
  const std::vector<int> seeds{1, 2, 3};

  struct Cell {
    std::string name;
    bool pseudo, replay, distill;
  };
  std::vector<Cell> components{{"fine-tuning", false, false, false},
                               {"+pseudo", true, false, false},
                               {"++replay", true, true, false},
                               {"+++distill", true, true, true}};

  auto cell_config = [&](const Cell& c) {
    Config cfg = base;
    cfg.set("pseudo.enabled", c.pseudo);
    cfg.set("replay.enabled", c.replay);
    cfg.set("distill.enabled", c.distill);
    return cfg;
  };

  // Phase-1 checkpoints are shared per seed across every 8+4 cell (the
  // component and quota knobs only touch incremental phases).
  std::map<int, std::string> phase1_ckpt;
  {
    std::vector<std::future<void>> jobs;
    for (int seed : seeds) {
      jobs.push_back(std::async(std::launch::async, [&, seed] {
        std::string dir = out_root + "/phase1_seed" + std::to_string(seed);
        Config cfg = cell_config(components[0]);
        TaskSchedule p1 = schedule_from_sizes({8, 4}, catalog);
        // Run only the first phase by training the fine-tuning cell and
        // keeping its phase-1 checkpoint (later cells resume from it).
        run_scenario(p1, train_world, eval_world, cfg, seed, dir);
      }));
      if (jobs.size() == 2) {
        for (auto& j : jobs) j.get();
        jobs.clear();
      }
    }
    for (auto& j : jobs) j.get();
    for (int seed : seeds)
      phase1_ckpt[seed] =
          out_root + "/phase1_seed" + std::to_string(seed) + "/phase_1/checkpoint.json";
  }

  // Component cells (the fine-tuning runs already exist).
  std::map<std::string, std::map<int, RunSummary>> results;
  for (int seed : seeds) {
    ScenarioResult ft = [&] {
      // Recover the fine-tuning summary from its metrics files by re-running
      // summarization over the stored scenario outputs is avoided: re-run
      // cheaply resuming phase 1.
      Config cfg = cell_config(components[0]);
      std::string dir = out_root + "/cell_fine-tuning_seed" + std::to_string(seed);
      return run_scenario(two_phase, train_world, eval_world, cfg, seed, dir,
                          phase1_ckpt[seed]);
    }();
    results["fine-tuning"][seed] = summarize(ft);
  }
  {
    std::vector<std::future<void>> jobs;
    std::mutex mu;
    for (size_t ci = 1; ci < components.size(); ++ci) {
      for (int seed : seeds) {
        jobs.push_back(std::async(std::launch::async, [&, ci, seed] {
          Config cfg = cell_config(components[ci]);
          std::string dir = out_root + "/cell_" + components[ci].name + "_seed" +
                            std::to_string(seed);
          ScenarioResult r = run_scenario(two_phase, train_world, eval_world,
                                          cfg, seed, dir, phase1_ckpt[seed]);
          std::lock_guard<std::mutex> lock(mu);
          results[components[ci].name][seed] = summarize(r);
        }));
        if (jobs.size() == 2) {
          for (auto& j : jobs) j.get();
          jobs.clear();
        }
      }
    }
    for (auto& j : jobs) j.get();
  }

  auto seed_mean = [&](const std::string& name, auto getter) {
    double s = 0;
    for (int seed : seeds) s += getter(results[name][seed]);
    return s / seeds.size();
  };

  // 4a: fine-tuning old AP collapses.
  {
    double ft_old = seed_mean("fine-tuning", [](const RunSummary& r) {
      return r.ap_old / 100.0;  // back to [0,1] absolute
    });
    char buf[128];
    std::snprintf(buf, sizeof(buf), "seed-mean old AP = %.4f", ft_old);
    report(4, ft_old < 0.05, "fine-tuning old-class AP after phase 2 < 0.05", buf);
  }
  // 4b: component ordering.
  {
    double o0 = seed_mean("fine-tuning", [](const RunSummary& r) { return r.ap_old; });
    double o1 = seed_mean("+pseudo", [](const RunSummary& r) { return r.ap_old; });
    double o2 = seed_mean("++replay", [](const RunSummary& r) { return r.ap_old; });
    double o3 = seed_mean("+++distill", [](const RunSummary& r) { return r.ap_old; });
    double f0 = seed_mean("fine-tuning", [](const RunSummary& r) { return r.fpp_v; });
    double f1 = seed_mean("+pseudo", [](const RunSummary& r) { return r.fpp_v; });
    double f2 = seed_mean("++replay", [](const RunSummary& r) { return r.fpp_v; });
    double f3 = seed_mean("+++distill", [](const RunSummary& r) { return r.fpp_v; });
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "old AP: %.1f < %.1f < %.1f < %.1f; FPP: %.1f > %.1f > %.1f > %.1f",
                  o0, o1, o2, o3, f0, f1, f2, f3);
    bool ordering = o0 < o1 && o1 < o2 && o2 < o3 && f0 > f1 && f1 > f2 && f2 > f3;
    report(4, ordering, "component ordering matches the ablation direction", buf);
  }
  // 4c: multi-phase 6+2+2+2 plus the joint upper bound.
  {
    TaskSchedule multi = schedule_from_sizes({6, 2, 2, 2}, catalog);
    Config cfg = base;
    ScenarioResult mr = run_scenario(multi, train_world, eval_world, cfg, 1,
                                     out_root + "/multiphase");
    TaskSchedule joint = schedule_from_sizes({12}, catalog);
    ScenarioResult jr = run_scenario(joint, train_world, eval_world, cfg, 1,
                                     out_root + "/joint");
    RunSummary ms = summarize(mr), js = summarize(jr);
    bool monotone = true;
    for (size_t i = 1; i < ms.phase_ap_all.size(); ++i)
      if (ms.phase_ap_all[i] > ms.phase_ap_all[i - 1] + 1e-9) monotone = false;
    bool bounded = ms.phase_ap_all.back() >= 0.5 * js.ap_all;
    std::ostringstream os;
    os << "per-phase all-class AP:";
    for (double v : ms.phase_ap_all) os << " " << v;
    os << "; joint upper bound " << js.ap_all;
    report(4, monotone && bounded,
           "multi-phase 6+2+2+2 non-increasing and >= 50% of joint AP", os.str());
  }
  {
    double mins = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                t_exp_start)
                      .count() /
                  60.0;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f minutes", mins);
    report(4, mins <= 30.0, "trend experiment fits the 30-minute budget", buf);
  }

  // ---- criterion 5: quota ablation direction
  {
    std::vector<std::string> quotas{"10", "25", "50", "inf"};
    std::map<std::string, std::map<int, RunSummary>> qres;
    std::vector<std::future<void>> jobs;
    std::mutex mu;
    for (const std::string& q : quotas) {
      for (int seed : seeds) {
        jobs.push_back(std::async(std::launch::async, [&, q, seed] {
          Config cfg = cell_config(components[3]);  // full method
          cfg.apply_override("refiner.quota", q);
          std::string dir = out_root + "/quota_" + q + "_seed" + std::to_string(seed);
          ScenarioResult r = run_scenario(two_phase, train_world, eval_world,
                                          cfg, seed, dir, phase1_ckpt[seed]);
          std::lock_guard<std::mutex> lock(mu);
          qres[q][seed] = summarize(r);
        }));
        if (jobs.size() == 2) {
          for (auto& j : jobs) j.get();
          jobs.clear();
        }
      }
    }
    for (auto& j : jobs) j.get();

    auto qmean = [&](const std::string& q, auto getter) {
      double s = 0;
      for (int seed : seeds) s += getter(qres[q][seed]);
      return s / seeds.size();
    };
    double best_finite_old = -1e9, best_finite_wall = -1;
    std::string best_name;
    for (const std::string& q : {"10", "25", "50"}) {
      double v = qmean(q, [](const RunSummary& r) { return r.ap_old; });
      if (v > best_finite_old) {
        best_finite_old = v;
        best_finite_wall = qmean(q, [](const RunSummary& r) { return r.wall; });
        best_name = q;
      }
    }
    double inf_old = qmean("inf", [](const RunSummary& r) { return r.ap_old; });
    double inf_wall = qmean("inf", [](const RunSummary& r) { return r.wall; });
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "old AP: N=inf %.1f <= best finite (N=%s) %.1f; wall: %.0fs > %.0fs",
                  inf_old, best_name.c_str(), best_finite_old, inf_wall,
                  best_finite_wall);
    bool ok = inf_old <= best_finite_old && inf_wall > best_finite_wall;
    report(5, ok, "quota N=inf is no better than the best finite N and costs more",
           buf);
  }

  // ---- criterion 6: CLI determinism
  {
    bool ok = true;
    std::string detail;
    if (bin.empty()) {
      ok = false;
      detail = "no --bin provided";
    } else {
      std::string w = out_root + "/det_world";
      std::string flags =
          " --set world.classes=12 --set world.train_images=60 "
          "--set world.eval_images=20 --set train.epochs=6 "
          "--set refiner.quota=3 --set pseudo.cache=phase";
      std::string synth = bin + " synth-world" + flags + " --out " + w + " > /dev/null 2>&1";
      ok = std::system(synth.c_str()) == 0;
      for (int run = 1; run <= 2 && ok; ++run) {
        std::string dir = out_root + "/det_run" + std::to_string(run);
        std::string cmd = bin + " train" + flags + " --world " + w +
                          " --schedule 8+4 --seed 11 --out " + dir +
                          " > /dev/null 2>&1";
        ok = std::system(cmd.c_str()) == 0;
      }
      if (ok) {
        for (const char* rel :
             {"/phase_1/metrics.json", "/phase_2/metrics.json",
              "/phase_2/dgen.json", "/phase_2/dgen.pix", "/summary.json"}) {
          if (slurp(out_root + "/det_run1" + rel) !=
              slurp(out_root + "/det_run2" + rel)) {
            ok = false;
            detail = std::string("mismatch in ") + rel;
            break;
          }
        }
      } else {
        detail = "train run failed";
      }
    }
    report(6, ok, "two identical `train` invocations produce byte-identical outputs",
           detail);
  }

  // ---- criterion 7: branch exclusivity over a full two-phase run
  {
    std::string log_path = out_root + "/cell_+++distill_seed1/loss_provenance.csv";
    std::ifstream log(log_path);
    bool ok = log.good();
    std::string line;
    std::getline(log, line);  // header
    int generated_rows = 0, real_rows = 0;
    while (ok && std::getline(log, line)) {
      bool generated = line.find(",generated,") != std::string::npos;
      bool distill = line.find(",distillation,") != std::string::npos;
      if (generated && !distill) ok = false;
      if (!generated && distill) ok = false;
      generated ? ++generated_rows : ++real_rows;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d generated rows, %d real rows (%s)",
                  generated_rows, real_rows, log_path.c_str());
    report(7, ok && generated_rows > 0 && real_rows > 0,
           "no generated sample got a supervised term, no real sample a distillation term",
           buf);
  }

  std::printf("%s: %d criterion check(s) failed\n",
              g_failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL", g_failures);
  return g_failures == 0 ? 0 : 1;
}
