#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cidet/refiner.hpp"

using namespace cidet;

namespace {

std::vector<ClassId> catalog4() {
  return {{0, "person"}, {1, "umbrella"}, {2, "boat"}, {3, "sheep"}};
}

// Scorer stubs with configurable behavior.
class EchoScorer : public DetectionScorer {
 public:
  // Confirms every annotated instance of the image at the given score.
  explicit EchoScorer(double score = 0.95) : score_(score) {}
  std::vector<Detection> score(const ImageRecord& image,
                               double threshold) const override {
    std::vector<Detection> out;
    for (const Instance& inst : image.annotation.instances)
      if (score_ >= threshold) out.push_back({inst.class_id, inst.box, score_});
    return out;
  }

 private:
  double score_;
};

class NeverScorer : public DetectionScorer {
 public:
  std::vector<Detection> score(const ImageRecord&, double) const override {
    return {};
  }
};

std::vector<AnnotationSet> annotations_for(const std::vector<ClassId>& catalog) {
  std::vector<AnnotationSet> out;
  int64_t id = 1;
  for (const ClassId& a : catalog) {
    for (const ClassId& b : catalog) {
      if (a.id >= b.id) continue;
      AnnotationSet ann;
      ann.image_id = id++;
      ann.instances.push_back({a.id, Box{4 / 64.0, 8 / 64.0, 24 / 64.0, 30 / 64.0}});
      ann.instances.push_back({b.id, Box{34 / 64.0, 8 / 64.0, 56 / 64.0, 30 / 64.0}});
      out.push_back(ann);
    }
  }
  return out;
}

GeneratedSample make_sample(std::vector<std::pair<int, Box>> entities,
                            uint64_t seed = 1) {
  ProceduralGenerator gen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  GenerationRequest req;
  for (auto& [cls, box] : entities) req.grounding.entities.push_back({cls, box});
  req.prompt = {"x", ""};
  req.seed = seed;
  return gen.generate(req)[0];
}

}  // namespace

TEST_CASE("filter_sample: perfect fidelity with the glyph oracle accepts") {
  auto catalog = catalog4();
  GeneratedSample s = make_sample({{0, Box{8 / 64.0, 8 / 64.0, 28 / 64.0, 28 / 64.0}},
                                   {2, Box{36 / 64.0, 36 / 64.0, 56 / 64.0, 60 / 64.0}}});
  // Oracle-backed scorer built on glyph template matching.
  class OracleScorer : public DetectionScorer {
   public:
    explicit OracleScorer(std::vector<ClassId> catalog)
        : catalog_(std::move(catalog)) {}
    std::vector<Detection> score(const ImageRecord& image,
                                 double) const override {
      std::vector<Detection> out;
      for (const auto& d : oracle::match_glyphs(image, catalog_))
        out.push_back({d.class_id, d.box, d.score});
      return out;
    }

   private:
    std::vector<ClassId> catalog_;
  } scorer(catalog);

  for (double p : {0.4, 0.8, 1.0})
    CHECK(filter_sample(s, scorer, p, 0.5).accepted);
}

TEST_CASE("filter_sample: a dropped object is rejected with its class named") {
  // Generator drops everything; detections never include the requested
  // second entity.
  GeneratedSample s = make_sample({{1, Box{0.1, 0.1, 0.4, 0.4}}});
  NeverScorer never;
  FilterDecision d = filter_sample(s, never, 0.5, 0.5);
  CHECK(!d.accepted);
  CHECK(d.reject_reason.find("class 1") != std::string::npos);
}

TEST_CASE("filter_sample: right class at IoU below the gate is rejected") {
  GeneratedSample s = make_sample({{0, Box{0.10, 0.10, 0.50, 0.50}}});
  // Detection with IoU 0.25 (half-width overlap on one axis):
  // actually compute: shifted box [0.30,0.10,0.70,0.50] vs request ->
  // inter 0.2*0.4 = 0.08, union 0.16+0.16-0.08 = 0.24 -> IoU = 1/3 < 0.5
  class ShiftedScorer : public DetectionScorer {
   public:
    std::vector<Detection> score(const ImageRecord&, double) const override {
      return {{0, Box{0.30, 0.10, 0.70, 0.50}, 0.99}};
    }
  } shifted;
  FilterDecision d = filter_sample(s, shifted, 0.5, 0.5);
  CHECK(!d.accepted);
  CHECK(iou(Box{0.10, 0.10, 0.50, 0.50}, Box{0.30, 0.10, 0.70, 0.50}) ==
        doctest::Approx(1.0 / 3));

  // one detection confirms only one entity
  GeneratedSample two = make_sample({{0, Box{0.1, 0.1, 0.4, 0.4}},
                                     {0, Box{0.12, 0.1, 0.42, 0.4}}});
  class OneBoxScorer : public DetectionScorer {
   public:
    std::vector<Detection> score(const ImageRecord&, double) const override {
      return {{0, Box{0.1, 0.1, 0.4, 0.4}, 0.99}};
    }
  } one;
  CHECK(!filter_sample(two, one, 0.5, 0.5).accepted);
}

TEST_CASE("acceptance monotonicity in the filter threshold") {
  // Model whose detections appear gradually as the threshold drops.
  class GradedScorer : public DetectionScorer {
   public:
    std::vector<Detection> score(const ImageRecord& image,
                                 double threshold) const override {
      std::vector<Detection> out;
      double s = 0.85;
      for (const Instance& inst : image.annotation.instances) {
        if (s >= threshold) out.push_back({inst.class_id, inst.box, s});
        s -= 0.12;
      }
      return out;
    }
  } graded;
  GeneratedSample s = make_sample({{0, Box{0.1, 0.1, 0.3, 0.3}},
                                   {1, Box{0.4, 0.4, 0.6, 0.6}},
                                   {2, Box{0.7, 0.7, 0.9, 0.9}}});
  bool accepted_before = false;
  for (double t : {0.9, 0.8, 0.7, 0.6, 0.5, 0.4}) {
    bool now = filter_sample(s, graded, t, 0.5).accepted;
    if (accepted_before) CHECK(now);
    accepted_before = now;
  }
  CHECK(accepted_before);  // at 0.4 all three scores pass
}

TEST_CASE("run_refinement: always-accepting stub fills quotas in cycle 1") {
  auto catalog = catalog4();
  auto annotations = annotations_for(catalog);
  ProceduralGenerator gen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  EchoScorer echo(0.95);
  RefinerConfig cfg;
  cfg.quota = 4;
  std::set<int> classes{0, 1, 2, 3};
  RefinementResult r = run_refinement(annotations, gen, echo, cfg, classes,
                                      catalog, {}, 11);
  CHECK(r.state.visited_thresholds.size() == 1);
  CHECK(r.state.visited_thresholds[0] == doctest::Approx(0.8));
  for (int c : classes) CHECK(r.state.accepted_counts.at(c) >= cfg.quota);
  CHECK(r.state.fallback_classes.empty());
  CHECK(r.d_gen.records.size() > 0);
}

TEST_CASE("run_refinement: never-accepting stub walks the full schedule then falls back") {
  auto catalog = catalog4();
  auto annotations = annotations_for(catalog);
  ProceduralGenerator gen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  NeverScorer never;
  RefinerConfig cfg;
  cfg.quota = 2;
  cfg.fallback_budget_factor = 3;
  std::set<int> classes{0, 1, 2, 3};
  RefinementResult r = run_refinement(annotations, gen, never, cfg, classes,
                                      catalog, {}, 12);

  const double expected[] = {0.80, 0.75, 0.70, 0.65, 0.60, 0.55, 0.50, 0.45, 0.40};
  REQUIRE(r.state.visited_thresholds.size() == 9);
  for (int i = 0; i < 9; ++i)
    CHECK(r.state.visited_thresholds[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  // strictly decreasing by exactly `step`
  for (int i = 1; i < 9; ++i)
    CHECK(r.state.visited_thresholds[i - 1] - r.state.visited_thresholds[i] ==
          doctest::Approx(0.05).epsilon(1e-12));

  // fallback fired for every class, exhausted its budget, nothing accepted
  CHECK(r.state.fallback_classes == classes);
  CHECK(r.state.unsatisfied == classes);
  CHECK(r.state.fallback_attempts == 4 * cfg.fallback_budget_factor * cfg.quota);
  CHECK(r.d_gen.records.empty());
  // every rejection names a reason
  for (const auto& rej : r.state.rejection_log)
    CHECK(!rej.reason.empty());
}

TEST_CASE("run_refinement: quota 1 stops after the first acceptance") {
  std::vector<ClassId> catalog{{0, "person"}};
  AnnotationSet ann;
  ann.image_id = 1;
  ann.instances.push_back({0, Box{0.2, 0.2, 0.6, 0.6}});
  ProceduralGenerator gen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  EchoScorer echo;
  RefinerConfig cfg;
  cfg.quota = 1;
  RefinementResult r =
      run_refinement({ann}, gen, echo, cfg, {0}, catalog, {}, 5);
  CHECK(r.d_gen.records.size() == 1);
  CHECK(r.state.accepted_counts.at(0) == 1);
  CHECK(r.state.visited_thresholds.size() == 1);
}

TEST_CASE("run_refinement: determinism") {
  auto catalog = catalog4();
  auto annotations = annotations_for(catalog);
  ProceduralGenerator gen(64, FidelityProfile{0.7, 0.05, 0.15, 0.3});
  EchoScorer echo(0.7);  // accepts at thresholds <= 0.7, so two cycles run
  RefinerConfig cfg;
  cfg.quota = 3;
  std::set<int> classes{0, 1, 2, 3};
  RefinementResult a = run_refinement(annotations, gen, echo, cfg, classes,
                                      catalog, {}, 99);
  RefinementResult b = run_refinement(annotations, gen, echo, cfg, classes,
                                      catalog, {}, 99);
  REQUIRE(a.d_gen.records.size() == b.d_gen.records.size());
  for (size_t i = 0; i < a.d_gen.records.size(); ++i) {
    CHECK(a.d_gen.records[i].pixels == b.d_gen.records[i].pixels);
    CHECK(a.d_gen.records[i].image_id == b.d_gen.records[i].image_id);
  }
  // multi-class acceptance counts every contained class
  int64_t total_instances = 0;
  for (auto& [cls, n] : a.state.accepted_counts) total_instances += n;
  int64_t instance_count = 0;
  for (const auto& rec : a.d_gen.records)
    instance_count += rec.annotation.instances.size();
  CHECK(total_instances == instance_count);
}

TEST_CASE("class_specific_generate: fixed box, bare prompt, budget, no-op") {
  std::vector<ClassId> catalog{{0, "person"}, {1, "stop sign"}};
  RefinerConfig cfg;
  cfg.quota = 5;
  cfg.fallback_budget_factor = 2;

  // Capture the request the generator sees.
  class CaptureGenerator : public Generator {
   public:
    mutable std::vector<GenerationRequest> seen;
    std::vector<GeneratedSample> generate(const GenerationRequest& req) const override {
      seen.push_back(req);
      ProceduralGenerator inner(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
      return inner.generate(req);
    }
  } capture;

  EchoScorer echo;
  // shortfall of 3 (already accepted 2 of 5)
  auto extra = class_specific_generate(1, capture, echo, cfg, catalog, {}, 2, 7);
  CHECK(extra.size() == 3);
  for (const auto& req : capture.seen) {
    CHECK(req.prompt.positive == "stop sign");
    REQUIRE(req.grounding.entities.size() == 1);
    const Box& b = req.grounding.entities[0].box;
    CHECK(b.x_min == 0.3);
    CHECK(b.y_min == 0.3);
    CHECK(b.x_max == 0.6);
    CHECK(b.y_max == 0.6);
  }
  for (const auto& s : extra) {
    REQUIRE(s.grounding_used.entities.size() == 1);
    CHECK(s.grounding_used.entities[0].box.x_min == 0.3);
  }

  // rejecting stub: budget exhausted, zero accepted
  NeverScorer never;
  RefinerState state;
  auto none = class_specific_generate(0, capture, never, cfg, catalog, {}, 0, 8,
                                      &state);
  CHECK(none.empty());
  CHECK(state.fallback_attempts == cfg.fallback_budget_factor * cfg.quota);

  // already satisfied: no-op
  auto noop = class_specific_generate(0, capture, echo, cfg, catalog, {}, 5, 9);
  CHECK(noop.empty());
}

TEST_CASE("refiner config validation") {
  RefinerConfig bad;
  bad.p_lo = 0.9;
  bad.p_hi = 0.8;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RefinerConfig{};
  bad.quota = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RefinerConfig{};
  bad.step = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  RefinerConfig inf_cfg;
  inf_cfg.unlimited = true;
  inf_cfg.quota = 0;
  CHECK_NOTHROW(inf_cfg.validate());
}

TEST_CASE("unlimited mode: every annotation accepted once, no fallback") {
  auto catalog = catalog4();
  auto annotations = annotations_for(catalog);  // 6 two-object annotations
  ProceduralGenerator gen(64, FidelityProfile{1.0, 0.0, 0.0, 0.0});
  EchoScorer echo;
  RefinerConfig cfg;
  cfg.unlimited = true;
  std::set<int> classes{0, 1, 2, 3};
  RefinementResult r = run_refinement(annotations, gen, echo, cfg, classes,
                                      catalog, {}, 3);
  CHECK(r.d_gen.records.size() == annotations.size());
  CHECK(r.state.fallback_classes.empty());
  // with a never-accepting model, all cycles are visited and nothing is kept
  NeverScorer never;
  RefinementResult r2 = run_refinement(annotations, gen, never, cfg, classes,
                                       catalog, {}, 3);
  CHECK(r2.state.visited_thresholds.size() == 9);
  CHECK(r2.d_gen.records.empty());
}
