#include "cidet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cidet {

void PhasePlan::validate() const {
  if (real_dataset == nullptr) throw ConfigError("phase plan: missing real dataset");
  for (int c : new_classes)
    if (old_classes.count(c))
      throw ConfigError("phase plan: class sets overlap at " + std::to_string(c));
  if (phase_index == 0 && generated_dataset != nullptr)
    throw ConfigError("phase plan: phase 1 cannot carry generated data");
}

struct ProvenanceLog::Impl {
  std::ofstream f;
};

ProvenanceLog::ProvenanceLog(const std::string& path) : impl_(new Impl) {
  impl_->f.open(path);
  if (!impl_->f) throw IoError("cannot write provenance log " + path);
  impl_->f << "phase,epoch,image_id,provenance,loss_kind,loss\n";
}

ProvenanceLog::~ProvenanceLog() = default;

void ProvenanceLog::append(const ProvenanceRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%d,%lld,%s,%s,%.9g\n", row.phase,
                row.epoch, static_cast<long long>(row.image_id),
                row.provenance == Provenance::generated ? "generated" : "real",
                row.kind == ProvenanceRow::Kind::distillation ? "distillation"
                                                              : "detection",
                row.loss);
  impl_->f << buf;
}

double report_scale(double ap01) {
  if (ap01 < 0) return -1.0;
  return std::round(ap01 * 1000.0) / 10.0;
}

json report_to_json(const EvalReport& r) {
  json per_class = json::object();
  for (auto& [cls, ap] : r.per_class_ap)
    per_class[std::to_string(cls)] = report_scale(ap);
  return json{{"subset", r.subset},
              {"ap", report_scale(r.ap)},
              {"ap50", report_scale(r.ap50)},
              {"ap75", report_scale(r.ap75)},
              {"ap_small", report_scale(r.ap_small)},
              {"ap_medium", report_scale(r.ap_medium)},
              {"ap_large", report_scale(r.ap_large)},
              {"per_class_ap", per_class}};
}

void write_metrics(const std::vector<std::pair<std::string, EvalReport>>& reports,
                   const std::string& path, std::optional<double> fpp_value,
                   const std::vector<double>* curve) {
  json doc;
  for (auto& [name, r] : reports) doc[name] = report_to_json(r);
  if (fpp_value) doc["fpp"] = std::round(*fpp_value * 10.0) / 10.0;
  if (curve != nullptr) {
    json c = json::array();
    for (double v : *curve) c.push_back(std::round(v * 1e6) / 1e6);
    doc["training_curve"] = c;
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write metrics file " + path);
  f << doc.dump(1) << "\n";
}

std::vector<EvalDetection> detect_dataset(const DetectorModel& model,
                                          const ClassMap& map,
                                          const Dataset& data,
                                          double score_threshold) {
  std::vector<EvalDetection> out;
  for (const ImageRecord& r : data.records) {
    std::vector<Detection> dets = predict(model, r, score_threshold);
    for (const Detection& d : dets)
      out.push_back({r.image_id, map.id(d.class_id), d.box, d.score});
  }
  return out;
}

namespace {

struct SampleRef {
  const ImageRecord* image;
  bool generated;
};

AnnotationSet to_columns(const AnnotationSet& a, const ClassMap& map) {
  AnnotationSet out = a;
  for (Instance& inst : out.instances) inst.class_id = map.column(inst.class_id);
  return out;
}

std::vector<nn::Mat>& scale_grads(std::vector<nn::Mat>& grads, double s) {
  for (nn::Mat& m : grads)
    for (double& v : m.v) v *= s;
  return grads;
}

// Train-time augmentation: horizontal/vertical flips (boxes follow) and
// low-amplitude pixel noise. Keeps the glyph appearance while breaking
// per-image background memorization.
ImageRecord augment(const ImageRecord& src, bool flip, double noise,
                    uint64_t aug_seed) {
  Rng rng(aug_seed);
  bool fh = flip && rng.uniform() < 0.5;
  bool fv = flip && rng.uniform() < 0.5;
  ImageRecord out = src;
  const int H = src.height, W = src.width, C = src.channels;
  if (fh || fv) {
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        int sr = fv ? H - 1 - r : r;
        int sc = fh ? W - 1 - c : c;
        for (int ch = 0; ch < C; ++ch)
          out.pixels[(static_cast<size_t>(r) * W + c) * C + ch] =
              src.pixels[(static_cast<size_t>(sr) * W + sc) * C + ch];
      }
    for (Instance& inst : out.annotation.instances) {
      Box b = inst.box;
      if (fh) {
        inst.box.x_min = 1.0 - b.x_max;
        inst.box.x_max = 1.0 - b.x_min;
      }
      if (fv) {
        inst.box.y_min = 1.0 - b.y_max;
        inst.box.y_max = 1.0 - b.y_min;
      }
    }
  }
  if (noise > 0) {
    for (float& p : out.pixels) {
      p += static_cast<float>(rng.uniform(-noise, noise));
      p = std::min(1.0f, std::max(0.0f, p));
    }
  }
  return out;
}

}  // namespace

TrainedPhase run_phase(const PhasePlan& plan, const Config& config,
                       const DetectorModel* old_model,
                       const ClassMap* old_class_map,
                       const std::vector<ClassId>& catalog, uint64_t seed,
                       ProvenanceLog* provenance) {
  plan.validate();
  const bool incremental = plan.phase_index > 0;
  if (incremental && (old_model == nullptr || old_class_map == nullptr))
    throw ConfigError("run_phase: phase " + std::to_string(plan.phase_index + 1) +
                      " requires the old model");
  if (!incremental && old_model != nullptr)
    throw ConfigError("run_phase: phase 1 must not receive an old model");

  const bool pseudo_enabled = config.get_bool("pseudo.enabled");
  const bool distill_enabled = config.get_bool("distill.enabled");
  const double p_pseudo = config.get_double("pseudo.threshold");
  const std::string pseudo_cache = config.get_string("pseudo.cache");

  MatchWeights weights{config.get_double("loss.w_cls"),
                       config.get_double("loss.w_l1"),
                       config.get_double("loss.w_giou")};
  DistillationConfig distill_cfg;
  distill_cfg.lambda = config.get_double("distill.lambda");
  distill_cfg.cls_weight = config.get_double("distill.alpha");
  distill_cfg.reg_weight = config.get_double("distill.beta");
  distill_cfg.layer_agg = config.get_string("distill.layer_agg") == "sum"
                              ? DistillationConfig::LayerAgg::sum
                              : DistillationConfig::LayerAgg::mean;
  distill_cfg.compare = config.get_string("distill.compare") == "logits"
                            ? DistillationConfig::CompareSpace::logits
                            : DistillationConfig::CompareSpace::scores;

  // Class map: old columns first, new classes appended in ascending id order.
  ClassMap class_map;
  std::vector<int> new_sorted(plan.new_classes.begin(), plan.new_classes.end());
  if (incremental) {
    class_map = *old_class_map;
    class_map.append(new_sorted);
  } else {
    class_map = ClassMap::from_columns(new_sorted);
  }

  // Model: fresh for phase 1, widened old checkpoint afterwards.
  DetectorModel model = [&] {
    if (incremental)
      return old_model->widen(class_map.size(), Rng::derive(seed, "widen"));
    DetectorConfig dcfg;
    dcfg.num_queries = config.get_int("detector.queries");
    dcfg.num_decoder_layers = config.get_int("detector.decoder_layers");
    dcfg.num_encoder_layers = config.get_int("detector.encoder_layers");
    dcfg.hidden = config.get_int("detector.hidden");
    dcfg.heads = config.get_int("detector.heads");
    dcfg.ffn = config.get_int("detector.ffn");
    dcfg.patch = config.get_int("detector.patch");
    dcfg.canvas = config.get_int("world.canvas");
    dcfg.background_weight = config.get_double("detector.background_weight");
    dcfg.num_classes = class_map.size();
    return DetectorModel::init(dcfg, Rng::derive(seed, "model-init"));
  }();
  const double bg_weight = model.config().background_weight;

  std::set<int> old_columns;
  if (incremental)
    for (int c : plan.old_classes) old_columns.insert(class_map.column(c));
  std::set<int> new_columns;
  for (int c : plan.new_classes) new_columns.insert(class_map.column(c));

  // Assemble the unified sample stream.
  std::vector<SampleRef> stream;
  for (const ImageRecord& r : plan.real_dataset->records)
    stream.push_back({&r, false});
  if (plan.generated_dataset != nullptr)
    for (const ImageRecord& r : plan.generated_dataset->records)
      stream.push_back({&r, true});
  if (stream.empty()) throw ConfigError("run_phase: empty training stream");

  const int epochs = config.get_int("train.epochs");
  const int batch_size = config.get_int("train.batch");
  const double base_lr = config.get_double("train.lr");
  const double lr_decay = config.get_double("train.lr_decay");
  const double lr_decay_at = config.get_double("train.lr_decay_at");
  const double grad_clip = config.get_double("train.grad_clip");
  const double weight_decay = config.get_double("train.weight_decay");
  const bool flip_augment = config.get_bool("train.flip_augment");
  const double noise_augment = config.get_double("train.noise_augment");

  TrainedPhase out{std::move(model), class_map, {}};
  out.result.phase_index = plan.phase_index;
  nn::Adam opt(out.model.params(), base_lr, 0.9, 0.999, 1e-8, grad_clip,
               weight_decay);
  Rng shuffle_rng(Rng::derive(seed, "shuffle"));

  // The frozen old model is deterministic, so its outputs can be cached
  // per epoch or for the whole phase with identical results; the knob
  // only trades memory for recompute.
  std::map<int64_t, DetectorOutput> old_output_cache;
  DetectorOutput old_uncached;
  auto old_forward = [&](const ImageRecord& img) -> const DetectorOutput& {
    if (pseudo_cache == "off") {
      old_uncached = old_model->forward(img);
      return old_uncached;
    }
    auto it = old_output_cache.find(img.image_id);
    if (it != old_output_cache.end()) return it->second;
    auto [ins, ok] = old_output_cache.emplace(img.image_id, old_model->forward(img));
    (void)ok;
    return ins->second;
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (epoch == static_cast<int>(epochs * lr_decay_at))
      opt.set_lr(base_lr * lr_decay);
    if (pseudo_cache != "phase") old_output_cache.clear();

    std::vector<size_t> order(stream.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double epoch_loss = 0;
    size_t steps = 0;
    for (size_t start = 0; start < order.size(); start += batch_size) {
      size_t end = std::min(order.size(), start + batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      double batch_loss = 0;

      for (size_t k = start; k < end; ++k) {
        const SampleRef& ref = stream[order[k]];
        const bool do_augment = flip_augment || noise_augment > 0;
        const uint64_t aug_seed =
            Rng::derive(Rng::derive(seed, "augment"),
                        (static_cast<uint64_t>(epoch) << 40) ^
                            static_cast<uint64_t>(ref.image->image_id));

        std::vector<nn::Mat> dlogits, dboxes;
        double sample_loss = 0;
        ProvenanceRow::Kind kind;
        DetectorModel::ForwardCache cache;

        if (ref.generated && distill_enabled) {
          // Synthetic data trains through distillation only; both models
          // must see the same (augmented) pixels.
          ImageRecord img = do_augment ? augment(*ref.image, flip_augment,
                                                 noise_augment, aug_seed)
                                       : *ref.image;
          DetectorOutput out_new = out.model.forward(img, cache);
          const DetectorOutput& out_old =
              do_augment ? old_model->forward(img) : old_forward(*ref.image);
          DistillBreakdown d =
              total_distill_with_grads(out_new, out_old, distill_cfg, dlogits, dboxes);
          sample_loss = d.total;
          kind = ProvenanceRow::Kind::distillation;
          out.model.backward(cache, scale_grads(dlogits, inv_batch),
                             scale_grads(dboxes, inv_batch));
        } else {
          // Supervision lives in the clean frame: new-class ground truth
          // plus pseudo-labels from the clean image, then the image and
          // the merged targets are augmented together.
          ImageRecord record = *ref.image;
          record.annotation = to_columns(ref.image->annotation, class_map);
          if (!ref.generated && incremental && pseudo_enabled) {
            const DetectorOutput& out_old = old_forward(*ref.image);
            PseudoLabelSet pseudo = pseudo_label(out_old, p_pseudo, old_columns);
            MergedTargets merged =
                merge_labels(record.annotation, pseudo, new_columns);
            record.annotation = merged.merged;
          }
          ImageRecord img = do_augment ? augment(record, flip_augment,
                                                 noise_augment, aug_seed)
                                       : record;
          DetectorOutput out_new = out.model.forward(img, cache);
          LossBreakdown lb = detr_loss_with_grads(out_new, img.annotation,
                                                  weights, bg_weight, dlogits,
                                                  dboxes);
          sample_loss = lb.total;
          kind = ProvenanceRow::Kind::detection;
          out.model.backward(cache, scale_grads(dlogits, inv_batch),
                             scale_grads(dboxes, inv_batch));
        }

        if (!std::isfinite(sample_loss))
          throw ValidationError("non-finite loss at phase " +
                                std::to_string(plan.phase_index + 1) + " epoch " +
                                std::to_string(epoch) + " image " +
                                std::to_string(ref.image->image_id));
        batch_loss += sample_loss * inv_batch;

        if (provenance != nullptr)
          provenance->append({plan.phase_index + 1, epoch, ref.image->image_id,
                              ref.generated ? Provenance::generated
                                            : Provenance::real,
                              kind, sample_loss});
      }
      opt.step();
      epoch_loss += batch_loss;
      ++steps;
    }
    out.result.training_curve.push_back(steps > 0 ? epoch_loss / steps : 0.0);
  }
  (void)catalog;
  return out;
}

ScenarioResult run_scenario(const TaskSchedule& schedule,
                            const Dataset& train_world,
                            const Dataset& eval_world, const Config& config,
                            uint64_t seed, const std::string& out_dir,
                            const std::string& resume_phase1_checkpoint) {
  auto t0 = std::chrono::steady_clock::now();
  schedule.validate(train_world.catalog);
  fs::create_directories(out_dir);

  const bool replay_enabled = config.get_bool("replay.enabled");
  const double eval_threshold = config.get_double("eval.score_threshold");
  EvalParams eval_params;
  eval_params.canvas = config.get_int("world.canvas");
  eval_params.max_dets_per_image = config.get_int("eval.max_dets");

  ProvenanceLog provenance(out_dir + "/loss_provenance.csv");

  ScenarioResult scenario;
  std::optional<DetectorModel> model;
  std::optional<ClassMap> class_map;
  double first_phase_t1_ap = -1;

  const std::set<int> t1_classes = schedule.phase_classes(0);

  for (size_t m = 0; m < schedule.num_phases(); ++m) {
    std::string phase_dir = out_dir + "/phase_" + std::to_string(m + 1);
    fs::create_directories(phase_dir);

    Dataset d_m = split_by_schedule(train_world, schedule, m);
    std::set<int> new_classes = schedule.phase_classes(m);
    std::set<int> old_classes = schedule.classes_before(m);

    std::optional<Dataset> d_gen;
    if (m > 0 && replay_enabled) {
      // Old annotations from the original training split; image pixels
      // from previous phases are never reused.
      Dataset old_split = split_by_classes(train_world, old_classes);
      std::vector<AnnotationSet> old_annotations;
      for (const ImageRecord& r : old_split.records)
        old_annotations.push_back(r.annotation);

      RefinerConfig rcfg;
      rcfg.quota = config.get_int("refiner.quota");
      rcfg.unlimited = config.get_bool("refiner.unlimited");
      rcfg.p_hi = config.get_double("refiner.p_hi");
      rcfg.p_lo = config.get_double("refiner.p_lo");
      rcfg.step = config.get_double("refiner.step");
      rcfg.iou_match = config.get_double("refiner.iou_match");
      rcfg.batch_size = config.get_int("refiner.batch");
      rcfg.fallback_budget_factor = config.get_int("refiner.fallback_budget_factor");
      rcfg.max_cycles_guard = config.get_int("refiner.max_cycles_guard");

      GenerationSettings settings;
      settings.prompt.scene_env = config.get_string("prompt.scene_env");
      settings.prompt.negative = config.get_string("prompt.negative");
      settings.grounding_strength = config.get_double("generator.grounding_strength");
      settings.guidance_scale = config.get_double("generator.guidance_scale");
      settings.style_dim = config.get_int("generator.style_dim");

      std::unique_ptr<Generator> generator;
      if (config.get_string("generator.kind") == "external") {
        generator = std::make_unique<ExternalGenerator>(
            config.get_string("generator.exchange_dir"),
            config.get_double("generator.timeout_s"));
      } else {
        FidelityProfile fidelity;
        fidelity.base_quality = config.get_double("generator.fidelity.base_quality");
        fidelity.jitter_scale = config.get_double("generator.fidelity.jitter_scale");
        fidelity.drop_prob = config.get_double("generator.fidelity.drop_prob");
        fidelity.distractor_rate =
            config.get_double("generator.fidelity.distractor_rate");
        generator = std::make_unique<ProceduralGenerator>(
            config.get_int("world.canvas"), fidelity, settings.style_dim);
      }

      ModelScorer scorer(*model, *class_map);
      RefinementResult refined = run_refinement(
          old_annotations, *generator, scorer, rcfg, old_classes,
          train_world.catalog, settings, Rng::derive(seed, m));
      scenario.refine_wall_times.push_back(refined.wall_time_s);
      save_dataset(refined.d_gen, phase_dir + "/dgen.json");
      write_refinement_report(refined, train_world.catalog,
                              phase_dir + "/refine_report.json");
      d_gen = std::move(refined.d_gen);
    }

    PhasePlan plan;
    plan.phase_index = static_cast<int>(m);
    plan.new_classes = new_classes;
    plan.old_classes = old_classes;
    plan.real_dataset = &d_m;
    plan.generated_dataset = d_gen ? &*d_gen : nullptr;

    uint64_t old_hash = model ? model->param_hash() : 0;
    TrainedPhase trained;
    if (m == 0 && !resume_phase1_checkpoint.empty()) {
      LoadedDetector loaded = DetectorModel::load(resume_phase1_checkpoint);
      trained.model = std::move(loaded.model);
      trained.class_map = ClassMap::from_columns(loaded.head_columns);
      trained.result.phase_index = 0;
    } else {
      trained = run_phase(plan, config, model ? &*model : nullptr,
                          class_map ? &*class_map : nullptr, train_world.catalog,
                          Rng::derive(seed, "phase" + std::to_string(m)),
                          &provenance);
    }
    if (model && model->param_hash() != old_hash)
      throw ValidationError("old model parameters changed during phase " +
                            std::to_string(m + 1));

    // Evaluate on the held-out split over all classes learned so far.
    std::set<int> learned;
    for (size_t p = 0; p <= m; ++p) {
      auto pc = schedule.phase_classes(p);
      learned.insert(pc.begin(), pc.end());
    }
    Dataset eval_split = split_by_classes(eval_world, learned);
    std::vector<AnnotationSet> gt;
    for (const ImageRecord& r : eval_split.records) gt.push_back(r.annotation);
    std::vector<EvalDetection> dets =
        detect_dataset(trained.model, trained.class_map, eval_split, eval_threshold);

    trained.result.all = subset_report(gt, dets, learned, eval_params, "all");
    if (!old_classes.empty())
      trained.result.old_report =
          subset_report(gt, dets, old_classes, eval_params, "old");
    trained.result.new_report =
        subset_report(gt, dets, new_classes, eval_params, "new");
    EvalReport t1 = subset_report(gt, dets, t1_classes, eval_params, "t1");
    trained.result.first_phase_subset_ap = t1.ap;
    if (m == 0) first_phase_t1_ap = t1.ap;

    std::string ckpt = phase_dir + "/checkpoint.json";
    std::vector<int> old_vec(old_classes.begin(), old_classes.end());
    std::vector<int> new_vec(new_classes.begin(), new_classes.end());
    trained.model.save(ckpt, train_world.catalog, trained.class_map.column_to_id,
                       old_vec, new_vec);
    trained.result.checkpoint_path = ckpt;

    std::vector<std::pair<std::string, EvalReport>> reports{{"all", trained.result.all}};
    if (trained.result.old_report) reports.push_back({"old", *trained.result.old_report});
    if (trained.result.new_report) reports.push_back({"new", *trained.result.new_report});
    reports.push_back({"t1", t1});
    std::optional<double> fpp_value;
    if (m + 1 == schedule.num_phases() && schedule.num_phases() > 1) {
      fpp_value = fpp(report_scale(first_phase_t1_ap), report_scale(t1.ap));
      scenario.fpp_value = *fpp_value;
    }
    write_metrics(reports, phase_dir + "/metrics.json", fpp_value,
                  &trained.result.training_curve);

    scenario.phases.push_back(trained.result);
    model = std::move(trained.model);
    class_map = trained.class_map;
  }

  // Scenario summary.
  json summary;
  summary["phases"] = json::array();
  for (const PhaseResult& r : scenario.phases) {
    json p{{"phase", r.phase_index + 1},
           {"ap_all", report_scale(r.all.ap)},
           {"ap_t1", report_scale(r.first_phase_subset_ap)}};
    if (r.old_report) p["ap_old"] = report_scale(r.old_report->ap);
    if (r.new_report) p["ap_new"] = report_scale(r.new_report->ap);
    summary["phases"].push_back(p);
  }
  if (schedule.num_phases() > 1) summary["fpp"] = scenario.fpp_value;
  {
    std::ofstream f(out_dir + "/summary.json");
    f << summary.dump(1) << "\n";
  }

  scenario.total_wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return scenario;
}

}  // namespace cidet
