// cidet: desk-scale class-incremental object detection with generative
// replay. Subcommands: synth-world, train, evaluate, ablate, refine-only.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <json.hpp>

#include "cidet/config.hpp"
#include "cidet/generator.hpp"
#include "cidet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cidet;

namespace {

const char* kDefaultClassNames[] = {
    "person", "car",  "boat",  "umbrella", "stop sign", "fire hydrant",
    "sheep",  "dog",  "bench", "kite",     "bus",       "elephant",
    "bear",   "cow",  "vase",  "clock",
};

std::vector<ClassId> make_catalog(int num_classes) {
  std::vector<ClassId> catalog;
  for (int i = 0; i < num_classes; ++i) {
    std::string name = i < static_cast<int>(std::size(kDefaultClassNames))
                           ? kDefaultClassNames[i]
                           : "class-" + std::to_string(i);
    catalog.push_back({i, name});
  }
  return catalog;
}

WorldParams world_params_from(const Config& cfg, int num_images,
                              int64_t first_id) {
  WorldParams p;
  p.num_images = num_images;
  p.min_objects = cfg.get_int("world.min_objects");
  p.max_objects = cfg.get_int("world.max_objects");
  p.min_size = cfg.get_double("world.min_size");
  p.max_size = cfg.get_double("world.max_size");
  p.canvas = cfg.get_int("world.canvas");
  p.first_image_id = first_id;
  return p;
}

void synth_world_files(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<ClassId> catalog = make_catalog(cfg.get_int("world.classes"));
  uint64_t seed = static_cast<uint64_t>(cfg.get_int("world.seed"));
  Dataset train = synthesize_world(
      catalog, world_params_from(cfg, cfg.get_int("world.train_images"), 1), seed);
  Dataset eval = synthesize_world(
      catalog, world_params_from(cfg, cfg.get_int("world.eval_images"), 100000),
      Rng::derive(seed, "eval"));
  save_dataset(train, out_dir + "/world_train.json");
  save_dataset(eval, out_dir + "/world_eval.json");

  json manifest;
  manifest["seed"] = seed;
  manifest["train_images"] = train.records.size();
  manifest["eval_images"] = eval.records.size();
  json counts = json::object();
  for (auto& [cls, n] : class_instance_counts(train))
    counts[std::to_string(cls)] = n;
  manifest["train_instance_counts"] = counts;
  std::ofstream f(out_dir + "/world_manifest.json");
  f << manifest.dump(1) << "\n";
  cfg.write_resolved(out_dir + "/resolved_config.json");
}

Dataset load_world_file(const std::string& path) {
  if (!fs::exists(path))
    throw ConfigError("world file not found: " + path +
                      " (run `cidet synth-world` first)");
  return load_dataset(path);
}

// Minimal SVG polyline plot for --plots output.
void write_svg_curve(const std::string& path, const std::string& title,
                     const std::vector<std::pair<double, double>>& points,
                     const std::string& x_label, const std::string& y_label) {
  const int w = 480, h = 360, margin = 48;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write plot " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='"
    << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>"
    << title << "</text>\n";
  f << "<line x1='" << margin << "' y1='" << h - margin << "' x2='" << w - margin
    << "' y2='" << h - margin << "' stroke='black'/>\n";
  f << "<line x1='" << margin << "' y1='" << h - margin << "' x2='" << margin
    << "' y2='" << margin << "' stroke='black'/>\n";
  f << "<text x='" << w / 2 << "' y='" << h - 10
    << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
  f << "<text x='14' y='" << h / 2 << "' font-size='12' transform='rotate(-90 14 "
    << h / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";
  if (!points.empty()) {
    double x_max = 1.0, y_max = 1.0;
    for (auto& [x, y] : points) {
      x_max = std::max(x_max, x);
      y_max = std::max(y_max, y);
    }
    f << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
    for (auto& [x, y] : points) {
      double px = margin + x / x_max * (w - 2 * margin);
      double py = h - margin - y / y_max * (h - 2 * margin);
      f << px << "," << py << " ";
    }
    f << "'/>\n";
  }
  f << "</svg>\n";
}

void emit_scenario_plots(const ScenarioResult& scenario, const Dataset& eval_world,
                         const std::string& out_dir) {
  std::vector<std::pair<double, double>> trajectory;
  for (const PhaseResult& r : scenario.phases)
    trajectory.push_back({static_cast<double>(r.phase_index + 1), r.all.ap});
  write_svg_curve(out_dir + "/ap_trajectory.svg", "All-class AP per phase",
                  trajectory, "phase", "AP");
  (void)eval_world;
}

int run_train(Config& cfg, const std::string& world_dir,
              const std::string& schedule_spec,
              const std::string& schedule_file, uint64_t seed,
              const std::string& out_dir, bool fine_tune_baseline, bool plots,
              const std::string& resume_phase1) {
  if (fine_tune_baseline) {
    cfg.set("replay.enabled", false);
    cfg.set("pseudo.enabled", false);
    cfg.set("distill.enabled", false);
  }
  Dataset train_world = load_world_file(world_dir + "/world_train.json");
  Dataset eval_world = load_world_file(world_dir + "/world_eval.json");
  TaskSchedule schedule =
      !schedule_file.empty()
          ? load_schedule(schedule_file)
          : parse_schedule_spec(schedule_spec, train_world.catalog);
  fs::create_directories(out_dir);
  cfg.write_resolved(out_dir + "/resolved_config.json");
  ScenarioResult result = run_scenario(schedule, train_world, eval_world, cfg,
                                       seed, out_dir, resume_phase1);
  if (plots) emit_scenario_plots(result, eval_world, out_dir);
  std::cout << "train: " << result.phases.size() << " phases, final all-class AP "
            << report_scale(result.phases.back().all.ap);
  if (schedule.num_phases() > 1) std::cout << ", FPP " << result.fpp_value;
  std::cout << "\n";
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& dataset_path,
                 const std::string& out_dir, bool subset_old, bool subset_new,
                 bool plots, const Config& cfg) {
  LoadedDetector loaded = DetectorModel::load(checkpoint);
  Dataset data = load_dataset(dataset_path);
  if (data.catalog.size() != loaded.catalog.size())
    throw ConfigError("catalog mismatch: checkpoint has " +
                      std::to_string(loaded.catalog.size()) + " classes, dataset " +
                      std::to_string(data.catalog.size()));
  for (size_t i = 0; i < data.catalog.size(); ++i)
    if (data.catalog[i].id != loaded.catalog[i].id ||
        data.catalog[i].name != loaded.catalog[i].name)
      throw ConfigError("catalog mismatch at class " +
                        std::to_string(data.catalog[i].id));

  fs::create_directories(out_dir);
  ClassMap map = ClassMap::from_columns(loaded.head_columns);
  EvalParams params;
  params.canvas = loaded.model.config().canvas;
  params.max_dets_per_image = cfg.get_int("eval.max_dets");

  std::set<int> learned(loaded.head_columns.begin(), loaded.head_columns.end());
  Dataset eval_split = split_by_classes(data, learned);
  std::vector<AnnotationSet> gt;
  for (const ImageRecord& r : eval_split.records) gt.push_back(r.annotation);
  std::vector<EvalDetection> dets = detect_dataset(
      loaded.model, map, eval_split, cfg.get_double("eval.score_threshold"));

  std::vector<std::pair<std::string, EvalReport>> reports;
  reports.push_back({"all", subset_report(gt, dets, learned, params, "all")});
  if (subset_old) {
    std::set<int> old_set(loaded.old_classes.begin(), loaded.old_classes.end());
    if (old_set.empty()) throw ConfigError("checkpoint has no old classes");
    reports.push_back({"old", subset_report(gt, dets, old_set, params, "old")});
  }
  if (subset_new) {
    std::set<int> new_set(loaded.new_classes.begin(), loaded.new_classes.end());
    reports.push_back({"new", subset_report(gt, dets, new_set, params, "new")});
  }
  write_metrics(reports, out_dir + "/metrics.json");
  cfg.write_resolved(out_dir + "/resolved_config.json");

  if (plots) {
    for (int cls : loaded.head_columns) {
      auto curve = precision_recall_curve(gt, dets, cls, params);
      write_svg_curve(out_dir + "/pr_class_" + std::to_string(cls) + ".svg",
                      "PR curve, class " + std::to_string(cls) + " (IoU 0.5)",
                      curve, "recall", "precision");
    }
  }
  for (auto& [name, r] : reports)
    std::cout << "evaluate[" << name << "]: AP " << report_scale(r.ap) << " AP50 "
              << report_scale(r.ap50) << " AP75 " << report_scale(r.ap75) << "\n";
  return 0;
}

struct AblationCell {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};

int run_ablate(Config& base, const std::string& sweep,
               const std::string& world_dir, const std::string& schedule_spec,
               const std::string& out_dir, int jobs) {
  if (sweep.empty()) throw ConfigError("ablate: empty sweep spec");
  std::vector<AblationCell> cells;
  if (sweep == "components") {
    cells = {
        {"fine-tuning",
         {{"pseudo.enabled", "false"},
          {"replay.enabled", "false"},
          {"distill.enabled", "false"}}},
        {"+pseudo",
         {{"pseudo.enabled", "true"},
          {"replay.enabled", "false"},
          {"distill.enabled", "false"}}},
        {"++replay",
         {{"pseudo.enabled", "true"},
          {"replay.enabled", "true"},
          {"distill.enabled", "false"}}},
        {"+++distill",
         {{"pseudo.enabled", "true"},
          {"replay.enabled", "true"},
          {"distill.enabled", "true"}}},
    };
  } else {
    size_t eq = sweep.find('=');
    if (eq == std::string::npos)
      throw ConfigError("sweep must be `key=v1,v2,...` or `components`");
    std::string key = sweep.substr(0, eq);
    if (!base.has(key) && key != "refiner.quota")
      throw ConfigError("unknown sweep key: " + key);
    std::string values = sweep.substr(eq + 1);
    if (values.empty()) throw ConfigError("ablate: empty sweep value list");
    std::stringstream ss(values);
    std::string v;
    while (std::getline(ss, v, ','))
      cells.push_back({key + "=" + v, {{key, v}}});
    if (cells.empty()) throw ConfigError("ablate: empty sweep value list");
  }
  // Validate all overrides before any run starts.
  for (const AblationCell& cell : cells) {
    Config probe = base;
    for (auto& [k, v] : cell.overrides) probe.apply_override(k, v);
  }

  fs::create_directories(out_dir);
  base.write_resolved(out_dir + "/resolved_config.json");

  std::string wdir = world_dir;
  if (wdir.empty()) {
    wdir = out_dir + "/world";
    synth_world_files(base, wdir);
  }
  Dataset train_world = load_world_file(wdir + "/world_train.json");
  Dataset eval_world = load_world_file(wdir + "/world_eval.json");
  TaskSchedule schedule = parse_schedule_spec(schedule_spec, train_world.catalog);

  std::vector<int> seeds = base.get_int_list("seeds");
  if (seeds.empty()) throw ConfigError("ablate: seeds list is empty");

  struct CellResult {
    double ap = 0, ap50 = 0, ap75 = 0, ap_old = 0, fpp_v = 0, wall = 0;
  };
  std::vector<std::vector<CellResult>> results(cells.size());
  for (auto& r : results) r.resize(seeds.size());

  // Phase 1 is identical across cells of the same seed whenever the
  // sweep only touches incremental-phase knobs; train it once per seed
  // and resume the rest.
  bool phase1_shared = true;
  for (const AblationCell& cell : cells)
    for (auto& [k, v] : cell.overrides)
      if (k.rfind("pseudo.", 0) != 0 && k.rfind("replay.", 0) != 0 &&
          k.rfind("distill.", 0) != 0 && k.rfind("refiner.", 0) != 0)
        phase1_shared = false;

  auto run_cell = [&](size_t ci, size_t si, const std::string& resume) {
    Config cfg = base;
    for (auto& [k, v] : cells[ci].overrides) cfg.apply_override(k, v);
    std::string cell_dir =
        out_dir + "/cell_" + std::to_string(ci) + "_seed" + std::to_string(seeds[si]);
    ScenarioResult r = run_scenario(schedule, train_world, eval_world, cfg,
                                    static_cast<uint64_t>(seeds[si]), cell_dir,
                                    resume);
    CellResult c;
    const PhaseResult& fin = r.phases.back();
    c.ap = report_scale(fin.all.ap);
    c.ap50 = report_scale(fin.all.ap50);
    c.ap75 = report_scale(fin.all.ap75);
    c.ap_old = fin.old_report ? report_scale(fin.old_report->ap) : -1;
    c.fpp_v = r.fpp_value;
    c.wall = r.total_wall_time_s;
    results[ci][si] = c;
  };

  for (size_t si = 0; si < seeds.size(); ++si) {
    run_cell(0, si, "");
    std::string resume;
    if (phase1_shared)
      resume = out_dir + "/cell_0_seed" + std::to_string(seeds[si]) +
               "/phase_1/checkpoint.json";
    std::vector<std::future<void>> pending;
    for (size_t ci = 1; ci < cells.size(); ++ci) {
      if (jobs > 1) {
        pending.push_back(std::async(std::launch::async, run_cell, ci, si, resume));
        if (static_cast<int>(pending.size()) >= jobs) {
          for (auto& f : pending) f.get();
          pending.clear();
        }
      } else {
        run_cell(ci, si, resume);
      }
    }
    for (auto& f : pending) f.get();
  }

  auto mean_std = [&](auto getter, size_t ci) {
    double mean = 0;
    for (size_t si = 0; si < seeds.size(); ++si) mean += getter(results[ci][si]);
    mean /= seeds.size();
    double var = 0;
    for (size_t si = 0; si < seeds.size(); ++si) {
      double d = getter(results[ci][si]) - mean;
      var += d * d;
    }
    return std::make_pair(mean, std::sqrt(var / seeds.size()));
  };

  json table = json::array();
  std::ofstream txt(out_dir + "/ablation_table.txt");
  char line[256];
  std::snprintf(line, sizeof(line), "%-16s %14s %14s %14s %14s %14s\n",
                "setting", "AP", "AP50", "AP75", "old AP", "FPP");
  txt << line;
  for (size_t ci = 0; ci < cells.size(); ++ci) {
    auto [ap_m, ap_s] = mean_std([](const CellResult& c) { return c.ap; }, ci);
    auto [a50_m, a50_s] = mean_std([](const CellResult& c) { return c.ap50; }, ci);
    auto [a75_m, a75_s] = mean_std([](const CellResult& c) { return c.ap75; }, ci);
    auto [old_m, old_s] = mean_std([](const CellResult& c) { return c.ap_old; }, ci);
    auto [fpp_m, fpp_s] = mean_std([](const CellResult& c) { return c.fpp_v; }, ci);
    auto [wall_m, wall_s] = mean_std([](const CellResult& c) { return c.wall; }, ci);
    table.push_back({{"setting", cells[ci].label},
                     {"ap", {{"mean", ap_m}, {"std", ap_s}}},
                     {"ap50", {{"mean", a50_m}, {"std", a50_s}}},
                     {"ap75", {{"mean", a75_m}, {"std", a75_s}}},
                     {"ap_old", {{"mean", old_m}, {"std", old_s}}},
                     {"fpp", {{"mean", fpp_m}, {"std", fpp_s}}},
                     {"wall_time_s", {{"mean", wall_m}, {"std", wall_s}}}});
    std::snprintf(line, sizeof(line),
                  "%-16s %6.1f ± %4.1f %6.1f ± %4.1f %6.1f ± %4.1f %6.1f ± %4.1f "
                  "%6.1f ± %4.1f\n",
                  cells[ci].label.c_str(), ap_m, ap_s, a50_m, a50_s, a75_m, a75_s,
                  old_m, old_s, fpp_m, fpp_s);
    txt << line;
  }
  std::ofstream jf(out_dir + "/ablation_table.json");
  jf << table.dump(1) << "\n";
  std::cout << "ablate: " << cells.size() << " settings x " << seeds.size()
            << " seeds written to " << out_dir << "\n";
  return 0;
}

int run_refine_only(const std::string& checkpoint, const std::string& dataset_path,
                    const Config& cfg, const std::string& out_dir) {
  LoadedDetector loaded = DetectorModel::load(checkpoint);
  Dataset data = load_dataset(dataset_path);
  fs::create_directories(out_dir);

  std::set<int> learned(loaded.head_columns.begin(), loaded.head_columns.end());
  Dataset usable = split_by_classes(data, learned);
  if (usable.records.empty())
    throw ConfigError("refine-only: dataset has no annotations of checkpoint classes");
  std::vector<AnnotationSet> annotations;
  std::set<int> quota_classes;
  for (const ImageRecord& r : usable.records) {
    annotations.push_back(r.annotation);
    for (const Instance& inst : r.annotation.instances)
      quota_classes.insert(inst.class_id);
  }

  RefinerConfig rcfg;
  rcfg.quota = cfg.get_int("refiner.quota");
  rcfg.unlimited = cfg.get_bool("refiner.unlimited");
  rcfg.p_hi = cfg.get_double("refiner.p_hi");
  rcfg.p_lo = cfg.get_double("refiner.p_lo");
  rcfg.step = cfg.get_double("refiner.step");
  rcfg.iou_match = cfg.get_double("refiner.iou_match");
  rcfg.batch_size = cfg.get_int("refiner.batch");
  rcfg.fallback_budget_factor = cfg.get_int("refiner.fallback_budget_factor");
  rcfg.max_cycles_guard = cfg.get_int("refiner.max_cycles_guard");

  GenerationSettings settings;
  settings.prompt.scene_env = cfg.get_string("prompt.scene_env");
  settings.prompt.negative = cfg.get_string("prompt.negative");
  settings.grounding_strength = cfg.get_double("generator.grounding_strength");
  settings.guidance_scale = cfg.get_double("generator.guidance_scale");
  settings.style_dim = cfg.get_int("generator.style_dim");

  FidelityProfile fidelity;
  fidelity.base_quality = cfg.get_double("generator.fidelity.base_quality");
  fidelity.jitter_scale = cfg.get_double("generator.fidelity.jitter_scale");
  fidelity.drop_prob = cfg.get_double("generator.fidelity.drop_prob");
  fidelity.distractor_rate = cfg.get_double("generator.fidelity.distractor_rate");
  ProceduralGenerator generator(loaded.model.config().canvas, fidelity,
                                settings.style_dim);

  ClassMap map = ClassMap::from_columns(loaded.head_columns);
  ModelScorer scorer(loaded.model, map);
  RefinementResult result = run_refinement(
      annotations, generator, scorer, rcfg, quota_classes, data.catalog,
      settings, static_cast<uint64_t>(cfg.get_int("train.seed")));
  save_dataset(result.d_gen, out_dir + "/dgen.json");
  write_refinement_report(result, data.catalog, out_dir + "/refine_report.json");
  cfg.write_resolved(out_dir + "/resolved_config.json");
  std::cout << "refine-only: accepted " << result.d_gen.records.size()
            << " images in " << result.state.visited_thresholds.size()
            << " cycles\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale class-incremental detection with generative replay"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "JSON config file");
  app.add_option("--set", sets, "override config key: --set key=value");

  auto* synth = app.add_subcommand("synth-world", "synthesize the toy world");
  std::string synth_out = "out/world";
  synth->add_option("--out", synth_out, "output directory");

  auto* train = app.add_subcommand("train", "run a continual training scenario");
  std::string train_world_dir = "out/world", train_out = "out/train";
  std::string schedule_spec = "8+4", schedule_file, resume_phase1;
  uint64_t train_seed = 1;
  bool fine_tune = false, train_plots = false;
  train->add_option("--world", train_world_dir, "world directory");
  train->add_option("--schedule", schedule_spec, "phase sizes, e.g. 8+4");
  train->add_option("--schedule-file", schedule_file, "schedule JSON file");
  train->add_option("--seed", train_seed, "training seed");
  train->add_option("--out", train_out, "output directory");
  train->add_option("--resume-phase1", resume_phase1,
                    "reuse a phase-1 checkpoint instead of training it");
  train->add_flag("--fine-tune-baseline", fine_tune,
                  "disable replay, pseudo-labeling and distillation");
  train->add_flag("--plots", train_plots, "emit SVG plots");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out = "out/eval";
  bool eval_old = false, eval_new = false, eval_plots = false;
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required();
  evaluate->add_option("--dataset", eval_data, "dataset JSON")->required();
  evaluate->add_option("--out", eval_out, "output directory");
  evaluate->add_flag("--old", eval_old, "also report old-class subset");
  evaluate->add_flag("--new", eval_new, "also report new-class subset");
  evaluate->add_flag("--plots", eval_plots, "emit PR-curve SVGs");

  auto* ablate = app.add_subcommand("ablate", "run a config sweep");
  std::string sweep, ablate_world_dir, ablate_out = "out/ablate";
  std::string ablate_schedule = "8+4";
  int jobs = 1;
  ablate->add_option("--sweep", sweep,
                     "`components` or `key=v1,v2,...` (quota accepts `inf`)")
      ->required();
  ablate->add_option("--world", ablate_world_dir,
                     "world directory (synthesized when omitted)");
  ablate->add_option("--schedule", ablate_schedule, "phase sizes");
  ablate->add_option("--out", ablate_out, "output directory");
  ablate->add_option("--jobs", jobs, "parallel cells");

  auto* refine = app.add_subcommand("refine-only", "run the refiner standalone");
  std::string refine_ckpt, refine_data, refine_out = "out/refine";
  refine->add_option("--checkpoint", refine_ckpt, "old-model checkpoint")->required();
  refine->add_option("--dataset", refine_data, "dataset supplying old annotations")
      ->required();
  refine->add_option("--out", refine_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Config cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const std::string& s : sets) cfg.apply_set_expr(s);

    if (synth->parsed()) {
      synth_world_files(cfg, synth_out);
      std::cout << "synth-world: wrote " << synth_out << "\n";
      return 0;
    }
    if (train->parsed())
      return run_train(cfg, train_world_dir, schedule_spec, schedule_file,
                       train_seed, train_out, fine_tune, train_plots,
                       resume_phase1);
    if (evaluate->parsed())
      return run_evaluate(eval_ckpt, eval_data, eval_out, eval_old, eval_new,
                          eval_plots, cfg);
    if (ablate->parsed())
      return run_ablate(cfg, sweep, ablate_world_dir, ablate_schedule,
                        ablate_out, jobs);
    if (refine->parsed())
      return run_refine_only(refine_ckpt, refine_data, cfg, refine_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
