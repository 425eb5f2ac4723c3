#pragma once

// File-backed pipeline stages. Every stage reads its inputs from and writes
// its outputs to the output directory, so stages can run separately.
//
//   data/      cohort.json, split.json, atlas.arob, atlas_regions.csv, volumes/*.arob
//   runs/      runs.csv, run_<i>/{checkpoint.ckpt, result.json, metrics.csv, predictions.csv}
//   heatmaps/  run_<i>/<method>/<group>/<subject>_t<k>.arob
//   eval/      <method>/run_<i>_<group>_mean.arob, regions_run_<i>.csv, pairwise matrices
//   report.csv, report.json

#include <cstdio>
#include <functional>
#include <iostream>
#include <regex>

#include "json.hpp"

#include "arob/atlas.hpp"
#include "arob/attribution.hpp"
#include "arob/io/checkpoint.hpp"
#include "arob/io/config.hpp"
#include "arob/io/container.hpp"
#include "arob/io/nifti.hpp"
#include "arob/phantom.hpp"
#include "arob/robustness.hpp"
#include "arob/train.hpp"

namespace arob::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Logger = std::function<void(const std::string&)>;

struct Layout {
  fs::path root;

  fs::path data() const { return root / "data"; }
  fs::path volumes() const { return data() / "volumes"; }
  fs::path cohort_file() const { return data() / "cohort.json"; }
  fs::path split_file() const { return data() / "split.json"; }
  fs::path atlas_file() const { return data() / "atlas.arob"; }
  fs::path regions_file() const { return data() / "atlas_regions.csv"; }
  fs::path runs() const { return root / "runs"; }
  fs::path run_dir(std::size_t r) const { return runs() / ("run_" + std::to_string(r)); }
  fs::path heatmap_dir(std::size_t r, Method m, Group g) const {
    return root / "heatmaps" / ("run_" + std::to_string(r)) / to_string(m) / to_string(g);
  }
  fs::path eval_dir(Method m) const { return root / "eval" / to_string(m); }
  fs::path mean_file(Method m, std::size_t r, Group g) const {
    return eval_dir(m) / ("run_" + std::to_string(r) + "_" + to_string(g) + "_mean.arob");
  }
  fs::path report_csv() const { return root / "report.csv"; }
  fs::path report_json() const { return root / "report.json"; }
};

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string sample_name(const std::string& subject, std::size_t timepoint) {
  return subject + "_t" + std::to_string(timepoint);
}

// ---------------------------------------------------------------------------
// gen-data

inline RegionAtlas load_external_atlas(const io::AtlasOverride& a, const std::array<std::size_t, 3>& shape) {
  const fs::path labels_path(a.labels);
  io::AnyTensor any = io::looks_like_nifti(labels_path) ? io::import_nifti(labels_path) : io::read_container(labels_path);
  auto* labels = std::get_if<Tensor<std::int32_t>>(&any);
  if (!labels) throw FormatError(a.labels + ": atlas label volume must hold integers");
  const Shape want{shape[0], shape[1], shape[2]};
  if (labels->shape() != want)
    throw ShapeError(a.labels + ": atlas shape " + shape_str(labels->shape()) + " does not match " + shape_str(want));
  return RegionAtlas(std::move(*labels), parse_region_table(io::read_text(a.regions)));
}

inline void gen_data(const io::ExperimentConfig& cfg, const Layout& out, const Logger& log = {}) {
  Cohort cohort = generate_cohort(cfg.phantom);
  const RegionAtlas atlas = cfg.atlas.labels.empty() ? cohort.atlas : load_external_atlas(cfg.atlas, cfg.phantom.shape);
  const DatasetSplit split = split_subjectwise(cohort.subjects, cohort.samples, cfg.split.test_per_class,
                                               cfg.split.val_per_class, cfg.split.seed);
  fs::create_directories(out.volumes());
  json subjects = json::array(), samples = json::array();
  for (const auto& s : cohort.subjects)
    subjects.push_back({{"id", s.id}, {"label", to_string(s.label)}, {"timepoints", s.timepoints}});
  for (const auto& s : cohort.samples) {
    const std::string name = sample_name(s.subject_id, s.timepoint);
    const json meta = {{"subject", s.subject_id},
                       {"timepoint", s.timepoint},
                       {"label", to_string(s.label)},
                       {"axes", {"channel", "axial", "coronal", "sagittal"}}};
    io::write_container(out.volumes() / (name + ".arob"), s.volume, meta);
    samples.push_back({{"file", "volumes/" + name + ".arob"},
                       {"subject", s.subject_id},
                       {"timepoint", s.timepoint},
                       {"label", to_string(s.label)}});
  }
  io::write_text_atomic(out.cohort_file(),
                        json{{"shape", cfg.phantom.shape}, {"subjects", subjects}, {"samples", samples}}.dump(2) + "\n");
  io::write_text_atomic(out.split_file(), json{{"train", split.train_ids},
                                               {"validation", split.validation_ids},
                                               {"test", split.test_ids}}
                                                  .dump(2) + "\n");
  io::write_container(out.atlas_file(), atlas.labels(), json{{"kind", "atlas"}});
  io::write_text_atomic(out.regions_file(), format_region_table(atlas));
  if (log)
    log(detail::concat("gen-data: ", cohort.subjects.size(), " subjects, ", cohort.samples.size(), " samples (train ",
                       split.train.size(), ", validation ", split.validation.size(), ", test ", split.test.size(),
                       ")"));
}

struct LoadedData {
  DatasetSplit split;
  RegionAtlas atlas;
};

inline json read_json(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("missing " + p.string() + " (run the earlier pipeline stage first)");
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline RegionAtlas load_atlas(const Layout& in) {
  if (!fs::exists(in.atlas_file())) throw DataError("missing " + in.atlas_file().string() + " (run gen-data first)");
  return RegionAtlas(io::read_container_as<std::int32_t>(in.atlas_file()),
                     parse_region_table(io::read_text(in.regions_file())));
}

inline LoadedData load_data(const Layout& in) {
  LoadedData d;
  const json cohort = read_json(in.cohort_file());
  const json split = read_json(in.split_file());
  std::map<std::string, int> where;
  try {
    for (const auto& id : split.at("train")) where[id.get<std::string>()] = 0;
    for (const auto& id : split.at("validation")) where[id.get<std::string>()] = 1;
    for (const auto& id : split.at("test")) where[id.get<std::string>()] = 2;
    d.split.train_ids = split.at("train").get<std::vector<std::string>>();
    d.split.validation_ids = split.at("validation").get<std::vector<std::string>>();
    d.split.test_ids = split.at("test").get<std::vector<std::string>>();
    for (const auto& s : cohort.at("samples")) {
      VolumeSample v;
      v.volume = io::read_container_as<float>(in.data() / s.at("file").get<std::string>());
      v.subject_id = s.at("subject").get<std::string>();
      v.timepoint = s.at("timepoint").get<std::size_t>();
      v.label = parse_class_label(s.at("label").get<std::string>());
      auto it = where.find(v.subject_id);
      if (it == where.end()) throw DataError("split.json does not place subject " + v.subject_id);
      (it->second == 0 ? d.split.train : it->second == 1 ? d.split.validation : d.split.test).push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("cohort/split metadata: ") + e.what());
  }
  d.atlas = load_atlas(in);
  return d;
}

// ---------------------------------------------------------------------------
// train

inline void write_run(const Layout& out, const RunResult& r) {
  const fs::path dir = out.run_dir(r.run);
  fs::create_directories(dir);
  if (!r.failed) io::save_checkpoint(dir / "checkpoint.ckpt", r.network, {r.seed, r.best_epoch});
  std::string metrics = "epoch,train_loss,val_loss\n";
  for (const auto& m : r.epochs)
    metrics += std::to_string(m.epoch) + "," + fmt(m.train_loss) + "," + fmt(m.val_loss) + "\n";
  io::write_text_atomic(dir / "metrics.csv", metrics);
  std::string preds = "sample_index,subject,timepoint,truth,predicted\n";
  for (const auto& p : r.predictions)
    preds += std::to_string(p.sample_index) + "," + p.subject_id + "," + std::to_string(p.timepoint) + "," +
             to_string(p.truth) + "," + to_string(p.predicted) + "\n";
  io::write_text_atomic(dir / "predictions.csv", preds);
  const json result = {{"run", r.run},
                       {"seed", r.seed},
                       {"best_epoch", r.best_epoch},
                       {"best_val_loss", r.best_val_loss},
                       {"epochs", r.epochs.size()},
                       {"balanced_accuracy", r.balanced_accuracy},
                       {"failed", r.failed},
                       {"failure", r.failure}};
  io::write_text_atomic(dir / "result.json", result.dump(2) + "\n");
}

inline std::vector<std::size_t> discover_runs(const Layout& in) {
  std::vector<std::size_t> runs;
  if (!fs::exists(in.runs())) return runs;
  const std::regex pattern("run_([0-9]+)");
  for (const auto& e : fs::directory_iterator(in.runs())) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (e.is_directory() && std::regex_match(name, m, pattern) && fs::exists(e.path() / "result.json"))
      runs.push_back(std::stoul(m[1]));
  }
  std::sort(runs.begin(), runs.end());
  return runs;
}

inline void write_runs_table(const Layout& out) {
  std::string csv = "run,seed,best_epoch,balanced_accuracy,failed\n";
  for (std::size_t r : discover_runs(out)) {
    const json j = read_json(out.run_dir(r) / "result.json");
    csv += std::to_string(r) + "," + std::to_string(j.at("seed").get<std::uint64_t>()) + "," +
           std::to_string(j.at("best_epoch").get<std::size_t>()) + "," + fmt(j.at("balanced_accuracy").get<double>()) +
           "," + (j.at("failed").get<bool>() ? "1" : "0") + "\n";
  }
  io::write_text_atomic(out.runs() / "runs.csv", csv);
}

/// Trains runs 0..n-1 (n = repetitions when 0). Returns the run results.
inline std::vector<RunResult> train(const io::ExperimentConfig& cfg, const Layout& io_dir, std::size_t n = 0,
                                    const Logger& log = {}) {
  const LoadedData data = load_data(io_dir);
  std::vector<std::size_t> runs(n == 0 ? cfg.train.repetitions : n);
  std::iota(runs.begin(), runs.end(), std::size_t{0});
  std::vector<RunResult> results = train_repeated(data.split, cfg.network, cfg.train, runs);
  for (const auto& r : results) {
    write_run(io_dir, r);
    if (log)
      log(r.failed ? detail::concat("train: run ", r.run, " failed: ", r.failure)
                   : detail::concat("train: run ", r.run, " best epoch ", r.best_epoch, ", balanced accuracy ",
                                    fmt(r.balanced_accuracy)));
  }
  write_runs_table(io_dir);
  return results;
}

/// Reloads a run from disk: checkpoint plus test predictions.
inline RunResult load_run(const Layout& in, std::size_t run) {
  const fs::path dir = in.run_dir(run);
  const json j = read_json(dir / "result.json");
  RunResult r;
  r.run = run;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  r.failed = j.at("failed").get<bool>();
  r.failure = j.at("failure").get<std::string>();
  if (r.failed) return r;
  r.network = io::load_checkpoint(dir / "checkpoint.ckpt").first;
  const std::string text = io::read_text(dir / "predictions.csv");
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);  // header
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw FormatError((dir / "predictions.csv").string() + ": malformed row '" + line + "'");
    Prediction p;
    p.sample_index = std::stoul(f[0]);
    p.subject_id = f[1];
    p.timepoint = std::stoul(f[2]);
    p.truth = parse_class_label(f[3]);
    p.predicted = parse_class_label(f[4]);
    r.predictions.push_back(std::move(p));
  }
  return r;
}

inline std::vector<std::size_t> select_runs(const Layout& in, std::size_t limit) {
  std::vector<std::size_t> runs = discover_runs(in);
  if (runs.empty()) throw DataError("no trained runs under " + in.runs().string() + " (run train first)");
  if (limit > 0 && limit < runs.size()) runs.resize(limit);
  return runs;
}

// ---------------------------------------------------------------------------
// attribute

/// Writes one heatmap container per (run, method, group, correctly
/// classified test sample). Returns the number of files written.
inline std::size_t attribute(const io::ExperimentConfig& cfg, const Layout& io_dir, const std::vector<Method>& methods,
                             const std::vector<Group>& groups, std::size_t run_limit = 0, const Logger& log = {}) {
  const LoadedData data = load_data(io_dir);
  const AttributionConfig acfg{cfg.occlusion, cfg.lrp};
  std::size_t written = 0;
  for (std::size_t run : select_runs(io_dir, run_limit)) {
    const std::vector<RunResult> one{load_run(io_dir, run)};
    for (Method m : methods)
      for (Group g : groups) {
        const fs::path dir = io_dir.heatmap_dir(run, m, g);
        if (fs::exists(dir)) fs::remove_all(dir);
        fs::create_directories(dir);
        const auto sets = attribute_testset(one, data.split.test, m, g, acfg);
        for (const auto& gh : sets) {
          if (!gh.warning.empty() && log) log("attribute: warning: " + gh.warning);
          for (const auto& h : gh.maps) {
            const json meta = {{"method", to_string(m)},
                               {"run", run},
                               {"subject", h.subject_id},
                               {"timepoint", h.timepoint},
                               {"group", to_string(g)},
                               {"target", h.target},
                               {"axes", {"axial", "coronal", "sagittal"}}};
            io::write_container(dir / (sample_name(h.subject_id, h.timepoint) + ".arob"), h.values, meta);
            ++written;
          }
        }
        if (log) log(detail::concat("attribute: run ", run, " ", to_string(m), " ", to_string(g), " done"));
      }
  }
  return written;
}

inline std::vector<Tensor<float>> read_heatmaps(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".arob") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Tensor<float>> maps;
  for (const auto& f : files) maps.push_back(io::read_container_as<float>(f));
  return maps;
}

// ---------------------------------------------------------------------------
// evaluate

inline std::string matrix_csv(const std::vector<std::size_t>& runs, const PairwiseMatrix& m) {
  std::string csv = "run";
  for (std::size_t r : runs) csv += ",run_" + std::to_string(r);
  csv += "\n";
  for (std::size_t i = 0; i < m.n; ++i) {
    csv += "run_" + std::to_string(runs[i]);
    for (std::size_t j = 0; j < m.n; ++j) csv += "," + fmt(m.at(i, j));
    csv += "\n";
  }
  return csv;
}

inline std::string regions_csv(const RegionScoreTable& t, const RegionAtlas& atlas) {
  const auto rs = ranks(t.sum), rd = ranks(t.density), rg = ranks(t.gain);
  std::string csv = "region,name,voxels,sum,density,gain,rank_sum,rank_density,rank_gain\n";
  auto cell = [](const RegionScores& s, RegionId id) { return s.count(id) ? fmt(s.at(id)) : std::string(); };
  auto rank = [](const std::map<RegionId, std::size_t>& r, RegionId id) {
    return r.count(id) ? std::to_string(r.at(id)) : std::string();
  };
  for (const auto& [id, info] : atlas.regions())
    csv += std::to_string(id) + "," + info.name + "," + std::to_string(info.voxels) + "," + cell(t.sum, id) + "," +
           cell(t.density, id) + "," + cell(t.gain, id) + "," + rank(rs, id) + "," + rank(rd, id) + "," +
           rank(rg, id) + "\n";
  return csv;
}

/// Mean heatmaps per run and group, region tables per run, and the pairwise
/// matrices. Needs only the persisted heatmaps and atlas.
inline std::vector<MethodRunSet> evaluate(const io::ExperimentConfig& cfg, const Layout& io_dir,
                                          const std::vector<Method>& methods, std::size_t run_limit = 0,
                                          const Logger& log = {}) {
  const RegionAtlas atlas = load_atlas(io_dir);
  const std::vector<std::size_t> runs = select_runs(io_dir, run_limit);
  std::vector<MethodRunSet> sets;
  for (Method m : methods) {
    MethodRunSet set;
    set.method = to_string(m);
    fs::create_directories(io_dir.eval_dir(m));
    for (std::size_t run : runs) {
      RunMeans rm;
      rm.run = run;
      for (Group g : {Group::tp, Group::tn}) {
        const auto maps = read_heatmaps(io_dir.heatmap_dir(run, m, g));
        const fs::path mean_path = io_dir.mean_file(m, run, g);
        if (maps.empty()) {
          if (fs::exists(mean_path)) fs::remove(mean_path);
          if (log) log(detail::concat("evaluate: run ", run, " ", to_string(m), " has no ", to_string(g), " heatmaps"));
          continue;
        }
        Tensor<float> mean = mean_heatmap(maps);
        io::write_container(mean_path, mean,
                            json{{"method", to_string(m)}, {"run", run}, {"group", to_string(g)}, {"count", maps.size()}});
        (g == Group::tp ? rm.tp : rm.tn) = std::move(mean);
      }
      io::write_text_atomic(io_dir.eval_dir(m) / ("regions_run_" + std::to_string(run) + ".csv"),
                            regions_csv(score_run(rm, set.method, atlas), atlas));
      set.runs.push_back(std::move(rm));
    }
    const MethodCoherence mc = method_coherence(set, atlas, cfg.top_k);
    auto dump = [&](const char* name, const std::optional<PairwiseResult>& r) {
      if (r) io::write_text_atomic(io_dir.eval_dir(m) / name, matrix_csv(runs, r->matrix));
    };
    dump("l2_tp.csv", mc.l2_tp);
    dump("l2_tn.csv", mc.l2_tn);
    dump("topk_sum.csv", mc.sum);
    dump("topk_density.csv", mc.density);
    dump("topk_gain.csv", mc.gain);
    sets.push_back(std::move(set));
  }
  return sets;
}

/// Reloads the mean heatmaps written by evaluate.
inline std::vector<MethodRunSet> load_means(const Layout& in, const std::vector<Method>& methods,
                                            const std::vector<std::size_t>& runs) {
  std::vector<MethodRunSet> sets;
  for (Method m : methods) {
    MethodRunSet set;
    set.method = to_string(m);
    for (std::size_t run : runs) {
      RunMeans rm;
      rm.run = run;
      if (fs::exists(in.mean_file(m, run, Group::tp))) rm.tp = io::read_container_as<float>(in.mean_file(m, run, Group::tp));
      if (fs::exists(in.mean_file(m, run, Group::tn))) rm.tn = io::read_container_as<float>(in.mean_file(m, run, Group::tn));
      set.runs.push_back(std::move(rm));
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

// ---------------------------------------------------------------------------
// report

inline json optional_json(const std::optional<PairwiseResult>& r) { return r ? json(r->mean) : json(nullptr); }

/// Report JSON: per method the five coherence statistics, plus accuracy and
/// how often the planted effect region makes the top-k density list.
inline json report_json(const CoherenceReport& rep, const std::vector<MethodRunSet>& sets, const RegionAtlas& atlas,
                        RegionId effect_region) {
  json methods = json::object();
  for (std::size_t i = 0; i < rep.methods.size(); ++i) {
    const auto& mc = rep.methods[i];
    std::size_t hits = 0, scored = 0;
    for (const auto& rm : sets[i].runs) {
      if (!rm.tp) continue;
      ++scored;
      const auto top = top_k(region_density(*rm.tp, atlas), rep.top_k).ids;
      hits += std::count(top.begin(), top.end(), effect_region) > 0;
    }
    methods[mc.method] = {{"l2_tp", optional_json(mc.l2_tp)},
                          {"l2_tn", optional_json(mc.l2_tn)},
                          {"coherence_sum_pct", optional_json(mc.sum)},
                          {"coherence_density_pct", optional_json(mc.density)},
                          {"coherence_gain_pct", optional_json(mc.gain)},
                          {"runs", mc.runs},
                          {"effect_region_in_density_top_k", hits},
                          {"runs_scored", scored},
                          {"gaps", mc.gaps}};
  }
  json per_run = json::array();
  for (const auto& [run, ba] : rep.run_accuracy) per_run.push_back({{"run", run}, {"balanced_accuracy", ba}});
  return {{"top_k", rep.top_k},
          {"effect_region", effect_region},
          {"methods", methods},
          {"accuracy",
           {{"per_run", per_run},
            {"mean", rep.accuracy.mean},
            {"min", rep.accuracy.min},
            {"max", rep.accuracy.max},
            {"runs", rep.accuracy.runs}}}};
}

inline std::string report_csv(const CoherenceReport& rep) {
  auto cell = [](const std::optional<PairwiseResult>& r) { return r ? fmt(r->mean) : std::string(); };
  std::string csv = "method,l2_tp,l2_tn,coherence_sum_pct,coherence_density_pct,coherence_gain_pct\n";
  for (const auto& mc : rep.methods)
    csv += mc.method + "," + cell(mc.l2_tp) + "," + cell(mc.l2_tn) + "," + cell(mc.sum) + "," + cell(mc.density) +
           "," + cell(mc.gain) + "\n";
  return csv;
}

inline json report(const io::ExperimentConfig& cfg, const Layout& io_dir, const std::vector<Method>& methods,
                   std::size_t run_limit = 0) {
  const RegionAtlas atlas = load_atlas(io_dir);
  const std::vector<std::size_t> runs = select_runs(io_dir, run_limit);
  std::vector<std::pair<std::size_t, double>> accuracy;
  for (std::size_t r : runs) {
    const json j = read_json(io_dir.run_dir(r) / "result.json");
    if (!j.at("failed").get<bool>()) accuracy.emplace_back(r, j.at("balanced_accuracy").get<double>());
  }
  const auto sets = load_means(io_dir, methods, runs);
  const CoherenceReport rep = build_report(sets, atlas, accuracy, cfg.top_k);
  const json j = report_json(rep, sets, atlas, cfg.phantom.effect_region);
  io::write_text_atomic(io_dir.report_csv(), report_csv(rep));
  io::write_text_atomic(io_dir.report_json(), j.dump(2) + "\n");
  return j;
}

}  // namespace arob::pipeline
