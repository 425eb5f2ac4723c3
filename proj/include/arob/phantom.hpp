#pragma once

// Synthetic cohort standing in for registered T1 volumes: a symmetric
// ellipsoidal "brain" parcellated into 20 regions, with patients showing an
// intensity reduction inside one region.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "arob/atlas.hpp"
#include "arob/error.hpp"
#include "arob/io/container.hpp"
#include "arob/io/nifti.hpp"
#include "arob/rng.hpp"
#include "arob/tensor.hpp"

namespace arob {

enum class ClassLabel : int { control = 0, patient = 1 };

inline const char* to_string(ClassLabel c) { return c == ClassLabel::patient ? "patient" : "control"; }

inline ClassLabel parse_class_label(const std::string& s) {
  if (s == "patient") return ClassLabel::patient;
  if (s == "control") return ClassLabel::control;
  throw DataError("unknown class label '" + s + "'");
}

/// Which spatial axis (index into D, H, W) carries which anatomical direction.
struct AxisSemantics {
  std::size_t axial = 0;
  std::size_t coronal = 1;
  std::size_t sagittal = 2;
};

struct VolumeSample {
  Tensor<float> volume;  // (1, D, H, W), intensities in [0, 1]
  std::string subject_id;
  std::size_t timepoint = 0;
  ClassLabel label = ClassLabel::control;
  AxisSemantics axes;
};

struct SubjectRecord {
  std::string id;
  ClassLabel label = ClassLabel::control;
  std::size_t timepoints = 1;
  std::vector<std::string> volume_refs;
};

struct PhantomConfig {
  std::array<std::size_t, 3> shape{36, 36, 36};
  std::size_t subjects_per_class = 30;
  RegionId effect_region = 1;
  double effect_size = 0.3;
  double noise = 0.05;
  // Per-subject global intensity gain is drawn from [1 - j, 1 + j].
  double intensity_jitter = 0.06;
  std::uint64_t seed = 1;

  void validate() const {
    for (std::size_t e : shape)
      if (e == 0 || e % 36 != 0)
        throw DataError("phantom: volume extent " + std::to_string(e) + " is not a positive multiple of 36");
    if (subjects_per_class == 0) throw DataError("phantom: subjects_per_class must be positive");
    if (!(effect_size >= 0.0 && effect_size <= 1.0)) throw DataError("phantom: effect_size must lie in [0, 1]");
    if (!(noise >= 0.0)) throw DataError("phantom: noise must be non-negative");
    if (!(intensity_jitter >= 0.0 && intensity_jitter < 1.0))
      throw DataError("phantom: intensity_jitter must lie in [0, 1)");
  }
};

struct Cohort {
  std::vector<SubjectRecord> subjects;
  std::vector<VolumeSample> samples;  // every timepoint of every subject
  RegionAtlas atlas;
};

namespace phantom {

struct RegionTemplate {
  RegionId id;
  const char* name;
  double intensity;
};

// Ids are stable; 1 is the default effect region.
inline const std::vector<RegionTemplate>& region_templates() {
  static const std::vector<RegionTemplate> t = {
      {1, "hippocampus-analog", 0.62},
      {2, "ventricle-analog", 0.18},
      {3, "cerebellum-analog", 0.66},
      {4, "cortex-shell-frontal", 0.52},
      {5, "cortex-shell-occipital", 0.54},
      {6, "cortex-shell-superior", 0.50},
      {7, "cortex-shell-inferior", 0.56},
      {8, "cortex-shell-lateral", 0.53},
      {9, "white-matter-analog-medial-posterior-inferior", 0.76},
      {10, "white-matter-analog-medial-posterior-superior", 0.78},
      {11, "white-matter-analog-medial-central-inferior", 0.74},
      {12, "white-matter-analog-medial-central-superior", 0.79},
      {13, "white-matter-analog-medial-anterior-inferior", 0.75},
      {14, "white-matter-analog-medial-anterior-superior", 0.77},
      {15, "white-matter-analog-lateral-posterior-inferior", 0.72},
      {16, "white-matter-analog-lateral-posterior-superior", 0.73},
      {17, "white-matter-analog-lateral-central-inferior", 0.71},
      {18, "white-matter-analog-lateral-central-superior", 0.74},
      {19, "white-matter-analog-lateral-anterior-inferior", 0.70},
      {20, "white-matter-analog-lateral-anterior-superior", 0.72},
  };
  return t;
}

// Template-space geometry in voxel units relative to the volume centre.
// z = axial (D), y = coronal (H, + anterior), x = sagittal (W, left-right).
struct Geometry {
  double cz, cy, cx;    // centre
  double rz, ry, rx;    // brain semi-axes
  double scale;         // extent / 36
};

inline Geometry make_geometry(const std::array<std::size_t, 3>& shape) {
  const double s = static_cast<double>(shape[0]) / 36.0;
  return {(static_cast<double>(shape[0]) - 1) / 2, (static_cast<double>(shape[1]) - 1) / 2,
          (static_cast<double>(shape[2]) - 1) / 2, 15.0 * s, 16.5 * s, 14.0 * s, s};
}

// Atlas label at a template position. Depends on |x| only, so the
// parcellation is mirror-symmetric about the sagittal mid-plane.
inline RegionId template_label(const Geometry& g, double z, double y, double x) {
  const double dz = z - g.cz, dy = y - g.cy, ax = std::abs(x - g.cx);
  const double u = dz / g.rz, v = dy / g.ry, w = ax / g.rx;
  const double r = std::sqrt(u * u + v * v + w * w);
  if (r > 1.0) return 0;
  auto in_ellipsoid = [](double a, double b, double c, double ra, double rb, double rc) {
    return (a * a) / (ra * ra) + (b * b) / (rb * rb) + (c * c) / (rc * rc) <= 1.0;
  };
  const double s = g.scale;
  if (in_ellipsoid(dz + 3.0 * s, dy + 1.0 * s, ax - 7.0 * s, 2.6 * s, 4.2 * s, 2.6 * s)) return 1;
  if (in_ellipsoid(dz - 2.0 * s, dy, ax, 3.0 * s, 6.0 * s, 2.0 * s)) return 2;
  if (u < -0.35 && v < -0.25) return 3;
  if (r > 0.8) {
    const double au = std::abs(u), av = std::abs(v);
    if (w >= au && w >= av) return 8;
    if (av >= au) return v > 0 ? 4 : 5;
    return u > 0 ? 6 : 7;
  }
  const int lateral = w >= 0.4 ? 1 : 0;
  const int band = v < -0.33 ? 0 : (v < 0.33 ? 1 : 2);
  const int superior = u >= 0 ? 1 : 0;
  return static_cast<RegionId>(9 + lateral * 6 + band * 2 + superior);
}

inline RegionAtlas make_atlas(const std::array<std::size_t, 3>& shape) {
  const Geometry g = make_geometry(shape);
  Tensor<std::int32_t> labels({shape[0], shape[1], shape[2]});
  std::size_t i = 0;
  for (std::size_t z = 0; z < shape[0]; ++z)
    for (std::size_t y = 0; y < shape[1]; ++y)
      for (std::size_t x = 0; x < shape[2]; ++x)
        labels[i++] = template_label(g, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
  std::map<RegionId, std::string> names;
  for (const auto& t : region_templates()) names[t.id] = t.name;
  return RegionAtlas(std::move(labels), names);
}

struct SubjectDraw {
  double gain;        // global intensity factor
  double radius;      // outer brain radius factor
  double severity;    // patient attenuation multiplier (mean 1)
  std::array<double, 3> field;  // low-frequency intensity modulation
  std::size_t timepoints;
};

// Noise-free volume for one subject, (D, H, W).
inline Tensor<float> clean_volume(const PhantomConfig& cfg, const RegionAtlas& atlas, const SubjectDraw& d,
                                  ClassLabel label) {
  const Geometry g = make_geometry(cfg.shape);
  std::map<RegionId, double> base;
  for (const auto& t : region_templates()) base[t.id] = t.intensity;
  const double attenuation =
      label == ClassLabel::patient ? std::min(1.0, cfg.effect_size * d.severity) : 0.0;

  Tensor<float> vol({cfg.shape[0], cfg.shape[1], cfg.shape[2]});
  const auto labels = atlas.labels().data();
  std::size_t i = 0;
  for (std::size_t z = 0; z < cfg.shape[0]; ++z)
    for (std::size_t y = 0; y < cfg.shape[1]; ++y)
      for (std::size_t x = 0; x < cfg.shape[2]; ++x, ++i) {
        const double u = (static_cast<double>(z) - g.cz) / (g.rz * d.radius);
        const double v = (static_cast<double>(y) - g.cy) / (g.ry * d.radius);
        const double w = std::abs(static_cast<double>(x) - g.cx) / (g.rx * d.radius);
        if (u * u + v * v + w * w > 1.0) continue;
        const RegionId id = labels[i];
        double value = id == 0 ? base.at(4) : base.at(id);
        if (id == cfg.effect_region) value *= 1.0 - attenuation;
        const double field = 1.0 + d.field[0] * u + d.field[1] * v + d.field[2] * (w * w - 0.3);
        value *= d.gain * field;
        vol[i] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
  return vol;
}

inline std::string subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sub-%03zu", index + 1);
  return buf;
}

}  // namespace phantom

/// Generates the cohort and its atlas. Subjects alternate control/patient;
/// each draws 1-3 timepoints that share anatomy but not noise.
inline Cohort generate_cohort(const PhantomConfig& cfg) {
  cfg.validate();
  Cohort cohort;
  cohort.atlas = phantom::make_atlas(cfg.shape);
  if (!cohort.atlas.has_region(cfg.effect_region) || cohort.atlas.region(cfg.effect_region).voxels == 0)
    throw DataError("phantom: effect region " + std::to_string(cfg.effect_region) + " is absent from the atlas");

  const std::size_t n_subjects = 2 * cfg.subjects_per_class;
  for (std::size_t s = 0; s < n_subjects; ++s) {
    const ClassLabel label = s % 2 == 0 ? ClassLabel::control : ClassLabel::patient;
    Rng rng = make_rng(cfg.seed, "subject", s);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    phantom::SubjectDraw d;
    d.gain = 1.0 + cfg.intensity_jitter * (2 * unit(rng) - 1);
    d.radius = 0.97 + 0.06 * unit(rng);
    d.severity = 0.5 + unit(rng);  // uniform [0.5, 1.5]
    for (double& f : d.field) f = 0.04 * (2 * unit(rng) - 1);
    d.timepoints = 1 + static_cast<std::size_t>(std::min(2.0, std::floor(3 * unit(rng))));

    const Tensor<float> clean = phantom::clean_volume(cfg, cohort.atlas, d, label);
    SubjectRecord rec{phantom::subject_id(s), label, d.timepoints, {}};
    for (std::size_t t = 0; t < d.timepoints; ++t) {
      Rng noise_rng = make_rng(cfg.seed, "noise", s * 8 + t);
      std::normal_distribution<double> noise(0.0, cfg.noise);
      std::vector<float> values(clean.values());
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] == 0.0f) continue;  // background stays empty
        if (cfg.noise > 0)
          values[i] = static_cast<float>(std::clamp(static_cast<double>(values[i]) + noise(noise_rng), 0.0, 1.0));
      }
      VolumeSample sample;
      sample.volume = Tensor<float>({1, cfg.shape[0], cfg.shape[1], cfg.shape[2]}, std::move(values));
      sample.subject_id = rec.id;
      sample.timepoint = t;
      sample.label = label;
      rec.volume_refs.push_back(rec.id + "_t" + std::to_string(t));
      cohort.samples.push_back(std::move(sample));
    }
    cohort.subjects.push_back(std::move(rec));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Subject-wise split

struct DatasetSplit {
  std::vector<std::string> train_ids, validation_ids, test_ids;
  std::vector<VolumeSample> train, validation, test;
};

/// Samples test and validation subjects per class; every timepoint follows
/// its subject. Id lists are sorted.
inline DatasetSplit split_subjectwise(const std::vector<SubjectRecord>& subjects,
                                      const std::vector<VolumeSample>& samples, std::size_t test_per_class,
                                      std::size_t val_per_class, std::uint64_t seed) {
  DatasetSplit split;
  Rng rng = make_rng(seed, "split");
  std::map<std::string, int> assignment;  // 0 train, 1 validation, 2 test
  for (ClassLabel label : {ClassLabel::control, ClassLabel::patient}) {
    std::vector<std::string> ids;
    for (const auto& s : subjects)
      if (s.label == label) ids.push_back(s.id);
    std::sort(ids.begin(), ids.end());
    if (ids.size() <= test_per_class + val_per_class)
      throw DataError(detail::concat("split: class ", to_string(label), " has ", ids.size(),
                                     " subjects but test+validation need ", test_per_class + val_per_class,
                                     " plus at least one for training"));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); ++i)
      assignment[ids[i]] = i < test_per_class ? 2 : (i < test_per_class + val_per_class ? 1 : 0);
  }
  for (const auto& [id, where] : assignment)
    (where == 0 ? split.train_ids : where == 1 ? split.validation_ids : split.test_ids).push_back(id);
  for (const auto& s : samples) {
    auto it = assignment.find(s.subject_id);
    if (it == assignment.end()) throw DataError("split: sample references unknown subject " + s.subject_id);
    (it->second == 0 ? split.train : it->second == 1 ? split.validation : split.test).push_back(s);
  }
  return split;
}

// ---------------------------------------------------------------------------
// External volumes

/// Min-max scales to [0, 1]; a constant volume maps to all zeros.
inline Tensor<float> minmax_scale(const Tensor<float>& v) {
  const auto [lo_it, hi_it] = std::minmax_element(v.data().begin(), v.data().end());
  const double lo = *lo_it, hi = *hi_it;
  Tensor<float> out(v.shape());
  if (hi > lo)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - lo) / (hi - lo));
  return out;
}

/// Reads a volume container (.arob) or single-file NIfTI-1 (.nii), checks the
/// spatial shape and min-max scales intensities.
inline VolumeSample ingest_volume(const io::fs::path& path, const std::array<std::size_t, 3>& expected) {
  const bool nifti = io::looks_like_nifti(path);
  io::AnyTensor any = nifti ? io::import_nifti(path) : io::read_container(path);
  Tensor<float> vol = std::visit([](auto& t) { return t.template cast<float>(); }, any);
  Shape spatial = vol.shape();
  if (spatial.size() == 4 && spatial[0] == 1) spatial.erase(spatial.begin());
  const Shape want{expected[0], expected[1], expected[2]};
  if (spatial != want)
    throw ShapeError("ingest " + path.string() + ": shape " + shape_str(vol.shape()) + " does not match expected " +
                     shape_str(want));
  VolumeSample s;
  s.volume = minmax_scale(vol).reshaped({1, want[0], want[1], want[2]});
  s.subject_id = path.stem().string();
  if (!nifti) {
    const auto meta = io::read_sidecar(path);
    if (meta.contains("subject")) s.subject_id = meta["subject"].get<std::string>();
    if (meta.contains("timepoint")) s.timepoint = meta["timepoint"].get<std::size_t>();
    if (meta.contains("label")) s.label = parse_class_label(meta["label"].get<std::string>());
  }
  return s;
}

}  // namespace arob
