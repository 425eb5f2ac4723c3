#pragma once

// Experiment configuration: one JSON document, every section optional,
// unknown keys rejected.

#include <set>

#include "json.hpp"

#include "arob/attribution.hpp"
#include "arob/io/binary.hpp"
#include "arob/io/checkpoint.hpp"
#include "arob/phantom.hpp"
#include "arob/train.hpp"

namespace arob::io {

struct SplitConfig {
  std::size_t test_per_class = 8;
  std::size_t val_per_class = 5;
  std::uint64_t seed = 1;
};

struct AtlasOverride {
  std::string labels;   // label volume (container or .nii); empty = synthetic atlas
  std::string regions;  // `id,name` table
};

struct ExperimentConfig {
  std::string output_dir = "arob-out";
  PhantomConfig phantom;
  SplitConfig split;
  NetworkSpec network;
  TrainConfig train;
  OcclusionConfig occlusion;
  LrpConfig lrp;
  AtlasOverride atlas;
  std::size_t top_k = 10;

  void validate() const {
    phantom.validate();
    network.validate();
    train.validate();
    occlusion.validate();
    lrp.validate();
    if (network.spatial != phantom.shape)
      throw DataError("config: network.spatial must equal phantom.shape");
    if (top_k == 0) throw DataError("config: report.top_k must be positive");
    if (atlas.labels.empty() != atlas.regions.empty())
      throw DataError("config: atlas.labels and atlas.regions must be given together");
  }
};

namespace detail {

class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw DataError("config: section '" + name_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw DataError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw DataError("config: unknown key '" + (name_.empty() ? k : name_ + "." + k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  root.get("output_dir", c.output_dir);

  if (const auto* p = root.child("phantom")) {
    detail::Section s(*p, "phantom");
    s.get("shape", c.phantom.shape);
    s.get("subjects_per_class", c.phantom.subjects_per_class);
    s.get("effect_region", c.phantom.effect_region);
    s.get("effect_size", c.phantom.effect_size);
    s.get("noise", c.phantom.noise);
    s.get("intensity_jitter", c.phantom.intensity_jitter);
    s.get("seed", c.phantom.seed);
    s.finish();
  }
  c.network.spatial = c.phantom.shape;
  if (const auto* p = root.child("split")) {
    detail::Section s(*p, "split");
    s.get("test_per_class", c.split.test_per_class);
    s.get("val_per_class", c.split.val_per_class);
    s.get("seed", c.split.seed);
    s.finish();
  }
  if (const auto* p = root.child("network")) {
    detail::Section s(*p, "network");
    std::vector<std::size_t> filters, pools;
    for (const auto& b : c.network.blocks) {
      filters.push_back(b.filters);
      pools.push_back(b.pool);
    }
    s.get("filters", filters);
    s.get("pools", pools);
    if (filters.size() != pools.size()) throw DataError("config: network.filters and network.pools differ in length");
    c.network.blocks.clear();
    for (std::size_t i = 0; i < filters.size(); ++i) c.network.blocks.push_back({filters[i], pools[i]});
    s.get("dense_hidden", c.network.dense_hidden);
    s.get("dropout", c.network.dropout);
    s.get("bn_epsilon", c.network.bn_epsilon);
    s.get("bn_momentum", c.network.bn_momentum);
    s.finish();
  }
  if (const auto* p = root.child("train")) {
    detail::Section s(*p, "train");
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("beta1", c.train.beta1);
    s.get("beta2", c.train.beta2);
    s.get("adam_eps", c.train.adam_eps);
    s.get("patience", c.train.patience);
    s.get("max_epochs", c.train.max_epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("repetitions", c.train.repetitions);
    s.get("base_seed", c.train.base_seed);
    s.get("sagittal_flip_p", c.train.sagittal_flip_p);
    std::array<int, 2> shift{c.train.coronal_shift_min, c.train.coronal_shift_max};
    s.get("coronal_shift_range", shift);
    c.train.coronal_shift_min = shift[0];
    c.train.coronal_shift_max = shift[1];
    s.finish();
  }
  if (const auto* p = root.child("occlusion")) {
    detail::Section s(*p, "occlusion");
    s.get("patch", c.occlusion.patch);
    s.get("stride", c.occlusion.stride);
    s.get("fill", c.occlusion.fill);
    s.finish();
  }
  if (const auto* p = root.child("lrp")) {
    detail::Section s(*p, "lrp");
    s.get("epsilon", c.lrp.epsilon);
    std::string mode = c.lrp.batchnorm == BatchNormLrp::identity_pass ? "identity-pass" : "merged-linear";
    s.get("batchnorm", mode);
    if (mode == "identity-pass") c.lrp.batchnorm = BatchNormLrp::identity_pass;
    else if (mode == "merged-linear") c.lrp.batchnorm = BatchNormLrp::merged_linear;
    else throw DataError("config: lrp.batchnorm must be identity-pass or merged-linear");
    s.finish();
  }
  if (const auto* p = root.child("atlas")) {
    detail::Section s(*p, "atlas");
    s.get("labels", c.atlas.labels);
    s.get("regions", c.atlas.regions);
    s.finish();
  }
  if (const auto* p = root.child("report")) {
    detail::Section s(*p, "report");
    s.get("top_k", c.top_k);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  std::vector<std::size_t> filters, pools;
  for (const auto& b : c.network.blocks) {
    filters.push_back(b.filters);
    pools.push_back(b.pool);
  }
  return {
      {"output_dir", c.output_dir},
      {"phantom",
       {{"shape", c.phantom.shape},
        {"subjects_per_class", c.phantom.subjects_per_class},
        {"effect_region", c.phantom.effect_region},
        {"effect_size", c.phantom.effect_size},
        {"noise", c.phantom.noise},
        {"intensity_jitter", c.phantom.intensity_jitter},
        {"seed", c.phantom.seed}}},
      {"split",
       {{"test_per_class", c.split.test_per_class}, {"val_per_class", c.split.val_per_class}, {"seed", c.split.seed}}},
      {"network",
       {{"filters", filters},
        {"pools", pools},
        {"dense_hidden", c.network.dense_hidden},
        {"dropout", c.network.dropout},
        {"bn_epsilon", c.network.bn_epsilon},
        {"bn_momentum", c.network.bn_momentum}}},
      {"train",
       {{"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"adam_eps", c.train.adam_eps},
        {"patience", c.train.patience},
        {"max_epochs", c.train.max_epochs},
        {"batch_size", c.train.batch_size},
        {"repetitions", c.train.repetitions},
        {"base_seed", c.train.base_seed},
        {"sagittal_flip_p", c.train.sagittal_flip_p},
        {"coronal_shift_range", {c.train.coronal_shift_min, c.train.coronal_shift_max}}}},
      {"occlusion", {{"patch", c.occlusion.patch}, {"stride", c.occlusion.stride}, {"fill", c.occlusion.fill}}},
      {"lrp",
       {{"epsilon", c.lrp.epsilon},
        {"batchnorm", c.lrp.batchnorm == BatchNormLrp::identity_pass ? "identity-pass" : "merged-linear"}}},
      {"atlas", {{"labels", c.atlas.labels}, {"regions", c.atlas.regions}}},
      {"report", {{"top_k", c.top_k}}},
  };
}

inline ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace arob::io
