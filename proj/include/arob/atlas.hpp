#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "arob/error.hpp"
#include "arob/tensor.hpp"

namespace arob {

using RegionId = std::int32_t;

struct RegionInfo {
  RegionId id = 0;
  std::string name;
  std::size_t voxels = 0;
};

/// Integer label volume plus its region table. Label 0 is background and
/// never appears in the table.
class RegionAtlas {
 public:
  RegionAtlas() = default;

  /// Builds the table from a label volume. Every nonzero label must be named.
  RegionAtlas(Tensor<std::int32_t> labels, const std::map<RegionId, std::string>& names) : labels_(std::move(labels)) {
    std::map<RegionId, std::size_t> counts;
    for (std::int32_t v : labels_.data())
      if (v != 0) ++counts[v];
    for (const auto& [id, n] : counts) {
      auto it = names.find(id);
      if (it == names.end())
        throw DataError(detail::concat("atlas: label ", id, " occurs in the volume but not in the region table"));
      table_[id] = RegionInfo{id, it->second, n};
    }
    // Named regions without voxels are kept with a zero count; metrics skip them.
    for (const auto& [id, name] : names)
      if (id != 0 && !table_.count(id)) table_[id] = RegionInfo{id, name, 0};
  }

  const Tensor<std::int32_t>& labels() const noexcept { return labels_; }
  const std::map<RegionId, RegionInfo>& regions() const noexcept { return table_; }
  const Shape& shape() const noexcept { return labels_.shape(); }

  const RegionInfo& region(RegionId id) const {
    auto it = table_.find(id);
    if (it == table_.end()) throw DataError(detail::concat("atlas: unknown region id ", id));
    return it->second;
  }
  bool has_region(RegionId id) const { return table_.count(id) > 0; }

  std::optional<RegionId> find(const std::string& name) const {
    for (const auto& [id, info] : table_)
      if (info.name == name) return id;
    return std::nullopt;
  }

 private:
  Tensor<std::int32_t> labels_;
  std::map<RegionId, RegionInfo> table_;
};

/// Parses a region table with one `id,name` pair per line. Blank lines and
/// lines starting with '#' are ignored.
inline std::map<RegionId, std::string> parse_region_table(const std::string& text) {
  std::map<RegionId, std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') {
      if (end == text.size()) break;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError(detail::concat("region table line ", line_no, ": expected `id,name`"));
    RegionId id;
    try {
      std::size_t used = 0;
      id = std::stoi(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(detail::concat("region table line ", line_no, ": bad id"));
    }
    if (id == 0) throw FormatError(detail::concat("region table line ", line_no, ": id 0 is reserved for background"));
    if (!out.emplace(id, line.substr(comma + 1)).second)
      throw FormatError(detail::concat("region table line ", line_no, ": duplicate id ", id));
    if (end == text.size()) break;
  }
  return out;
}

inline std::string format_region_table(const RegionAtlas& atlas) {
  std::string out;
  for (const auto& [id, info] : atlas.regions()) out += std::to_string(id) + "," + info.name + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Region metrics

using RegionScores = std::map<RegionId, double>;

namespace detail {

template <typename T>
void require_atlas_shape(const Tensor<T>& h, const RegionAtlas& atlas, const char* who) {
  if (h.shape() != atlas.shape())
    throw ShapeError(concat(who, ": heatmap shape ", shape_str(h.shape()), " does not match atlas ",
                            shape_str(atlas.shape())));
}

}  // namespace detail

/// Sum of absolute heatmap values per region (background excluded).
template <typename T>
RegionScores region_sum(const Tensor<T>& heatmap, const RegionAtlas& atlas) {
  detail::require_atlas_shape(heatmap, atlas, "region_sum");
  RegionScores out;
  for (const auto& [id, info] : atlas.regions())
    if (info.voxels > 0) out[id] = 0.0;
  const auto labels = atlas.labels().data();
  for (std::size_t i = 0; i < heatmap.size(); ++i)
    if (labels[i] != 0) out[labels[i]] += std::abs(static_cast<double>(heatmap[i]));
  return out;
}

/// Regional mean of absolute values. Regions with no voxels are left out;
/// the ids dropped are appended to `skipped` when given.
template <typename T>
RegionScores region_density(const Tensor<T>& heatmap, const RegionAtlas& atlas,
                            std::vector<RegionId>* skipped = nullptr) {
  RegionScores sums = region_sum(heatmap, atlas);
  RegionScores out;
  for (const auto& [id, info] : atlas.regions()) {
    if (info.voxels == 0) {
      if (skipped) skipped->push_back(id);
      continue;
    }
    out[id] = sums.at(id) / static_cast<double>(info.voxels);
  }
  return out;
}

inline constexpr double kGainFloor = 1e-12;

/// Ratio of regional absolute sums, patients over controls. Regions whose
/// control sum is below kGainFloor have no defined gain and are reported in
/// `undefined` instead.
template <typename T>
RegionScores region_gain(const Tensor<T>& patient_mean, const Tensor<T>& control_mean, const RegionAtlas& atlas,
                         std::vector<RegionId>* undefined = nullptr) {
  detail::require_atlas_shape(patient_mean, atlas, "region_gain");
  detail::require_atlas_shape(control_mean, atlas, "region_gain");
  const RegionScores p = region_sum(patient_mean, atlas);
  const RegionScores c = region_sum(control_mean, atlas);
  RegionScores out;
  for (const auto& [id, cs] : c) {
    if (cs < kGainFloor) {
      if (undefined) undefined->push_back(id);
      continue;
    }
    out[id] = p.at(id) / cs;
  }
  return out;
}

struct TopK {
  std::vector<RegionId> ids;
  bool truncated = false;  // fewer than k scored regions were available
};

/// Highest-scoring k regions, descending; ties go to the lower id.
inline TopK top_k(const RegionScores& scores, std::size_t k = 10) {
  std::vector<std::pair<RegionId, double>> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  TopK out;
  out.truncated = v.size() < k;
  for (std::size_t i = 0; i < std::min(k, v.size()); ++i) out.ids.push_back(v[i].first);
  return out;
}

/// Rank (1 = highest) of every scored region under the top_k ordering.
inline std::map<RegionId, std::size_t> ranks(const RegionScores& scores) {
  const TopK all = top_k(scores, scores.size());
  std::map<RegionId, std::size_t> out;
  for (std::size_t i = 0; i < all.ids.size(); ++i) out[all.ids[i]] = i + 1;
  return out;
}

enum class RegionMetric { sum, density, gain };

inline const char* to_string(RegionMetric m) {
  switch (m) {
    case RegionMetric::sum: return "sum";
    case RegionMetric::density: return "density";
    case RegionMetric::gain: return "gain";
  }
  return "?";
}

/// Per-region scores for one (run, method, group) with per-metric ranks.
struct RegionScoreTable {
  std::size_t run = 0;
  std::string method;
  std::string group;
  RegionScores sum, density, gain;  // gain empty when not computed
  std::vector<RegionId> gain_undefined;

  const RegionScores& scores(RegionMetric m) const {
    switch (m) {
      case RegionMetric::sum: return sum;
      case RegionMetric::density: return density;
      default: return gain;
    }
  }
};

}  // namespace arob
