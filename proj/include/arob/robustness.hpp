#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "arob/atlas.hpp"
#include "arob/error.hpp"
#include "arob/tensor.hpp"
#include "arob/train.hpp"

namespace arob {

/// Voxelwise mean of signed heatmaps, accumulated in double.
template <typename T>
Tensor<T> mean_heatmap(const std::vector<Tensor<T>>& maps) {
  if (maps.empty()) throw DataError("mean_heatmap: empty heatmap set");
  const Shape& shape = maps.front().shape();
  std::vector<double> acc(maps.front().size(), 0.0);
  for (const auto& m : maps) {
    if (m.shape() != shape)
      throw ShapeError("mean_heatmap: shape " + shape_str(m.shape()) + " differs from " + shape_str(shape));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(m[i]);
  }
  Tensor<T> out(shape);
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / n);
  return out;
}

/// h / max|h|; an all-zero map is returned unchanged.
template <typename T>
Tensor<T> max_scale(const Tensor<T>& h) {
  T peak{0};
  for (T v : h.data()) peak = std::max(peak, static_cast<T>(std::abs(v)));
  if (peak == T{0}) return h;
  Tensor<T> out = h;
  for (T& v : out.data()) v /= peak;
  return out;
}

/// Symmetric run-by-run matrix, row-major.
struct PairwiseMatrix {
  std::size_t n = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values.at(i * n + j); }
  double& at(std::size_t i, std::size_t j) { return values.at(i * n + j); }
};

struct PairwiseResult {
  PairwiseMatrix matrix;
  double mean = 0.0;  // over unordered pairs, diagonal excluded
};

namespace detail {

inline PairwiseResult pairwise(std::size_t n, double diagonal, const auto& entry) {
  PairwiseResult r;
  r.matrix.n = n;
  r.matrix.values.assign(n * n, diagonal);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = entry(i, j);
      r.matrix.at(i, j) = r.matrix.at(j, i) = v;
      total += v;
    }
  r.mean = total / static_cast<double>(n * (n - 1) / 2);
  return r;
}

}  // namespace detail

template <typename T>
double l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("pairwise_l2: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

template <typename T>
PairwiseResult pairwise_l2(const std::vector<Tensor<T>>& maps) {
  if (maps.size() < 2) throw DataError("pairwise_l2: need at least 2 runs, got " + std::to_string(maps.size()));
  return detail::pairwise(maps.size(), 0.0,
                          [&](std::size_t i, std::size_t j) { return l2_distance(maps[i], maps[j]); });
}

/// Percentage overlap of top-k sets, order ignored.
inline PairwiseResult topk_intersection(const std::vector<std::vector<RegionId>>& lists) {
  if (lists.size() < 2)
    throw DataError("topk_intersection: need at least 2 runs, got " + std::to_string(lists.size()));
  const std::size_t k = lists.front().size();
  if (k == 0) throw DataError("topk_intersection: empty top-k list");
  std::vector<std::set<RegionId>> sets;
  for (const auto& l : lists) {
    if (l.size() != k)
      throw DataError("topk_intersection: lists have differing k (" + std::to_string(k) + " vs " +
                      std::to_string(l.size()) + ")");
    sets.emplace_back(l.begin(), l.end());
  }
  return detail::pairwise(lists.size(), 100.0, [&](std::size_t i, std::size_t j) {
    std::size_t shared = 0;
    for (RegionId id : sets[i]) shared += sets[j].count(id);
    return 100.0 * static_cast<double>(shared) / static_cast<double>(k);
  });
}

// ---------------------------------------------------------------------------
// Report

/// Per-run mean heatmaps of one method. A missing group mean means the
/// group was empty in that run.
struct RunMeans {
  std::size_t run = 0;
  std::optional<Tensor<float>> tp;
  std::optional<Tensor<float>> tn;
};

struct MethodRunSet {
  std::string method;
  std::vector<RunMeans> runs;
};

/// Region tables for one run: sum and density of the TP mean, gain of the
/// TP mean over the TN mean.
inline RegionScoreTable score_run(const RunMeans& means, const std::string& method, const RegionAtlas& atlas) {
  RegionScoreTable t;
  t.run = means.run;
  t.method = method;
  t.group = "tp";
  if (means.tp) {
    t.sum = region_sum(*means.tp, atlas);
    t.density = region_density(*means.tp, atlas);
    if (means.tn) t.gain = region_gain(*means.tp, *means.tn, atlas, &t.gain_undefined);
  }
  return t;
}

struct MethodCoherence {
  std::string method;
  std::optional<PairwiseResult> l2_tp, l2_tn;
  std::optional<PairwiseResult> sum, density, gain;  // top-k intersection %
  std::vector<std::size_t> runs;
  std::vector<std::string> gaps;
};

struct CoherenceReport {
  std::size_t top_k = 10;
  std::vector<MethodCoherence> methods;
  std::vector<std::pair<std::size_t, double>> run_accuracy;  // (run, balanced accuracy)
  AccuracySummary accuracy;
};

inline MethodCoherence method_coherence(const MethodRunSet& set, const RegionAtlas& atlas, std::size_t k) {
  MethodCoherence mc;
  mc.method = set.method;
  std::vector<Tensor<float>> tp, tn;
  std::vector<std::vector<RegionId>> by_sum, by_density, by_gain;
  for (const auto& rm : set.runs) {
    mc.runs.push_back(rm.run);
    if (rm.tp) tp.push_back(max_scale(*rm.tp));
    else mc.gaps.push_back("run " + std::to_string(rm.run) + ": no TP heatmaps");
    if (rm.tn) tn.push_back(max_scale(*rm.tn));
    else mc.gaps.push_back("run " + std::to_string(rm.run) + ": no TN heatmaps");
    const RegionScoreTable t = score_run(rm, set.method, atlas);
    if (rm.tp) {
      by_sum.push_back(top_k(t.sum, k).ids);
      by_density.push_back(top_k(t.density, k).ids);
    }
    if (rm.tp && rm.tn) by_gain.push_back(top_k(t.gain, k).ids);
  }
  auto guarded = [&](const char* what, auto&& fn) -> std::optional<PairwiseResult> {
    try {
      return fn();
    } catch (const DataError& e) {
      mc.gaps.push_back(std::string(what) + ": " + e.what());
      return std::nullopt;
    }
  };
  mc.l2_tp = guarded("l2_tp", [&] { return pairwise_l2(tp); });
  mc.l2_tn = guarded("l2_tn", [&] { return pairwise_l2(tn); });
  mc.sum = guarded("sum", [&] { return topk_intersection(by_sum); });
  mc.density = guarded("density", [&] { return topk_intersection(by_density); });
  mc.gain = guarded("gain", [&] { return topk_intersection(by_gain); });
  return mc;
}

inline CoherenceReport build_report(const std::vector<MethodRunSet>& sets, const RegionAtlas& atlas,
                                    const std::vector<std::pair<std::size_t, double>>& run_accuracy,
                                    std::size_t k = 10) {
  CoherenceReport r;
  r.top_k = k;
  for (const auto& s : sets) r.methods.push_back(method_coherence(s, atlas, k));
  r.run_accuracy = run_accuracy;
  std::vector<double> acc;
  for (const auto& [run, ba] : run_accuracy) acc.push_back(ba);
  r.accuracy = summarize_accuracy(acc);
  return r;
}

}  // namespace arob
