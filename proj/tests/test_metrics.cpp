#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "arob/robustness.hpp"
#include "support.hpp"

using namespace arob;

namespace {

// 6³ atlas: three slabs along D (ids 1, 2, 3 of 72 voxels each), with the
// first two D-planes of region 3 relabelled as background.
RegionAtlas slab_atlas() {
  Tensor<std::int32_t> labels({6, 6, 6});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t d = i / 36;
    labels[i] = d < 2 ? 1 : d < 3 ? 2 : d < 4 ? 0 : 3;
  }
  return RegionAtlas(labels, {{1, "a"}, {2, "b"}, {3, "c"}});
}

// 20 regions of random sizes over a 6³ volume, some background.
RegionAtlas random_atlas(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 20);
  Tensor<std::int32_t> labels({6, 6, 6});
  for (auto& v : labels.data()) v = u(rng);
  std::map<RegionId, std::string> names;
  for (int r = 1; r <= 20; ++r) names[r] = "r" + std::to_string(r);
  return RegionAtlas(labels, names);
}

TEST(Atlas, TableCountsVoxelsAndRejectsUnnamedLabels) {
  const auto a = slab_atlas();
  EXPECT_EQ(a.region(1).voxels, 72u);
  EXPECT_EQ(a.region(2).voxels, 36u);
  EXPECT_EQ(a.region(3).voxels, 72u);
  EXPECT_FALSE(a.has_region(0));
  EXPECT_THROW(RegionAtlas(Tensor<std::int32_t>({2}, {1, 4}), {{1, "a"}}), DataError);
}

TEST(Atlas, RegionTableParsing) {
  const auto t = parse_region_table("# id,name\n1,hippocampus\n\n7,ventricle,left\n");
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at(7), "ventricle,left");
  EXPECT_THROW(parse_region_table("0,background\n"), FormatError);
  EXPECT_THROW(parse_region_table("1,a\n1,b\n"), FormatError);
  EXPECT_THROW(parse_region_table("x,a\n"), FormatError);
}

TEST(RegionSum, OnesCountVoxelsAndSignsAreIgnored) {
  const auto a = slab_atlas();
  const auto s = region_sum(Tensor<float>({6, 6, 6}, 1.0f), a);
  EXPECT_EQ(s.at(1), 72.0);
  EXPECT_EQ(s.at(2), 36.0);
  EXPECT_EQ(s.at(3), 72.0);
  Tensor<float> signed_map({6, 6, 6});
  for (std::size_t i = 0; i < signed_map.size(); ++i) signed_map[i] = i % 2 ? 1.0f : -1.0f;
  EXPECT_EQ(region_sum(signed_map, a).at(2), 36.0);
}

TEST(RegionSum, MatchesVoxelLoop) {
  const auto a = slab_atlas();
  const auto h = fixtures::random_tensor<double>({6, 6, 6}, 5);
  double want[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < h.size(); ++i) want[a.labels()[i]] += std::abs(h[i]);
  const auto s = region_sum(h, a);
  for (RegionId r = 1; r <= 3; ++r) EXPECT_DOUBLE_EQ(s.at(r), want[r]);
  EXPECT_THROW(region_sum(Tensor<double>({6, 6, 5}), a), ShapeError);
}

TEST(RegionSum, PartitionProperty) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_atlas(seed);
    const auto h = fixtures::random_tensor<float>({6, 6, 6}, 50 + seed, -3, 3);
    double regions = 0, voxels = 0;
    for (const auto& [id, v] : region_sum(h, a)) regions += v;
    for (std::size_t i = 0; i < h.size(); ++i)
      if (a.labels()[i] != 0) voxels += std::abs(h[i]);
    EXPECT_NEAR(regions, voxels, 1e-4);
  }
}

TEST(RegionDensity, Examples) {
  const auto a = slab_atlas();
  for (const auto& [id, v] : region_density(Tensor<float>({6, 6, 6}, -2.5f), a)) EXPECT_DOUBLE_EQ(v, 2.5) << id;

  // Same sum, region 1 twice the size of region 2 -> half the density.
  Tensor<float> h({6, 6, 6});
  h[0] = 36.0f;                // region 1 (72 voxels)
  h[2 * 36] = 36.0f;           // region 2 (36 voxels)
  const auto d = region_density(h, a);
  EXPECT_DOUBLE_EQ(d.at(1), 0.5);
  EXPECT_DOUBLE_EQ(d.at(2), 1.0);
  EXPECT_DOUBLE_EQ(d.at(3), 0.0);

  // Hand table: region 3 gets 4 voxels of 0.75 and one of -3.
  Tensor<float> g({6, 6, 6});
  for (int i = 0; i < 4; ++i) g[4 * 36 + i] = 0.75f;
  g[5 * 36] = -3.0f;
  EXPECT_DOUBLE_EQ(region_density(g, a).at(3), 6.0 / 72.0);
}

TEST(RegionDensity, EmptyRegionsAreSkipped) {
  const RegionAtlas a(Tensor<std::int32_t>({2, 1, 1}, {1, 1}), {{1, "a"}, {2, "empty"}});
  std::vector<RegionId> skipped;
  const auto d = region_density(Tensor<float>({2, 1, 1}, 1.0f), a, &skipped);
  EXPECT_EQ(d.size(), 1u);
  EXPECT_EQ(skipped, std::vector<RegionId>{2});
}

TEST(RegionGain, Examples) {
  const auto a = slab_atlas();
  const auto c = fixtures::random_tensor<float>({6, 6, 6}, 7);
  for (const auto& [id, v] : region_gain(c, c, a)) EXPECT_DOUBLE_EQ(v, 1.0);

  Tensor<float> p = c;
  for (std::size_t i = 2 * 36; i < 3 * 36; ++i) p[i] *= 2.0f;
  const auto g = region_gain(p, c, a);
  EXPECT_NEAR(g.at(2), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(g.at(1), 1.0);

  const auto ps = region_sum(p, a), cs = region_sum(c, a);
  for (RegionId r = 1; r <= 3; ++r) EXPECT_DOUBLE_EQ(g.at(r), ps.at(r) / cs.at(r));

  // Common positive scaling of both groups leaves gain unchanged.
  const auto g3 = region_gain(mul(p, 4.0f), mul(c, 4.0f), a);
  for (RegionId r = 1; r <= 3; ++r) EXPECT_NEAR(g3.at(r), g.at(r), 1e-6);

  Tensor<float> zero_c = c;
  for (std::size_t i = 0; i < 72; ++i) zero_c[i] = 0.0f;
  std::vector<RegionId> undefined;
  const auto gz = region_gain(p, zero_c, a, &undefined);
  EXPECT_FALSE(gz.count(1));
  EXPECT_EQ(undefined, std::vector<RegionId>{1});
}

TEST(TopK, OrderAndTies) {
  EXPECT_EQ(top_k({{1, 3.0}, {2, 2.0}, {3, 1.0}}, 2).ids, (std::vector<RegionId>{1, 2}));
  EXPECT_EQ(top_k({{5, 2.0}, {2, 2.0}, {9, 1.0}}, 2).ids, (std::vector<RegionId>{2, 5}));
  const auto few = top_k({{1, 1.0}}, 10);
  EXPECT_TRUE(few.truncated);
  EXPECT_EQ(few.ids.size(), 1u);
}

TEST(TopK, MatchesSortOracleOnTwentyRegions) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> u(0, 6);  // coarse values force ties
  for (int trial = 0; trial < 20; ++trial) {
    RegionScores s;
    std::vector<std::pair<double, RegionId>> oracle;
    for (RegionId r = 1; r <= 20; ++r) {
      s[r] = u(rng);
      oracle.emplace_back(-s[r], r);
    }
    std::sort(oracle.begin(), oracle.end());
    std::vector<RegionId> want;
    for (int i = 0; i < 10; ++i) want.push_back(oracle[i].second);
    EXPECT_EQ(top_k(s, 10).ids, want);
    const auto r = ranks(s);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_EQ(r.at(oracle[i].second), i + 1);
  }
}

TEST(TopK, ScalingLeavesRankingsUnchanged) {
  const auto a = random_atlas(3);
  const auto h = fixtures::random_tensor<float>({6, 6, 6}, 4);
  const auto h5 = mul(h, 5.0f);
  EXPECT_EQ(ranks(region_sum(h, a)), ranks(region_sum(h5, a)));
  EXPECT_EQ(top_k(region_density(h, a)).ids, top_k(region_density(h5, a)).ids);
  const auto s = region_sum(h, a), s5 = region_sum(h5, a);
  for (const auto& [id, v] : s) EXPECT_NEAR(s5.at(id), 5 * v, 1e-4);
}

TEST(MeanHeatmap, Examples) {
  const auto h = fixtures::random_tensor<float>({3, 4}, 1);
  EXPECT_EQ(mean_heatmap<float>({h}).values(), h.values());
  const auto cancelled = mean_heatmap<float>({h, mul(h, -1.0f)});
  for (float v : cancelled.data()) EXPECT_EQ(v, 0.0f);
  const auto a = fixtures::random_tensor<double>({5}, 2), b = fixtures::random_tensor<double>({5}, 3),
             c = fixtures::random_tensor<double>({5}, 4);
  const auto m = mean_heatmap<double>({a, b, c});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(m[i], (a[i] + b[i] + c[i]) / 3);
  EXPECT_THROW(mean_heatmap<float>({}), DataError);
  EXPECT_THROW(mean_heatmap<float>({Tensor<float>({2}), Tensor<float>({3})}), ShapeError);
}

TEST(MaxScale, Examples) {
  const Tensor<float> h({4}, {2.f, -4.f, 1.f, 0.f});
  const auto s = max_scale(h);
  EXPECT_EQ(s.values(), (std::vector<float>{0.5f, -1.f, 0.25f, 0.f}));
  EXPECT_EQ(max_scale(Tensor<float>({3})).values(), std::vector<float>(3, 0.f));
  const auto r = fixtures::random_tensor<float>({50}, 6);
  const auto once = max_scale(r), twice = max_scale(once);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(once[i], twice[i], 1e-7);
}

TEST(PairwiseL2, Examples) {
  const Tensor<double> z({2}, {0, 0}), t({2}, {3, 4});
  const auto r = pairwise_l2<double>({z, t});
  EXPECT_DOUBLE_EQ(r.matrix.at(0, 1), 5.0);
  EXPECT_DOUBLE_EQ(r.mean, 5.0);

  const auto h = fixtures::random_tensor<float>({4, 4}, 1);
  const auto same = pairwise_l2<float>(std::vector<Tensor<float>>(4, h));
  EXPECT_EQ(same.mean, 0.0);
  for (double v : same.matrix.values) EXPECT_EQ(v, 0.0);

  std::vector<Tensor<float>> ten;
  std::vector<double> entries;
  for (int i = 0; i < 10; ++i) ten.push_back(fixtures::random_tensor<float>({8}, 100 + i));
  const auto r10 = pairwise_l2(ten);
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = i + 1; j < 10; ++j, ++pairs) total += l2_distance(ten[i], ten[j]);
  EXPECT_EQ(pairs, 45u);
  EXPECT_NEAR(r10.mean, total / 45, 1e-12);

  EXPECT_THROW(pairwise_l2<float>({h}), DataError);
  EXPECT_THROW(pairwise_l2<float>({h, Tensor<float>({16})}), ShapeError);
}

TEST(PairwiseL2, IsAMetricOnRandomTriples) {
  for (std::uint64_t t = 0; t < 20; ++t) {
    std::vector<Tensor<float>> m;
    for (int i = 0; i < 3; ++i) m.push_back(fixtures::random_tensor<float>({6, 6, 6}, 1000 + 3 * t + i));
    const auto r = pairwise_l2(m);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(r.matrix.at(i, i), 0.0);
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(r.matrix.at(i, j), r.matrix.at(j, i));
        for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(r.matrix.at(i, k), r.matrix.at(i, j) + r.matrix.at(j, k) + 1e-9);
      }
    }
  }
}

TEST(PairwiseL2, ScalesWithACommonFactor) {
  std::vector<Tensor<float>> m, m3;
  for (int i = 0; i < 4; ++i) {
    m.push_back(fixtures::random_tensor<float>({20}, 40 + i));
    m3.push_back(mul(m.back(), 3.0f));
  }
  EXPECT_NEAR(pairwise_l2(m3).mean, 3 * pairwise_l2(m).mean, 1e-5);
}

TEST(TopkIntersection, FixtureCases) {
  const std::vector<RegionId> a{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const std::vector<RegionId> same{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  const std::vector<RegionId> disjoint{11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  const std::vector<RegionId> seven{1, 2, 3, 4, 5, 6, 7, 18, 19, 20};
  EXPECT_DOUBLE_EQ(topk_intersection({a, same}).mean, 100.0);
  EXPECT_DOUBLE_EQ(topk_intersection({a, disjoint}).mean, 0.0);
  EXPECT_DOUBLE_EQ(topk_intersection({a, seven}).mean, 70.0);
  const auto r = topk_intersection({a, disjoint, seven});
  EXPECT_EQ(r.matrix.at(1, 1), 100.0);
  EXPECT_EQ(r.matrix.at(2, 1), r.matrix.at(1, 2));
  EXPECT_DOUBLE_EQ(r.matrix.at(1, 2), 30.0);
  EXPECT_DOUBLE_EQ(r.mean, (0.0 + 70.0 + 30.0) / 3);
  EXPECT_THROW(topk_intersection({a, {1, 2}}), DataError);
}

TEST(Report, AllRunsSharingOneModelArePerfectlyCoherent) {
  const auto atlas = random_atlas(8);
  const auto tp = fixtures::random_tensor<float>({6, 6, 6}, 1), tn = fixtures::random_tensor<float>({6, 6, 6}, 2);
  MethodRunSet set{"lrp", {}};
  for (std::size_t r = 0; r < 5; ++r) set.runs.push_back({r, tp, tn});
  const auto rep = build_report({set}, atlas, {{0, 0.9}, {1, 0.8}, {2, 1.0}, {3, 0.9}, {4, 0.9}});
  ASSERT_EQ(rep.methods.size(), 1u);
  const auto& m = rep.methods[0];
  EXPECT_EQ(m.l2_tp->mean, 0.0);
  EXPECT_EQ(m.l2_tn->mean, 0.0);
  EXPECT_EQ(m.sum->mean, 100.0);
  EXPECT_EQ(m.density->mean, 100.0);
  EXPECT_EQ(m.gain->mean, 100.0);
  EXPECT_TRUE(m.gaps.empty());
  EXPECT_DOUBLE_EQ(rep.accuracy.mean, 0.9);
  EXPECT_DOUBLE_EQ(rep.accuracy.min, 0.8);
}

TEST(Report, ScalingEveryHeatmapKeepsIntersections) {
  const auto atlas = random_atlas(9);
  MethodRunSet set{"gxi", {}}, scaled{"gxi", {}};
  for (std::size_t r = 0; r < 4; ++r) {
    const auto tp = fixtures::random_tensor<float>({6, 6, 6}, 10 + r);
    const auto tn = fixtures::random_tensor<float>({6, 6, 6}, 20 + r);
    set.runs.push_back({r, tp, tn});
    scaled.runs.push_back({r, mul(tp, 7.0f), mul(tn, 7.0f)});
  }
  const auto a = method_coherence(set, atlas, 10), b = method_coherence(scaled, atlas, 10);
  EXPECT_EQ(a.sum->mean, b.sum->mean);
  EXPECT_EQ(a.density->mean, b.density->mean);
  EXPECT_EQ(a.gain->mean, b.gain->mean);
}

TEST(Report, MissingGroupsBecomeGaps) {
  const auto atlas = random_atlas(8);
  MethodRunSet set{"occ", {}};
  set.runs.push_back({0, fixtures::random_tensor<float>({6, 6, 6}, 1), std::nullopt});
  set.runs.push_back({1, fixtures::random_tensor<float>({6, 6, 6}, 2), std::nullopt});
  const auto m = method_coherence(set, atlas, 10);
  EXPECT_TRUE(m.l2_tp.has_value());
  EXPECT_FALSE(m.l2_tn.has_value());
  EXPECT_FALSE(m.gain.has_value());
  EXPECT_FALSE(m.gaps.empty());
}

}  // namespace
