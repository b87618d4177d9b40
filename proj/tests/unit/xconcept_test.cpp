#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/fixture.hpp"
#include "faultline/random.hpp"
#include "faultline/xconcept.hpp"
#include "workspace.hpp"

namespace faultline {
namespace {

ClassifierHead random_head(Rng& rng, std::size_t classes, std::size_t maps) {
  std::vector<Vector> w(classes, Vector(maps));
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < classes; ++c) {
    for (double& x : w[c]) x = rng.normal();
    labels.push_back("c" + std::to_string(c));
  }
  return ClassifierHead(w, Vector(classes, 0.0), labels);
}

LabeledActivationSet random_set(Rng& rng, const ClassifierHead& head, std::size_t images, std::size_t side) {
  LabeledActivationSet set(head.labels(), head.num_maps(), side, side);
  for (std::size_t i = 0; i < images; ++i) {
    ActivationTensor a(head.num_maps(), side, side);
    for (double& x : a.values()) x = rng.uniform(0.0, 3.0);
    set.add({"img" + std::to_string(i), a, head.labels()[rng.index(head.num_classes())]});
  }
  return set;
}

std::vector<Superpixel> points_as_superpixels(const std::vector<Vector>& points) {
  std::vector<Superpixel> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    Superpixel s;
    s.image_id = "p" + std::to_string(i);
    s.map_index = 0;
    s.class_label = "x";
    s.feature = points[i];
    out.push_back(std::move(s));
  }
  return out;
}

TEST(ImportanceWeights, ZeroRowGivesZero) {
  const ClassifierHead head({Vector(3, 0.0), Vector{1, 2, 3}}, Vector(2, 0.0), {"z", "o"});
  const Vector alpha = importance_weights(head, ActivationTensor(3, 4, 4), "z");
  EXPECT_EQ(alpha, Vector(3, 0.0));
}

TEST(ImportanceWeights, UnitMapsReturnWeights) {
  Rng rng(4);
  const ClassifierHead head = random_head(rng, 3, 5);
  ActivationTensor a(5, 1, 1);
  for (double& x : a.values()) x = rng.uniform();
  const Vector alpha = importance_weights(head, a, "c1");
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(alpha[k], head.row(1)[k]);
}

TEST(ImportanceWeights, MatchesSummedFiniteDifferenceGradient) {
  Rng rng(6);
  const ClassifierHead head = random_head(rng, 4, 5);
  const GapLinearBackend backend(head);
  const double h = 1e-5;
  ActivationTensor a(5, 7, 7);
  for (double& x : a.values()) x = rng.uniform(0.0, 2.0);
  for (std::size_t c = 0; c < 4; ++c) {
    const Vector alpha = importance_weights(backend, a, head.labels()[c]);
    for (std::size_t k = 0; k < 5; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
          ActivationTensor plus = a, minus = a;
          plus.at(k, i, j) += h;
          minus.at(k, i, j) -= h;
          sum += (backend.logits(plus)[c] - backend.logits(minus)[c]) / (2 * h);
        }
      }
      const double expected = sum / 49.0;
      EXPECT_LT(std::abs(alpha[k] - expected) / std::max(1e-8, std::abs(expected)), 1e-4);
    }
  }
}

TEST(MaskedFeature, PoolsTopQuartileCells) {
  Rng rng(12);
  ActivationTensor a(3, 4, 4);
  for (double& x : a.values()) x = rng.uniform();
  std::vector<bool> mask;
  const Vector f = masked_feature(a, 1, &mask);
  // Oracle: rank cells of map 1, keep ceil(16/4) = 4, average every map there.
  std::vector<std::size_t> cells(16);
  std::iota(cells.begin(), cells.end(), 0);
  const auto plane = a.plane(1);
  std::stable_sort(cells.begin(), cells.end(), [&](std::size_t x, std::size_t y) { return plane[x] > plane[y]; });
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0.0;
    for (std::size_t r = 0; r < 4; ++r) s += a.plane(k)[cells[r]];
    EXPECT_NEAR(f[k], s / 4.0, 1e-12);
  }
  EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 4);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_TRUE(mask[cells[r]]);
}

TEST(TopSuperpixels, ExhaustiveWhenPEqualsM) {
  Rng rng(2);
  const ClassifierHead head = random_head(rng, 3, 4);
  const auto set = random_set(rng, head, 5, 3);
  const auto sp = select_top_superpixels(set, head, 4);
  EXPECT_EQ(sp.size(), 5u * 3u * 4u);
  std::map<std::pair<std::string, std::size_t>, int> seen;
  for (const auto& s : sp) ++seen[{s.image_id, s.map_index}];
  EXPECT_EQ(seen.size(), 20u);
  for (const auto& [key, n] : seen) EXPECT_EQ(n, 3);
}

TEST(TopSuperpixels, DominantMapWinsTopOne) {
  std::vector<Vector> w = {Vector{0, 0, 0, 5, 0}, Vector{1, -1, 1, -1, 1}};
  const ClassifierHead head(w, Vector(2, 0.0), {"dom", "other"});
  Rng rng(3);
  const auto set = random_set(rng, head, 6, 2);
  for (const auto& s : select_top_superpixels(set, head, 1)) {
    if (s.class_label == "dom") EXPECT_EQ(s.map_index, 3u);
  }
}

TEST(TopSuperpixels, MatchesFullSortOracle) {
  Rng rng(21);
  const ClassifierHead head = random_head(rng, 4, 6);
  const auto set = random_set(rng, head, 10, 3);
  const auto sp = select_top_superpixels(set, head, 2);
  std::multiset<std::tuple<std::string, std::string, std::size_t>> got;
  for (const auto& s : sp) got.emplace(s.image_id, s.class_label, s.map_index);

  std::multiset<std::tuple<std::string, std::string, std::size_t>> expected;
  for (const auto& item : set.items()) {
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
      std::vector<std::pair<double, std::size_t>> scored;
      for (std::size_t k = 0; k < 6; ++k) scored.emplace_back(head.row(c)[k] / 9.0, k);
      std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
        return x.first != y.first ? x.first > y.first : x.second < y.second;
      });
      for (std::size_t r = 0; r < 2; ++r) expected.emplace(item.image_id, head.labels()[c], scored[r].second);
    }
  }
  EXPECT_EQ(got, expected);
}

TEST(TopSuperpixels, PLargerThanMapsThrows) {
  Rng rng(2);
  const ClassifierHead head = random_head(rng, 2, 3);
  const auto set = random_set(rng, head, 2, 2);
  EXPECT_THROW(select_top_superpixels(set, head, 4), Error);
}

TEST(Silhouette, MatchesNaiveDefinition) {
  Rng rng(30);
  std::vector<Vector> pts;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 30; ++i) {
    pts.push_back({rng.normal(), rng.normal()});
    labels.push_back(static_cast<std::size_t>(i % 3));
  }
  labels[29] = 3;  // singleton
  auto dist = [&](std::size_t a, std::size_t b) { return std::hypot(pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]); };
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::map<std::size_t, std::pair<double, int>> by;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      by[labels[j]].first += dist(i, j);
      by[labels[j]].second += 1;
    }
    if (!by.count(labels[i])) continue;  // singleton scores 0
    const double a = by[labels[i]].first / by[labels[i]].second;
    double b = 1e300;
    for (const auto& [l, sc] : by) {
      if (l != labels[i]) b = std::min(b, sc.first / sc.second);
    }
    total += (b - a) / std::max(a, b);
  }
  EXPECT_NEAR(mean_silhouette(pts, labels), total / 30.0, 1e-12);
}

TEST(Clustering, TwoPointMassesGiveKTwo) {
  std::vector<Vector> pts;
  for (int i = 0; i < 20; ++i) pts.push_back({0.0, 0.0});
  for (int i = 0; i < 20; ++i) pts.push_back({10.0, 0.0});
  ClusteringOptions opt;
  opt.k_min = 2;
  opt.k_max = 3;
  opt.outlier_fraction = 0.0;
  const auto r = cluster_xconcepts(points_as_superpixels(pts), opt);
  EXPECT_EQ(r.chosen_k, 2u);
  EXPECT_NEAR(r.silhouette, 1.0, 1e-6);
}

TEST(Clustering, IdenticalPointsAreDegenerate) {
  std::vector<Vector> pts(12, Vector{1.0, 2.0});
  try {
    cluster_xconcepts(points_as_superpixels(pts), {});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateClustering);
  }
}

TEST(Clustering, EmptyInputAndBadRangeThrow) {
  EXPECT_THROW(cluster_xconcepts({}, {}), Error);
  ClusteringOptions bad;
  bad.k_min = 5;
  bad.k_max = 2;
  EXPECT_THROW(cluster_xconcepts(points_as_superpixels({{0.0}, {1.0}, {2.0}}), bad), Error);
}

TEST(Clustering, RecoversPlantedBlobs) {
  const PlantedBlobs blobs = make_planted_blobs(5, 3, 60, 3, 0.1);
  ClusteringOptions opt;
  opt.k_min = 2;
  opt.k_max = 6;
  const auto r = cluster_xconcepts(points_as_superpixels(blobs.points), opt);
  ASSERT_EQ(r.chosen_k, 3u);
  std::map<std::string, std::size_t> cluster_of;
  for (std::size_t c = 0; c < r.concepts.size(); ++c) {
    for (const auto& m : r.concepts[c].members) cluster_of[m.image_id] = c;
  }
  // Majority planted label per cluster, then agreement over all points.
  std::map<std::size_t, std::map<std::size_t, int>> votes;
  for (std::size_t i = 0; i < blobs.points.size(); ++i) {
    auto it = cluster_of.find("p" + std::to_string(i));
    if (it != cluster_of.end()) ++votes[it->second][blobs.labels[i]];
  }
  int agree = 0;
  for (const auto& [c, v] : votes) {
    int best = 0;
    for (const auto& [l, n] : v) best = std::max(best, n);
    agree += best;
  }
  EXPECT_GE(agree, static_cast<int>(0.95 * static_cast<double>(blobs.points.size())));
}

TEST(Clustering, CentroidIsMemberMean) {
  const PlantedBlobs blobs = make_planted_blobs(8, 3, 30, 4, 0.1);
  const auto r = cluster_xconcepts(points_as_superpixels(blobs.points), {});
  for (const auto& c : r.concepts) {
    ASSERT_FALSE(c.members.empty());
    for (std::size_t d = 0; d < c.centroid.size(); ++d) {
      double s = 0.0;
      for (const auto& m : c.members) s += m.feature[d];
      EXPECT_NEAR(c.centroid[d], s / static_cast<double>(c.members.size()), 1e-9);
    }
  }
}

TEST(Clustering, SameSeedSameBytes) {
  const PlantedBlobs blobs = make_planted_blobs(9, 4, 25, 5, 0.15);
  const auto a = cluster_xconcepts(points_as_superpixels(blobs.points), {});
  const auto b = cluster_xconcepts(points_as_superpixels(blobs.points), {});
  EXPECT_EQ(xconcepts_to_json(a.concepts), xconcepts_to_json(b.concepts));
}

TEST(KMeans, InertiaIsSumOfSquaredDistances) {
  const PlantedBlobs blobs = make_planted_blobs(10, 3, 20, 3, 0.2);
  const KMeansFit fit = kmeans(blobs.points, 3, 1, 2);
  double inertia = 0.0;
  for (std::size_t i = 0; i < blobs.points.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      const double diff = blobs.points[i][d] - fit.centroids[fit.labels[i]][d];
      inertia += diff * diff;
    }
  }
  EXPECT_NEAR(fit.inertia, inertia, 1e-9);
}

TEST(Naming, FixtureConceptsCarryPartNames) {
  const auto& config = testing::shared_animal_config();
  const auto dataset = load_dataset(config);
  const auto concepts = load_xconcepts(config.xconcepts, dataset);
  std::set<std::string> ids;
  for (const auto& c : concepts) ids.insert(c.concept_id);
  for (const char* part : {"wool", "beard", "horns", "stripes", "bumps", "fur"}) EXPECT_TRUE(ids.count(part)) << part;
}

TEST(Filter, AllowAndDenyLists) {
  std::vector<Xconcept> cs(3);
  cs[0].concept_id = "a";
  cs[1].concept_id = "b";
  cs[2].concept_id = "c";
  EXPECT_EQ(filter_concepts(cs, {}, {"b"}).size(), 2u);
  const auto only = filter_concepts(cs, {"c"}, {});
  ASSERT_EQ(only.size(), 1u);
  EXPECT_EQ(only[0].concept_id, "c");
}

TEST(Store, RoundTripRecomputesFeatures) {
  const auto& config = testing::shared_animal_config();
  const auto dataset = load_dataset(config);
  const auto concepts = load_xconcepts(config.xconcepts, dataset);
  const std::string text = xconcepts_to_json(concepts);
  EXPECT_EQ(text, read_text_file(config.xconcepts).substr(0, text.size()));
  for (const auto& c : concepts) {
    for (const auto& m : c.members) {
      EXPECT_EQ(m.feature, masked_feature(dataset.find(m.image_id).activation, m.map_index));
    }
  }
}

}  // namespace
}  // namespace faultline
