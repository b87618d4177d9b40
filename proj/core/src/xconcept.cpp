#include "faultline/xconcept.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/random.hpp"

namespace faultline {

using nlohmann::json;

namespace {

double squared_distance(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Vector mean_of(const std::vector<Vector>& points, const std::vector<std::size_t>& idx) {
  Vector mean(points.front().size(), 0.0);
  for (std::size_t i : idx) {
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += points[i][d];
  }
  for (double& x : mean) x /= static_cast<double>(idx.size());
  return mean;
}

std::vector<Vector> seed_plus_plus(const std::vector<Vector>& points, std::size_t k, Rng& rng) {
  std::vector<Vector> centers;
  centers.push_back(points[rng.index(points.size())]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], centers.back()));
      total += d2[i];
    }
    if (total <= 0.0) {
      // Fewer distinct points than k: duplicate a point, the extra cluster stays empty.
      centers.push_back(points[rng.index(points.size())]);
      continue;
    }
    double target = rng.uniform() * total;
    std::size_t pick = points.size() - 1;
    for (std::size_t i = 0; i < points.size(); ++i) {
      target -= d2[i];
      if (target < 0.0) {
        pick = i;
        break;
      }
    }
    centers.push_back(points[pick]);
  }
  return centers;
}

KMeansFit lloyd(const std::vector<Vector>& points, std::vector<Vector> centers,
                std::size_t max_iterations) {
  const std::size_t n = points.size();
  const std::size_t k = centers.size();
  std::vector<std::size_t> labels(n, 0);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points[i], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (labels[i] != best) {
        labels[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<Vector> sums(k, Vector(points.front().size(), 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[labels[i]];
      for (std::size_t d = 0; d < sums[0].size(); ++d) sums[labels[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its old center
      for (std::size_t d = 0; d < sums[c].size(); ++d) centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
  }
  KMeansFit fit;
  fit.centroids = std::move(centers);
  fit.labels = std::move(labels);
  for (std::size_t i = 0; i < n; ++i) fit.inertia += squared_distance(points[i], fit.centroids[fit.labels[i]]);
  return fit;
}

// Relabels to 0..k'-1 in order of first appearance, dropping empty clusters.
std::size_t compact_labels(std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::size_t> remap;
  for (auto& l : labels) {
    auto it = remap.try_emplace(l, remap.size()).first;
    l = it->second;
  }
  return remap.size();
}

}  // namespace

Vector importance_weights(const ModelBackend& backend, const ActivationTensor& a,
                          const std::string& label) {
  const std::size_t c = backend.class_index(label);
  const ActivationTensor grad = backend.gradient(a, c);
  Vector alpha(a.maps(), 0.0);
  const double z = static_cast<double>(a.plane_size());
  for (std::size_t k = 0; k < a.maps(); ++k) {
    double sum = 0.0;
    for (double g : grad.plane(k)) sum += g;
    alpha[k] = sum / z;
  }
  return alpha;
}

Vector importance_weights(const ClassifierHead& head, const ActivationTensor& a,
                          const std::string& label) {
  return importance_weights(GapLinearBackend(head), a, label);
}

Vector masked_feature(const ActivationTensor& a, std::size_t k, std::vector<bool>* mask) {
  const std::size_t cells = a.plane_size();
  const std::size_t keep = std::max<std::size_t>(1, (cells + 3) / 4);
  const auto plane = a.plane(k);
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return plane[x] > plane[y]; });
  std::vector<bool> selected(cells, false);
  for (std::size_t i = 0; i < keep; ++i) selected[order[i]] = true;

  Vector feature(a.maps(), 0.0);
  for (std::size_t j = 0; j < a.maps(); ++j) {
    const auto pj = a.plane(j);
    double sum = 0.0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      if (selected[cell]) sum += pj[cell];
    }
    feature[j] = sum / static_cast<double>(keep);
  }
  if (mask != nullptr) *mask = std::move(selected);
  return feature;
}

std::vector<Superpixel> select_top_superpixels(const LabeledActivationSet& dataset,
                                               const ModelBackend& backend, std::size_t p) {
  if (p == 0 || p > dataset.maps()) {
    throw Error(ErrorCode::kInvalidArgument, "p must be in [1, m]; got " + std::to_string(p));
  }
  std::vector<Superpixel> out;
  for (const auto& item : dataset.items()) {
    for (const auto& label : backend.class_labels()) {
      const Vector alpha = importance_weights(backend, item.activation, label);
      std::vector<std::size_t> order(alpha.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return alpha[x] > alpha[y]; });
      for (std::size_t r = 0; r < p; ++r) {
        Superpixel sp;
        sp.image_id = item.image_id;
        sp.map_index = order[r];
        sp.class_label = label;
        sp.alpha = alpha[order[r]];
        sp.feature = masked_feature(item.activation, order[r], &sp.mask);
        out.push_back(std::move(sp));
      }
    }
  }
  return out;
}

std::vector<Superpixel> select_top_superpixels(const LabeledActivationSet& dataset,
                                               const ClassifierHead& head, std::size_t p) {
  return select_top_superpixels(dataset, GapLinearBackend(head), p);
}

KMeansFit kmeans(const std::vector<Vector>& points, std::size_t k, std::uint64_t seed,
                 std::size_t restarts, std::size_t max_iterations) {
  if (points.empty()) throw Error(ErrorCode::kInvalidArgument, "k-means on empty input");
  if (k == 0 || k > points.size()) throw Error(ErrorCode::kInvalidArgument, "k out of range");
  Rng rng(seed);
  KMeansFit best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
    auto fit = lloyd(points, seed_plus_plus(points, k, rng), max_iterations);
    if (fit.inertia < best.inertia) best = std::move(fit);
  }
  return best;
}

double mean_silhouette(const std::vector<Vector>& points, const std::vector<std::size_t>& labels) {
  const std::size_t n = points.size();
  if (n == 0) return 0.0;
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> sizes(k, 0);
  for (auto l : labels) ++sizes[l];

  double total = 0.0;
  std::vector<double> sum_to(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[labels[i]] <= 1) continue;  // singleton: s(i) = 0
    std::fill(sum_to.begin(), sum_to.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sum_to[labels[j]] += std::sqrt(squared_distance(points[i], points[j]));
    }
    const double a = sum_to[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c != labels[i] && sizes[c] > 0) b = std::min(b, sum_to[c] / static_cast<double>(sizes[c]));
    }
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

ClusteringResult cluster_xconcepts(const std::vector<Superpixel>& superpixels,
                                   const ClusteringOptions& options) {
  if (superpixels.empty()) throw Error(ErrorCode::kInvalidArgument, "no superpixels to cluster");
  if (options.k_min < 2 || options.k_min > options.k_max || options.k_max >= superpixels.size()) {
    throw Error(ErrorCode::kInvalidArgument, "invalid k range [" + std::to_string(options.k_min) + ", " +
                                                 std::to_string(options.k_max) + "] for " +
                                                 std::to_string(superpixels.size()) + " points");
  }
  if (options.outlier_fraction < 0.0 || options.outlier_fraction >= 0.5) {
    throw Error(ErrorCode::kInvalidArgument, "outlier_fraction must be in [0, 0.5)");
  }

  std::vector<Vector> points;
  points.reserve(superpixels.size());
  for (const auto& sp : superpixels) points.push_back(sp.feature);

  bool all_identical = true;
  for (const auto& p : points) {
    if (p != points.front()) {
      all_identical = false;
      break;
    }
  }
  if (all_identical) throw Error(ErrorCode::kDegenerateClustering, "degenerate clustering: all points identical");

  const std::size_t n = points.size();
  const std::size_t trim = static_cast<std::size_t>(std::floor(options.outlier_fraction * static_cast<double>(n)));

  ClusteringResult result;
  result.silhouette = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> best_retained;
  std::vector<std::size_t> best_labels;

  for (std::size_t k = options.k_min; k <= options.k_max; ++k) {
    const std::uint64_t seed = options.seed + 7919 * k;
    auto fit = kmeans(points, k, seed, options.restarts, options.max_iterations);

    std::vector<std::size_t> retained(n);
    std::iota(retained.begin(), retained.end(), 0);
    if (trim > 0) {
      std::vector<double> dist(n);
      for (std::size_t i = 0; i < n; ++i) dist[i] = squared_distance(points[i], fit.centroids[fit.labels[i]]);
      std::stable_sort(retained.begin(), retained.end(),
                       [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
      retained.resize(n - trim);
      std::sort(retained.begin(), retained.end());
    }

    std::vector<Vector> kept;
    kept.reserve(retained.size());
    for (auto i : retained) kept.push_back(points[i]);
    if (k > kept.size()) continue;
    if (trim > 0) fit = kmeans(kept, k, seed + 1, options.restarts, options.max_iterations);

    std::vector<std::size_t> labels = fit.labels;
    compact_labels(labels);
    const double score = mean_silhouette(kept, labels);
    result.silhouette_by_k.emplace_back(k, score);
    if (score > result.silhouette) {
      result.silhouette = score;
      result.chosen_k = k;
      best_retained = retained;
      best_labels = labels;
    }
  }
  if (best_labels.empty()) throw Error(ErrorCode::kDegenerateClustering, "no admissible K after trimming");

  const std::size_t clusters = *std::max_element(best_labels.begin(), best_labels.end()) + 1;
  std::vector<std::vector<std::size_t>> groups(clusters);
  for (std::size_t r = 0; r < best_retained.size(); ++r) groups[best_labels[r]].push_back(best_retained[r]);

  for (std::size_t c = 0; c < clusters; ++c) {
    Xconcept x;
    x.concept_id = "xc" + std::to_string(c);
    x.centroid = mean_of(points, groups[c]);
    for (auto i : groups[c]) {
      x.members.push_back(superpixels[i]);
      const auto& id = superpixels[i].image_id;
      if (std::find(x.example_image_ids.begin(), x.example_image_ids.end(), id) == x.example_image_ids.end()) {
        x.example_image_ids.push_back(id);
      }
    }
    result.concepts.push_back(std::move(x));
  }
  return result;
}

void name_concepts_by_dominant_map(std::vector<Xconcept>& concepts,
                                   const std::vector<std::string>& map_labels) {
  // Concepts sharing a dominant map are suffixed in order of decreasing
  // centroid strength on that map, so the strongest keeps the plain label.
  std::vector<std::string> base(concepts.size());
  std::vector<double> strength(concepts.size());
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    const std::size_t k = argmax(concepts[i].centroid);
    base[i] = k < map_labels.size() ? map_labels[k] : "map" + std::to_string(k);
    strength[i] = concepts[i].centroid[k];
  }
  std::vector<std::size_t> order(concepts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return strength[a] > strength[b]; });
  std::map<std::string, int> used;
  for (auto i : order) {
    const int n = ++used[base[i]];
    concepts[i].concept_id = n == 1 ? base[i] : base[i] + "-" + std::to_string(n);
  }
}

std::vector<Xconcept> filter_concepts(std::vector<Xconcept> concepts, const std::set<std::string>& allow,
                                      const std::set<std::string>& deny) {
  std::erase_if(concepts, [&](const Xconcept& x) {
    return deny.count(x.concept_id) != 0 || (!allow.empty() && allow.count(x.concept_id) == 0);
  });
  return concepts;
}

std::string xconcepts_to_json(const std::vector<Xconcept>& concepts) {
  json j;
  j["concepts"] = json::array();
  for (const auto& x : concepts) {
    json members = json::array();
    for (const auto& sp : x.members) {
      members.push_back({{"image_id", sp.image_id}, {"map", sp.map_index}, {"class", sp.class_label}, {"alpha", sp.alpha}});
    }
    j["concepts"].push_back({{"id", x.concept_id}, {"centroid", x.centroid}, {"members", members}, {"examples", x.example_image_ids}});
  }
  return j.dump(2) + "\n";
}

void save_xconcepts(const std::vector<Xconcept>& concepts, const std::filesystem::path& path) {
  write_text_file(path, xconcepts_to_json(concepts));
}

std::vector<Xconcept> load_xconcepts(const std::filesystem::path& path, const LabeledActivationSet& dataset) {
  std::vector<Xconcept> out;
  try {
    const json j = json::parse(read_text_file(path));
    for (const auto& c : j.at("concepts")) {
      Xconcept x;
      x.concept_id = c.at("id").get<std::string>();
      x.centroid = c.at("centroid").get<Vector>();
      x.example_image_ids = c.at("examples").get<std::vector<std::string>>();
      for (const auto& m : c.at("members")) {
        Superpixel sp;
        sp.image_id = m.at("image_id").get<std::string>();
        sp.map_index = m.at("map").get<std::size_t>();
        sp.class_label = m.at("class").get<std::string>();
        sp.alpha = m.at("alpha").get<double>();
        const auto& item = dataset.find(sp.image_id);
        if (sp.map_index >= item.activation.maps()) throw Error(ErrorCode::kShape, "member map index out of range");
        sp.feature = masked_feature(item.activation, sp.map_index, &sp.mask);
        x.members.push_back(std::move(sp));
      }
      out.push_back(std::move(x));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, "bad xconcept store '" + path.string() + "': " + e.what());
  }
  return out;
}

}  // namespace faultline
