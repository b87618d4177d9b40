#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "faultline/model.hpp"

namespace faultline {

// One feature map of one image, nominated for class `class_label`.
struct Superpixel {
  std::string image_id;
  std::size_t map_index = 0;
  std::string class_label;
  double alpha = 0.0;
  Vector feature;            // m-vector used for clustering
  std::vector<bool> mask;    // u*v localization mask (top-quartile cells of the map)
};

struct Xconcept {
  std::string concept_id;
  std::vector<Superpixel> members;
  Vector centroid;
  std::vector<std::string> example_image_ids;
};

struct ClusteringOptions {
  std::size_t k_min = 2;
  std::size_t k_max = 8;
  double outlier_fraction = 0.05;
  std::uint64_t seed = 7;
  std::size_t restarts = 4;       // k-means++ restarts per K, best inertia kept
  std::size_t max_iterations = 100;
};

struct ClusteringResult {
  std::vector<Xconcept> concepts;
  std::size_t chosen_k = 0;
  double silhouette = 0.0;
  std::vector<std::pair<std::size_t, double>> silhouette_by_k;
};

// Grad-CAM importance: alpha_k = (1/Z) sum_ij dy^c/dA[k,i,j], Z = u*v.
Vector importance_weights(const ModelBackend& backend, const ActivationTensor& a,
                          const std::string& label);
Vector importance_weights(const ClassifierHead& head, const ActivationTensor& a,
                          const std::string& label);

// GAP of `a` restricted to the top-quartile cells of map `k`.
Vector masked_feature(const ActivationTensor& a, std::size_t k, std::vector<bool>* mask = nullptr);

// For every image and every class, the p maps with the largest signed
// importance (ties: lower map index first).
std::vector<Superpixel> select_top_superpixels(const LabeledActivationSet& dataset,
                                               const ModelBackend& backend, std::size_t p);
std::vector<Superpixel> select_top_superpixels(const LabeledActivationSet& dataset,
                                               const ClassifierHead& head, std::size_t p);

// K-means (k-means++ seeding) for each K in [k_min, k_max], trimmed by
// distance-based outlier removal and refit once; returns the K with the
// largest mean silhouette.
ClusteringResult cluster_xconcepts(const std::vector<Superpixel>& superpixels,
                                   const ClusteringOptions& options);

// Plain Lloyd iterations, exposed for tests and benchmarks.
struct KMeansFit {
  std::vector<Vector> centroids;
  std::vector<std::size_t> labels;
  double inertia = 0.0;
};
KMeansFit kmeans(const std::vector<Vector>& points, std::size_t k, std::uint64_t seed,
                 std::size_t restarts = 1, std::size_t max_iterations = 100);

// Mean silhouette with Euclidean distance; singleton-cluster points score 0.
double mean_silhouette(const std::vector<Vector>& points, const std::vector<std::size_t>& labels);

// Renames concepts after the label of their centroid's dominant map
// ("wool", "wool-2", ... by decreasing strength on that map). Concepts keep their order.
void name_concepts_by_dominant_map(std::vector<Xconcept>& concepts,
                                   const std::vector<std::string>& map_labels);

// Optional manual curation; an empty allow set means "allow everything".
std::vector<Xconcept> filter_concepts(std::vector<Xconcept> concepts,
                                      const std::set<std::string>& allow,
                                      const std::set<std::string>& deny);

// Store format: {concepts:[{id, centroid, members:[{image_id,map,class,alpha}], examples}]}.
// Member features and masks are recomputed from the activation set on load.
void save_xconcepts(const std::vector<Xconcept>& concepts, const std::filesystem::path& path);
std::string xconcepts_to_json(const std::vector<Xconcept>& concepts);
std::vector<Xconcept> load_xconcepts(const std::filesystem::path& path,
                                     const LabeledActivationSet& dataset);

}  // namespace faultline
