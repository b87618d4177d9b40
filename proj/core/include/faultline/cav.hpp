#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "faultline/model.hpp"
#include "faultline/xconcept.hpp"

namespace faultline {

struct Cav {
  std::string concept_id;
  Vector v;                        // unit length
  double separator_accuracy = 0.0; // on the held-out split
};

struct CavOptions {
  double l2 = 1e-3;
  std::size_t max_newton_steps = 100;
};

// Logistic separator concept-vs-random fitted by damped Newton; v is the
// normalized weight vector, oriented so concept examples project higher.
// Every fifth example of each side (or the last, for sides shorter than
// five) is held out for the accuracy estimate.
// Throws InseparableError when all features are identical.
Cav fit_cav(const std::vector<Vector>& concept_features, const std::vector<Vector>& random_features,
            std::uint64_t seed, const CavOptions& options = {});

// Fits one CAV per concept. The random side is drawn uniformly (with
// replacement) from the other concepts' members, same count as the concept.
// Inseparable concepts are skipped.
std::vector<Cav> fit_cavs(const std::vector<Xconcept>& concepts, std::uint64_t seed,
                          const CavOptions& options = {});

// S_{c,X}: gradient of logit c w.r.t. the pooled feature vector, dotted with v.
double directional_derivative(const ModelBackend& backend, const ActivationTensor& a,
                              const std::string& label, const Cav& cav);
double directional_derivative(const ClassifierHead& head, const ActivationTensor& a,
                              const std::string& label, const Cav& cav);

struct ConceptScore {
  std::string concept_id;
  double tcav = 0.0;     // fraction of class images with S > 0
  double mean_s = 0.0;
};

struct ClassConceptSet {
  std::string class_label;
  std::vector<ConceptScore> entries;   // sorted by (tcav desc, mean_s desc, id asc)
  std::vector<std::string> selected;   // first n entries
};

ClassConceptSet class_specific_xconcepts(const std::vector<Cav>& cavs, const LabeledActivationSet& dataset,
                                         const ModelBackend& backend, const std::string& label,
                                         std::size_t n);

const Cav& find_cav(const std::vector<Cav>& cavs, const std::string& concept_id);

std::string cavs_to_json(const std::vector<Cav>& cavs);
void save_cavs(const std::vector<Cav>& cavs, const std::filesystem::path& path);
std::vector<Cav> load_cavs(const std::filesystem::path& path);

}  // namespace faultline
