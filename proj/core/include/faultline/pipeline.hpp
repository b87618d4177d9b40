#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "faultline/cav.hpp"
#include "faultline/faultline.hpp"
#include "faultline/model.hpp"
#include "faultline/policy.hpp"
#include "faultline/trust.hpp"
#include "faultline/xconcept.hpp"

namespace faultline {

struct ServiceSettings {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t images_per_session = 8;
  std::size_t quiz_options = 4;  // including the correct one, clamped to [2, 5]
};

// Relative paths are resolved against FAULTLINE_DATA_DIR when set, otherwise
// against the directory holding the config file.
struct PipelineConfig {
  std::filesystem::path activations;
  std::filesystem::path head;
  std::optional<std::filesystem::path> map_labels;
  std::filesystem::path xconcepts;
  std::filesystem::path cavs;
  std::filesystem::path class_sets;
  std::filesystem::path policy;
  std::filesystem::path sessions;

  std::size_t p = 3;
  ClusteringOptions clustering;
  std::vector<std::string> allow;
  std::vector<std::string> deny;

  std::size_t n_per_class = 5;
  CavOptions cav;

  FaultLineHyperparams solver;

  policy::TrainingConfig training;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  policy::UserPopulation population;
  std::size_t evaluation_users = 500;

  ServiceSettings service;
  std::size_t threads = 1;
  std::uint64_t seed = 7;

  static PipelineConfig defaults(const std::filesystem::path& base_dir);
  static PipelineConfig from_json(const std::string& text, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
  std::string to_json() const;

  // Throws kIo when an input file is missing.
  void validate_inputs() const;
};

// Everything the explainer needs, loaded once and shared read-only.
struct Artifacts {
  LabeledActivationSet dataset;
  std::shared_ptr<ModelBackend> backend;
  std::vector<std::string> map_labels;
  std::vector<Xconcept> concepts;
  std::vector<Cav> cavs;
  std::map<std::string, ClassConceptSet> class_sets;
};

LabeledActivationSet load_dataset(const PipelineConfig& config);
ClassifierHead load_classifier(const PipelineConfig& config);
Artifacts load_artifacts(const PipelineConfig& config);

std::string class_sets_to_json(const std::map<std::string, ClassConceptSet>& sets);
std::map<std::string, ClassConceptSet> load_class_sets(const std::filesystem::path& path);

// Solves and packages fault-lines for dataset images.
class Explainer {
 public:
  Explainer(Artifacts artifacts, FaultLineHyperparams hp, std::uint64_t seed);

  const Artifacts& artifacts() const noexcept { return artifacts_; }
  const FaultLineHyperparams& hyperparams() const noexcept { return hp_; }
  const std::vector<std::string>& classes() const { return artifacts_.backend->class_labels(); }

  std::string predicted_label(const std::string& image_id) const;
  FaultLineQuery query(const std::string& image_id, const std::string& c_alt) const;
  std::vector<Cav> sigma(const std::string& label) const;

  FaultLine explain(const std::string& image_id, const std::string& c_alt) const;
  FaultLine explain_brute_force(const std::string& image_id, const std::string& c_alt) const;
  double verify_margin(const FaultLine& line) const;

  std::map<std::string, std::vector<std::string>> concept_examples(const FaultLine& line,
                                                                   std::size_t per_concept = 3) const;
  std::string bundle_json(const FaultLine& line, int indent = 2) const;

 private:
  Artifacts artifacts_;
  FaultLineHyperparams hp_;
  std::uint64_t seed_;
};

struct MineSummary {
  std::size_t superpixels = 0;
  std::size_t chosen_k = 0;
  double silhouette = 0.0;
  std::vector<std::string> concept_ids;
};

MineSummary cmd_mine(const PipelineConfig& config);

struct FitSummary {
  std::vector<std::string> fitted;
  std::vector<std::string> skipped;  // inseparable
};

FitSummary cmd_fit_cavs(const PipelineConfig& config);

FaultLine cmd_explain(const PipelineConfig& config, const std::string& image_id, const std::string& c_alt,
                      std::string* bundle = nullptr);

struct TrainSummary {
  std::size_t episodes = 0;
  std::size_t interactions = 0;
  std::size_t updates = 0;
  policy::EvaluationResult trained;
  policy::EvaluationResult baseline;
};

// Writes the checkpoint to config.policy; the JSON-lines episode log goes to `log` when given.
TrainSummary cmd_train_policy(const PipelineConfig& config, std::size_t episodes, std::ostream* log = nullptr);

// Trust report from a games file ({games:[{minu, m}]}).
trust::TrustReport cmd_evaluate_games(const std::filesystem::path& games_file);

}  // namespace faultline
