#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "faultline/cav.hpp"
#include "faultline/model.hpp"

namespace faultline {

struct FaultLineQuery {
  std::string image_id;
  ActivationTensor activation;
  std::string c_pred;
  std::string c_alt;
};

// Checks c_pred != c_alt and that c_pred is the backend's argmax.
void validate_query(const ModelBackend& backend, const FaultLineQuery& query);

struct FaultLineHyperparams {
  double alpha = 1.0;   // hinge weight
  double beta = 0.1;    // L1 weight on deletions
  double lambda = 0.1;  // L1 weight on additions
  double tau = 0.5;     // confidence margin; +inf removes the hinge floor
  std::size_t max_iters = 500;
  double step_size = 1.0;           // initial backtracking step
  double rounding_threshold = 0.5;
  std::size_t random_starts = 3;    // extra seeded FISTA starts besides the origin

  void validate() const;
  // Stable digest for cache keys.
  std::string digest() const;
};

struct FaultLine {
  std::string image_id;
  std::string c_pred;
  std::string c_alt;
  std::vector<int> delta_pred;  // entries in {-1, 0}
  std::vector<int> delta_alt;   // entries in {0, 1}
  std::vector<std::string> nft; // concepts deleted
  std::vector<std::string> pft; // concepts added
  double objective = 0.0;
  double margin = 0.0;          // g_alt(I') - g_pred(I')
  bool flipped = false;
  std::size_t iterations = 0;
  std::size_t restarts = 0;
  std::vector<double> trace;    // accepted continuous objective values of the winning start
};

// Identity-at-zero multiplicative mask per feature map:
//   I'[k] = A[k] * clamp((1 + sum_q dp[q] vp[q][k]^2) (1 + sum_r da[r] va[r][k]^2), 0, 4)
ActivationTensor perturb_activations(const ActivationTensor& a, std::span<const Vector> v_pred,
                                     std::span<const double> delta_pred, std::span<const Vector> v_alt,
                                     std::span<const double> delta_alt);

// D = max{g_pred - g_alt, -tau}.
double hinge_loss(const ModelBackend& backend, const ActivationTensor& perturbed, const std::string& c_pred,
                  const std::string& c_alt, double tau);
double hinge_loss(const ClassifierHead& head, const ActivationTensor& perturbed, const std::string& c_pred,
                  const std::string& c_alt, double tau);

// The relaxed problem over x = (delta_pred, delta_alt) in
// [-1,0]^n_pred x [0,1]^n_alt. Exposed for tests and benchmarks.
class FaultLineObjective {
 public:
  FaultLineObjective(const ModelBackend& backend, const FaultLineQuery& query, std::vector<Vector> v_pred,
                     std::vector<Vector> v_alt, const FaultLineHyperparams& hp);

  std::size_t n_pred() const noexcept { return v_pred_.size(); }
  std::size_t n_alt() const noexcept { return v_alt_.size(); }
  std::size_t dim() const noexcept { return n_pred() + n_alt(); }

  ActivationTensor perturbed(std::span<const double> x) const;
  double margin(std::span<const double> x) const;   // g_alt - g_pred
  double hinge(std::span<const double> x) const;
  double smooth(std::span<const double> x) const { return hp_.alpha * hinge(x); }
  Vector smooth_gradient(std::span<const double> x) const;
  double penalty(std::span<const double> x) const;
  double total(std::span<const double> x) const { return smooth(x) + penalty(x); }

  // Soft-threshold + box projection for step s.
  void prox(std::span<double> x, double s) const;

  const FaultLineHyperparams& hyperparams() const noexcept { return hp_; }

 private:
  void factors(std::span<const double> x, Vector& f_pred, Vector& f_alt) const;

  const ModelBackend& backend_;
  ActivationTensor activation_;
  std::size_t pred_index_;
  std::size_t alt_index_;
  std::vector<Vector> v_pred_;
  std::vector<Vector> v_alt_;
  FaultLineHyperparams hp_;
};

struct FistaResult {
  Vector x;
  double objective = 0.0;
  std::size_t iterations = 0;
  std::size_t restarts = 0;
  std::vector<double> trace;
  std::vector<std::size_t> restart_at;  // trace indices where a new segment begins
};

// Projected FISTA with backtracking and function-value adaptive restart.
FistaResult run_fista(const FaultLineObjective& objective, Vector start);

// Full solve: FISTA from the origin and `random_starts` seeded box points,
// rounding, 1-flip descent, greedy repair; returns the best discrete point.
// When beta or lambda is positive, a flipping result is cut down to a
// minimal flipping subset of its changes.
FaultLine solve_faultline(const ModelBackend& backend, const FaultLineQuery& query,
                          const std::vector<Cav>& sigma_pred, const std::vector<Cav>& sigma_alt,
                          const FaultLineHyperparams& hp, std::uint64_t seed);

// Exhaustive minimizer of the discrete objective (n_pred + n_alt <= 16);
// ties broken by fewer changes, then lexicographic (delta_pred, delta_alt).
FaultLine brute_force_faultline(const ModelBackend& backend, const FaultLineQuery& query,
                                const std::vector<Cav>& sigma_pred, const std::vector<Cav>& sigma_alt,
                                const FaultLineHyperparams& hp);

// Discrete objective / margin of an assignment, shared by tests and the service.
double discrete_objective(const FaultLineObjective& objective, const std::vector<int>& delta_pred,
                          const std::vector<int>& delta_alt);

// Recomputes g_alt - g_pred for the stored deltas.
double recompute_margin(const ModelBackend& backend, const FaultLineQuery& query,
                        const std::vector<Cav>& sigma_pred, const std::vector<Cav>& sigma_alt,
                        const FaultLine& line);

// Explanation bundle JSON (see README).
std::string faultline_bundle_json(const FaultLine& line,
                                  const std::map<std::string, std::vector<std::string>>& concept_examples,
                                  int indent = 2);

}  // namespace faultline
