#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "faultline/model.hpp"
#include "faultline/random.hpp"

namespace faultline::policy {

struct Turn {
  std::size_t c_alt = 0;
  bool quiz_correct = false;
  friend bool operator==(const Turn&, const Turn&) = default;
};

// Per-image dialog state. Classes are head indices.
struct DialogState {
  std::string session_id;
  std::string current_image_id;
  std::size_t num_classes = 0;
  std::size_t c_pred = 0;
  std::vector<Turn> history;
  std::vector<bool> exposure;  // exposure[c] iff c appears in history
  std::size_t turn_count = 0;

  static DialogState fresh(std::string session_id, std::string image_id, std::size_t num_classes, std::size_t c_pred);

  // Marks c_alt exposed and appends the outcome.
  void record(std::size_t c_alt, bool quiz_correct);
  // Same image, history truncated to the first `turns` entries.
  DialogState prefix(std::size_t turns) const;
  bool has_valid_action() const;
  std::vector<std::size_t> valid_actions() const;

  friend bool operator==(const DialogState&, const DialogState&) = default;
};

// one-hot(c_pred) ++ exposure bits ++ turn_count / num_classes.
Vector encode_state(const DialogState& state);
std::size_t encoding_size(std::size_t num_classes);

// Recurrent input for a state: encodings of every prefix of the image's dialog.
std::vector<Vector> encode_sequence(const DialogState& state);

struct PolicyShape {
  std::size_t num_classes = 0;
  std::size_t input = 0;
  std::size_t hidden = 64;
  std::size_t layers = 2;
};

struct PolicyOutput {
  Vector logits;   // one per class
  double value = 0.0;
};

// Two stacked tanh recurrent layers over the state sequence; linear action
// and value heads read the top layer's final hidden state.
class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(std::size_t num_classes, std::uint64_t seed, std::size_t hidden = 64, std::size_t layers = 2);

  const PolicyShape& shape() const noexcept { return shape_; }
  const Vector& parameters() const noexcept { return theta_; }
  Vector& parameters() noexcept { return theta_; }
  std::size_t parameter_count() const noexcept { return theta_.size(); }
  // Parameters belonging to the value head (for tests).
  std::pair<std::size_t, std::size_t> value_head_range() const;

  PolicyOutput forward(const std::vector<Vector>& sequence) const;

  // Gradient of dlogits . logits + dvalue * value w.r.t. theta, added into `grad`.
  void backward(const std::vector<Vector>& sequence, const Vector& dlogits, double dvalue, Vector& grad) const;

  friend bool operator==(const PolicyModel&, const PolicyModel&) = default;

 private:
  struct Layout {
    std::vector<std::size_t> w_in, w_rec, b;  // per layer offsets
    std::size_t w_pi = 0, b_pi = 0, w_v = 0, b_v = 0;
  };
  struct Cache {
    std::vector<std::vector<Vector>> h;  // [layer][t] hidden after tanh
  };
  void build_layout();
  PolicyOutput run(const std::vector<Vector>& sequence, Cache* cache) const;
  std::size_t layer_input(std::size_t layer) const { return layer == 0 ? shape_.input : shape_.hidden; }

  PolicyShape shape_;
  Layout layout_;
  Vector theta_;
};

// Softmax over valid classes; invalid classes get probability 0.
Vector masked_softmax(const Vector& logits, const std::vector<bool>& valid);
std::vector<bool> valid_mask(const DialogState& state);

// epsilon-greedy: uniform over valid classes with probability epsilon,
// otherwise the argmax of the masked logits (ties: lowest index).
std::size_t select_action(const PolicyModel& policy, const DialogState& state, double epsilon, Rng& rng);

// Classes ordered by policy logits (desc, ties by index), exposed and c_pred removed.
std::vector<std::size_t> rank_actions(const PolicyModel& policy, const DialogState& state);

struct RewardConfig {
  double correct = 1.0;
  double incorrect = -1.0;
  double per_turn = 0.05;
};

double reward(bool quiz_correct, std::size_t turn_count, const RewardConfig& config = {});

struct Transition {
  std::vector<Vector> state;       // encoded state sequence
  std::size_t action = 0;
  double reward = 0.0;
  std::vector<Vector> next_state;
  bool terminal = false;
  std::uint64_t episode = 0;
  std::size_t step = 0;
};

// Bounded FIFO of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 10000) : capacity_(capacity) {}

  void push(Transition t);
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::size_t capacity() const noexcept { return capacity_; }
  const std::deque<Transition>& items() const noexcept { return items_; }

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

struct LearningConfig {
  double learning_rate = 0.001;
  double clip = 5.0;             // elementwise gradient clip
  double gamma = 0.95;
  std::size_t n_step = 3;
  std::size_t batch = 32;
  std::size_t steps_per_update = 4;
  double value_weight = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Sampled minibatch with its fixed targets (returns and advantages are
// treated as constants when differentiating).
struct Batch {
  std::vector<const Transition*> samples;
  Vector returns;     // n-step replayed return Q-hat
  Vector advantages;  // Q-hat - V(s)
};

Batch make_batch(const PolicyModel& policy, const ReplayBuffer& buffer, std::size_t batch, Rng& rng,
                 const LearningConfig& config);

// L = mean( -log pi(a|s) * A + value_weight/2 * (Q-hat - V(s))^2 ).
double surrogate_loss(const PolicyModel& policy, const Batch& batch, const LearningConfig& config);
Vector surrogate_gradient(const PolicyModel& policy, const Batch& batch, const LearningConfig& config);

// Adam with elementwise clipping.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(std::size_t parameter_count) : m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}
  void step(Vector& theta, const Vector& grad, const LearningConfig& config);
  std::size_t steps() const noexcept { return t_; }

 private:
  Vector m_, v_;
  std::size_t t_ = 0;
};

struct UpdateStats {
  double loss = 0.0;
  double mean_advantage = 0.0;
};

// One update: `steps_per_update` clipped Adam steps on uniformly sampled
// minibatches. The buffer is not modified.
UpdateStats update_policy(PolicyModel& policy, Optimizer& optimizer, const ReplayBuffer& buffer, std::size_t batch,
                          const LearningConfig& config, Rng& rng);

class SimulatedUser {
 public:
  SimulatedUser(std::size_t num_classes, double learning_rate, double quiz_noise, double initial_belief = 0.0);

  double belief(std::size_t c_pred, std::size_t c_alt) const { return belief_.at(c_pred * n_ + c_alt); }
  void set_belief(std::size_t c_pred, std::size_t c_alt, double value);
  std::size_t num_classes() const noexcept { return n_; }
  double learning_rate() const noexcept { return learning_rate_; }

  // belief += learning_rate * (1 - belief) for the shown pair.
  void observe(std::size_t c_pred, std::size_t c_alt);
  // Bernoulli(belief +- noise) for the shown pair.
  bool answer_quiz(std::size_t c_pred, std::size_t c_alt, Rng& rng) const;

 private:
  std::size_t n_;
  double learning_rate_;
  double quiz_noise_;
  std::vector<double> belief_;
};

// A population in which, for every predicted class, alternates differ in how
// quickly they make the model's behavior clear; users are noisy draws.
struct UserPopulation {
  std::size_t num_classes = 6;
  std::uint64_t structure_seed = 1;
  double best_prior = 0.7;
  double second_prior = 0.3;
  double base_prior = 0.05;
  double prior_noise = 0.08;
  double learning_rate_lo = 0.1;
  double learning_rate_hi = 0.3;
  double quiz_noise = 0.0;

  SimulatedUser sample(Rng& rng) const;
  // Alternates ordered from most to least helpful for c_pred.
  std::vector<std::size_t> preference(std::size_t c_pred) const;
};

using BundleProvider = std::function<void(std::size_t c_pred, std::size_t c_alt)>;

struct Episode {
  std::vector<Transition> transitions;
  std::vector<std::size_t> actions;
  std::vector<bool> correct;
  double total_reward = 0.0;
  bool comprehended = false;
  std::size_t length() const noexcept { return actions.size(); }
  std::string transcript() const;
};

struct EpisodeOptions {
  std::size_t max_turns = 5;
  double epsilon = 0.0;
  // When set, actions are drawn uniformly (random baseline).
  bool uniform_random = false;
  std::uint64_t episode_id = 0;
  RewardConfig reward;
};

// Runs one dialog for an image of class c_pred. The episode ends on the
// first correct quiz answer or after max_turns (or when no class is left).
Episode simulate_dialog(const PolicyModel& policy, SimulatedUser& user, std::size_t c_pred,
                        const BundleProvider& bundle_provider, const EpisodeOptions& options, Rng& rng);

struct TrainingConfig {
  std::size_t episodes = 2000;
  std::size_t update_every = 15;  // dialog interactions between policy updates
  std::size_t anneal_episodes = 1000;
  double epsilon_start = 0.6;
  double epsilon_end = 0.0;
  std::size_t max_turns = 5;
  std::size_t buffer_capacity = 5000;
  std::uint64_t seed = 17;
  LearningConfig learning;
  RewardConfig reward;
};

double epsilon_at(const TrainingConfig& config, std::size_t episode);

struct EpisodeLog {
  std::size_t episode = 0;
  std::size_t length = 0;
  double reward = 0.0;
  std::optional<double> loss;
};

struct TrainingResult {
  std::size_t interactions = 0;
  std::size_t updates = 0;
  std::vector<std::size_t> update_at;  // interaction counts at which updates fired
  std::vector<EpisodeLog> log;
};

// Simulated training loop; `policy` and `optimizer` are updated in place.
TrainingResult train_policy(PolicyModel& policy, Optimizer& optimizer, const UserPopulation& population,
                            const TrainingConfig& config, const BundleProvider& provider = {});

struct EvaluationResult {
  double mean_length = 0.0;
  double mean_reward = 0.0;
  std::vector<std::size_t> lengths;
  std::vector<double> rewards;
};

// Greedy policy (or uniform baseline) on `users` fresh users with seed-paired draws.
EvaluationResult evaluate_policy(const PolicyModel& policy, const UserPopulation& population, std::size_t users,
                                 std::uint64_t seed, bool uniform_random, std::size_t max_turns,
                                 const RewardConfig& reward = {});

// Checkpoint: "FLXPOL01", uint64 LE header length, JSON header, float32 LE parameters.
struct CheckpointInfo {
  std::uint64_t episodes = 0;
  double epsilon = 0.0;
  std::uint64_t sequence = 0;
};
void save_checkpoint(const PolicyModel& policy, const CheckpointInfo& info, const std::filesystem::path& path);
PolicyModel load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

std::string episode_log_line(const EpisodeLog& log);

}  // namespace faultline::policy
