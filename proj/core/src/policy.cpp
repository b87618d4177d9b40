#include "faultline/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"

namespace faultline::policy {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'L', 'X', 'P', 'O', 'L', '0', '1'};

std::vector<bool> mask_from_encoding(const Vector& enc, std::size_t num_classes) {
  std::vector<bool> valid(num_classes, true);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (enc[c] > 0.5 || enc[num_classes + c] > 0.5) valid[c] = false;
  }
  return valid;
}

}  // namespace

DialogState DialogState::fresh(std::string session_id, std::string image_id, std::size_t num_classes,
                               std::size_t c_pred) {
  if (c_pred >= num_classes) throw Error(ErrorCode::kUnknownClass, "c_pred out of range");
  DialogState s;
  s.session_id = std::move(session_id);
  s.current_image_id = std::move(image_id);
  s.num_classes = num_classes;
  s.c_pred = c_pred;
  s.exposure.assign(num_classes, false);
  return s;
}

void DialogState::record(std::size_t c_alt, bool quiz_correct) {
  if (c_alt >= num_classes) throw Error(ErrorCode::kUnknownClass, "c_alt out of range");
  history.push_back({c_alt, quiz_correct});
  exposure[c_alt] = true;
  turn_count = history.size();
}

DialogState DialogState::prefix(std::size_t turns) const {
  DialogState s = fresh(session_id, current_image_id, num_classes, c_pred);
  for (std::size_t i = 0; i < std::min(turns, history.size()); ++i) s.record(history[i].c_alt, history[i].quiz_correct);
  return s;
}

std::vector<std::size_t> DialogState::valid_actions() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (c != c_pred && !exposure[c]) out.push_back(c);
  }
  return out;
}

bool DialogState::has_valid_action() const { return !valid_actions().empty(); }

std::size_t encoding_size(std::size_t num_classes) { return 2 * num_classes + 1; }

Vector encode_state(const DialogState& state) {
  const std::size_t n = state.num_classes;
  Vector enc(encoding_size(n), 0.0);
  enc[state.c_pred] = 1.0;
  for (std::size_t c = 0; c < n; ++c) enc[n + c] = state.exposure[c] ? 1.0 : 0.0;
  enc[2 * n] = static_cast<double>(state.turn_count) / static_cast<double>(n);
  return enc;
}

std::vector<Vector> encode_sequence(const DialogState& state) {
  std::vector<Vector> seq;
  seq.reserve(state.history.size() + 1);
  for (std::size_t t = 0; t <= state.history.size(); ++t) seq.push_back(encode_state(state.prefix(t)));
  return seq;
}

PolicyModel::PolicyModel(std::size_t num_classes, std::uint64_t seed, std::size_t hidden, std::size_t layers) {
  if (num_classes < 2 || hidden == 0 || layers == 0) throw Error(ErrorCode::kInvalidArgument, "bad policy shape");
  shape_ = {num_classes, encoding_size(num_classes), hidden, layers};
  build_layout();
  Rng rng(seed);
  for (std::size_t l = 0; l < layers; ++l) {
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(layer_input(l)));
    for (std::size_t i = 0; i < hidden * layer_input(l); ++i) theta_[layout_.w_in[l] + i] = rng.uniform(-in_scale, in_scale);
    const double rec_scale = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t i = 0; i < hidden * hidden; ++i) theta_[layout_.w_rec[l] + i] = rng.uniform(-rec_scale, rec_scale);
  }
  // Action and value heads start at zero: a fresh policy has uniform logits.
}

void PolicyModel::build_layout() {
  std::size_t offset = 0;
  const std::size_t h = shape_.hidden;
  for (std::size_t l = 0; l < shape_.layers; ++l) {
    layout_.w_in.push_back(offset);
    offset += h * layer_input(l);
    layout_.w_rec.push_back(offset);
    offset += h * h;
    layout_.b.push_back(offset);
    offset += h;
  }
  layout_.w_pi = offset;
  offset += shape_.num_classes * h;
  layout_.b_pi = offset;
  offset += shape_.num_classes;
  layout_.w_v = offset;
  offset += h;
  layout_.b_v = offset;
  offset += 1;
  theta_.assign(offset, 0.0);
}

std::pair<std::size_t, std::size_t> PolicyModel::value_head_range() const {
  return {layout_.w_v, layout_.b_v + 1};
}

PolicyOutput PolicyModel::run(const std::vector<Vector>& sequence, Cache* cache) const {
  if (sequence.empty()) throw Error(ErrorCode::kInvalidArgument, "empty state sequence");
  const std::size_t h = shape_.hidden;
  const std::size_t steps = sequence.size();
  std::vector<std::vector<Vector>> hs(shape_.layers, std::vector<Vector>(steps, Vector(h, 0.0)));
  for (std::size_t l = 0; l < shape_.layers; ++l) {
    const std::size_t in = layer_input(l);
    const double* w_in = theta_.data() + layout_.w_in[l];
    const double* w_rec = theta_.data() + layout_.w_rec[l];
    const double* b = theta_.data() + layout_.b[l];
    for (std::size_t t = 0; t < steps; ++t) {
      const Vector& x = l == 0 ? sequence[t] : hs[l - 1][t];
      if (x.size() != in) throw Error(ErrorCode::kShape, "state encoding width mismatch");
      for (std::size_t i = 0; i < h; ++i) {
        double z = b[i];
        for (std::size_t j = 0; j < in; ++j) z += w_in[i * in + j] * x[j];
        if (t > 0) {
          for (std::size_t j = 0; j < h; ++j) z += w_rec[i * h + j] * hs[l][t - 1][j];
        }
        hs[l][t][i] = std::tanh(z);
      }
    }
  }
  const Vector& top = hs.back().back();
  PolicyOutput out;
  out.logits.assign(shape_.num_classes, 0.0);
  for (std::size_t c = 0; c < shape_.num_classes; ++c) {
    double z = theta_[layout_.b_pi + c];
    for (std::size_t i = 0; i < h; ++i) z += theta_[layout_.w_pi + c * h + i] * top[i];
    out.logits[c] = z;
  }
  out.value = theta_[layout_.b_v];
  for (std::size_t i = 0; i < h; ++i) out.value += theta_[layout_.w_v + i] * top[i];
  if (cache != nullptr) cache->h = std::move(hs);
  return out;
}

PolicyOutput PolicyModel::forward(const std::vector<Vector>& sequence) const { return run(sequence, nullptr); }

void PolicyModel::backward(const std::vector<Vector>& sequence, const Vector& dlogits, double dvalue,
                           Vector& grad) const {
  Cache cache;
  run(sequence, &cache);
  const std::size_t h = shape_.hidden;
  const std::size_t steps = sequence.size();
  const Vector& top = cache.h.back().back();

  for (std::size_t c = 0; c < shape_.num_classes; ++c) {
    grad[layout_.b_pi + c] += dlogits[c];
    for (std::size_t i = 0; i < h; ++i) grad[layout_.w_pi + c * h + i] += dlogits[c] * top[i];
  }
  grad[layout_.b_v] += dvalue;
  for (std::size_t i = 0; i < h; ++i) grad[layout_.w_v + i] += dvalue * top[i];

  // dh[t] for the current layer; only the last step of the top layer is seeded.
  std::vector<Vector> dh(steps, Vector(h, 0.0));
  for (std::size_t i = 0; i < h; ++i) {
    double s = theta_[layout_.w_v + i] * dvalue;
    for (std::size_t c = 0; c < shape_.num_classes; ++c) s += theta_[layout_.w_pi + c * h + i] * dlogits[c];
    dh[steps - 1][i] = s;
  }

  for (std::size_t l = shape_.layers; l-- > 0;) {
    const std::size_t in = layer_input(l);
    const double* w_in = theta_.data() + layout_.w_in[l];
    const double* w_rec = theta_.data() + layout_.w_rec[l];
    std::vector<Vector> dx(steps, Vector(in, 0.0));
    Vector carry(h, 0.0);
    Vector dz(h);
    for (std::size_t t = steps; t-- > 0;) {
      const Vector& ht = cache.h[l][t];
      const Vector& x = l == 0 ? sequence[t] : cache.h[l - 1][t];
      for (std::size_t i = 0; i < h; ++i) dz[i] = (dh[t][i] + carry[i]) * (1.0 - ht[i] * ht[i]);
      for (std::size_t i = 0; i < h; ++i) {
        grad[layout_.b[l] + i] += dz[i];
        for (std::size_t j = 0; j < in; ++j) grad[layout_.w_in[l] + i * in + j] += dz[i] * x[j];
        if (t > 0) {
          for (std::size_t j = 0; j < h; ++j) grad[layout_.w_rec[l] + i * h + j] += dz[i] * cache.h[l][t - 1][j];
        }
      }
      std::fill(carry.begin(), carry.end(), 0.0);
      if (t > 0) {
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < h; ++j) carry[j] += w_rec[i * h + j] * dz[i];
        }
      }
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < in; ++j) dx[t][j] += w_in[i * in + j] * dz[i];
      }
    }
    if (l > 0) dh = std::move(dx);
  }
}

Vector masked_softmax(const Vector& logits, const std::vector<bool>& valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (valid[c]) mx = std::max(mx, logits[c]);
  }
  Vector p(logits.size(), 0.0);
  if (!std::isfinite(mx)) return p;
  double total = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (valid[c]) total += p[c] = std::exp(logits[c] - mx);
  }
  for (double& x : p) x /= total;
  return p;
}

std::vector<bool> valid_mask(const DialogState& state) {
  std::vector<bool> valid(state.num_classes, false);
  for (auto c : state.valid_actions()) valid[c] = true;
  return valid;
}

std::size_t select_action(const PolicyModel& policy, const DialogState& state, double epsilon, Rng& rng) {
  const auto actions = state.valid_actions();
  if (actions.empty()) throw Error(ErrorCode::kDialogExhausted, "dialog exhausted: no unexposed alternate class");
  if (epsilon > 0.0 && rng.uniform() < epsilon) return actions[rng.index(actions.size())];
  const auto out = policy.forward(encode_sequence(state));
  std::size_t best = actions.front();
  for (auto c : actions) {
    if (out.logits[c] > out.logits[best]) best = c;
  }
  return best;
}

std::vector<std::size_t> rank_actions(const PolicyModel& policy, const DialogState& state) {
  auto actions = state.valid_actions();
  const auto out = policy.forward(encode_sequence(state));
  std::stable_sort(actions.begin(), actions.end(),
                   [&](std::size_t a, std::size_t b) { return out.logits[a] > out.logits[b]; });
  return actions;
}

double reward(bool quiz_correct, std::size_t turn_count, const RewardConfig& config) {
  if (turn_count < 1) throw Error(ErrorCode::kInvalidArgument, "turn_count must be >= 1");
  return (quiz_correct ? config.correct : config.incorrect) - config.per_turn * static_cast<double>(turn_count);
}

void ReplayBuffer::push(Transition t) {
  if (!std::isfinite(t.reward)) throw Error(ErrorCode::kInvalidArgument, "non-finite reward");
  items_.push_back(std::move(t));
  while (items_.size() > capacity_) items_.pop_front();
}

Batch make_batch(const PolicyModel& policy, const ReplayBuffer& buffer, std::size_t batch, Rng& rng,
                 const LearningConfig& config) {
  if (buffer.empty()) throw Error(ErrorCode::kEmptyBuffer, "replay buffer is empty");
  if (batch == 0 || batch > buffer.size()) {
    throw Error(ErrorCode::kInvalidArgument, "batch must be in [1, buffer size]");
  }
  const auto& items = buffer.items();
  std::map<std::pair<std::uint64_t, std::size_t>, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) index[{items[i].episode, items[i].step}] = i;

  Batch b;
  for (std::size_t k = 0; k < batch; ++k) {
    const Transition* first = &items[rng.index(items.size())];
    const Transition* cur = first;
    double g = 0.0;
    double discount = 1.0;
    for (std::size_t j = 0;; ++j) {
      g += discount * cur->reward;
      discount *= config.gamma;
      if (cur->terminal) break;
      auto next = index.find({cur->episode, cur->step + 1});
      if (j + 1 >= config.n_step || next == index.end()) {
        g += discount * policy.forward(cur->next_state).value;
        break;
      }
      cur = &items[next->second];
    }
    b.samples.push_back(first);
    b.returns.push_back(g);
    b.advantages.push_back(g - policy.forward(first->state).value);
  }
  return b;
}

double surrogate_loss(const PolicyModel& policy, const Batch& batch, const LearningConfig& config) {
  const std::size_t n = policy.shape().num_classes;
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const Transition& t = *batch.samples[i];
    const auto out = policy.forward(t.state);
    const auto p = masked_softmax(out.logits, mask_from_encoding(t.state.back(), n));
    const double err = batch.returns[i] - out.value;
    loss += -std::log(std::max(p[t.action], 1e-300)) * batch.advantages[i] + 0.5 * config.value_weight * err * err;
  }
  return loss / static_cast<double>(batch.samples.size());
}

Vector surrogate_gradient(const PolicyModel& policy, const Batch& batch, const LearningConfig& config) {
  const std::size_t n = policy.shape().num_classes;
  Vector grad(policy.parameter_count(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const Transition& t = *batch.samples[i];
    const auto out = policy.forward(t.state);
    const auto valid = mask_from_encoding(t.state.back(), n);
    const auto p = masked_softmax(out.logits, valid);
    Vector dlogits(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      if (!valid[c]) continue;
      const double indicator = c == t.action ? 1.0 : 0.0;
      dlogits[c] = -batch.advantages[i] * (indicator - p[c]) * inv_b;
    }
    const double dvalue = -config.value_weight * (batch.returns[i] - out.value) * inv_b;
    policy.backward(t.state, dlogits, dvalue, grad);
  }
  return grad;
}

void Optimizer::step(Vector& theta, const Vector& grad, const LearningConfig& config) {
  if (m_.size() != theta.size()) {
    m_.assign(theta.size(), 0.0);
    v_.assign(theta.size(), 0.0);
  }
  ++t_;
  const double b1t = 1.0 - std::pow(config.adam_beta1, static_cast<double>(t_));
  const double b2t = 1.0 - std::pow(config.adam_beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = std::clamp(grad[i], -config.clip, config.clip);
    m_[i] = config.adam_beta1 * m_[i] + (1.0 - config.adam_beta1) * g;
    v_[i] = config.adam_beta2 * v_[i] + (1.0 - config.adam_beta2) * g * g;
    theta[i] -= config.learning_rate * (m_[i] / b1t) / (std::sqrt(v_[i] / b2t) + config.adam_eps);
  }
}

UpdateStats update_policy(PolicyModel& policy, Optimizer& optimizer, const ReplayBuffer& buffer, std::size_t batch,
                          const LearningConfig& config, Rng& rng) {
  UpdateStats stats;
  for (std::size_t s = 0; s < std::max<std::size_t>(1, config.steps_per_update); ++s) {
    const Batch b = make_batch(policy, buffer, batch, rng, config);
    stats.loss = surrogate_loss(policy, b, config);
    stats.mean_advantage = std::accumulate(b.advantages.begin(), b.advantages.end(), 0.0) /
                           static_cast<double>(b.advantages.size());
    optimizer.step(policy.parameters(), surrogate_gradient(policy, b, config), config);
  }
  return stats;
}

SimulatedUser::SimulatedUser(std::size_t num_classes, double learning_rate, double quiz_noise, double initial_belief)
    : n_(num_classes), learning_rate_(learning_rate), quiz_noise_(quiz_noise),
      belief_(num_classes * num_classes, initial_belief) {
  if (!(initial_belief >= 0.0 && initial_belief <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "belief outside [0,1]");
  if (!(learning_rate >= 0.0 && learning_rate <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "learning rate outside [0,1]");
  if (!(quiz_noise >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "negative quiz noise");
}

void SimulatedUser::set_belief(std::size_t c_pred, std::size_t c_alt, double value) {
  if (!(value >= 0.0 && value <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "belief outside [0,1]");
  belief_.at(c_pred * n_ + c_alt) = value;
}

void SimulatedUser::observe(std::size_t c_pred, std::size_t c_alt) {
  double& b = belief_.at(c_pred * n_ + c_alt);
  b += learning_rate_ * (1.0 - b);
}

bool SimulatedUser::answer_quiz(std::size_t c_pred, std::size_t c_alt, Rng& rng) const {
  double p = belief(c_pred, c_alt);
  if (quiz_noise_ > 0.0) p = std::clamp(p + rng.uniform(-quiz_noise_, quiz_noise_), 0.0, 1.0);
  return rng.uniform() < p;
}

std::vector<std::size_t> UserPopulation::preference(std::size_t c_pred) const {
  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (c != c_pred) others.push_back(c);
  }
  Rng rng(structure_seed * 1000003 + c_pred);
  for (std::size_t i = others.size(); i > 1; --i) std::swap(others[i - 1], others[rng.index(i)]);
  return others;
}

SimulatedUser UserPopulation::sample(Rng& rng) const {
  SimulatedUser user(num_classes, rng.uniform(learning_rate_lo, learning_rate_hi), quiz_noise);
  for (std::size_t p = 0; p < num_classes; ++p) {
    const auto order = preference(p);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const double mean = r == 0 ? best_prior : r == 1 ? second_prior : base_prior;
      user.set_belief(p, order[r], std::clamp(mean + prior_noise * rng.normal(), 0.0, 1.0));
    }
  }
  return user;
}

std::string Episode::transcript() const {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    ss << "turn=" << (i + 1) << " alt=" << actions[i] << " correct=" << (correct[i] ? 1 : 0)
       << " reward=" << transitions[i].reward << " terminal=" << (transitions[i].terminal ? 1 : 0) << "\n";
  }
  return ss.str();
}

Episode simulate_dialog(const PolicyModel& policy, SimulatedUser& user, std::size_t c_pred,
                        const BundleProvider& bundle_provider, const EpisodeOptions& options, Rng& rng) {
  if (options.max_turns < 1) throw Error(ErrorCode::kInvalidArgument, "max_turns must be >= 1");
  Episode ep;
  DialogState state = DialogState::fresh("sim", "sim-" + std::to_string(options.episode_id), user.num_classes(), c_pred);
  for (std::size_t turn = 1; turn <= options.max_turns && state.has_valid_action(); ++turn) {
    std::size_t action;
    if (options.uniform_random) {
      const auto actions = state.valid_actions();
      action = actions[rng.index(actions.size())];
    } else {
      action = select_action(policy, state, options.epsilon, rng);
    }
    if (bundle_provider) bundle_provider(c_pred, action);
    user.observe(c_pred, action);
    const bool correct = user.answer_quiz(c_pred, action, rng);

    Transition t;
    t.state = encode_sequence(state);
    t.action = action;
    t.reward = reward(correct, turn, options.reward);
    state.record(action, correct);
    t.next_state = encode_sequence(state);
    t.terminal = correct || turn == options.max_turns || !state.has_valid_action();
    t.episode = options.episode_id;
    t.step = turn - 1;

    ep.total_reward += t.reward;
    ep.actions.push_back(action);
    ep.correct.push_back(correct);
    const bool done = t.terminal;
    ep.transitions.push_back(std::move(t));
    if (correct) ep.comprehended = true;
    if (done) break;
  }
  return ep;
}

double epsilon_at(const TrainingConfig& config, std::size_t episode) {
  if (config.anneal_episodes == 0 || episode >= config.anneal_episodes) return config.epsilon_end;
  const double frac = static_cast<double>(episode) / static_cast<double>(config.anneal_episodes);
  return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;
}

TrainingResult train_policy(PolicyModel& policy, Optimizer& optimizer, const UserPopulation& population,
                            const TrainingConfig& config, const BundleProvider& provider) {
  TrainingResult result;
  ReplayBuffer buffer(config.buffer_capacity);
  Rng rng(config.seed);
  Rng update_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  for (std::size_t e = 0; e < config.episodes; ++e) {
    const std::size_t c_pred = rng.index(population.num_classes);
    SimulatedUser user = population.sample(rng);
    EpisodeOptions opts;
    opts.max_turns = config.max_turns;
    opts.epsilon = epsilon_at(config, e);
    opts.episode_id = e;
    opts.reward = config.reward;
    Episode ep = simulate_dialog(policy, user, c_pred, provider, opts, rng);

    EpisodeLog log{e, ep.length(), ep.total_reward, std::nullopt};
    for (auto& t : ep.transitions) {
      buffer.push(std::move(t));
      ++result.interactions;
      if (result.interactions % config.update_every == 0) {
        const std::size_t batch = std::min(config.learning.batch, buffer.size());
        log.loss = update_policy(policy, optimizer, buffer, batch, config.learning, update_rng).loss;
        ++result.updates;
        result.update_at.push_back(result.interactions);
      }
    }
    result.log.push_back(log);
  }
  return result;
}

EvaluationResult evaluate_policy(const PolicyModel& policy, const UserPopulation& population, std::size_t users,
                                 std::uint64_t seed, bool uniform_random, std::size_t max_turns,
                                 const RewardConfig& reward_config) {
  EvaluationResult r;
  for (std::size_t u = 0; u < users; ++u) {
    Rng rng(seed + 7919 * u);
    const std::size_t c_pred = rng.index(population.num_classes);
    SimulatedUser user = population.sample(rng);
    EpisodeOptions opts;
    opts.max_turns = max_turns;
    opts.uniform_random = uniform_random;
    opts.episode_id = u;
    opts.reward = reward_config;
    const Episode ep = simulate_dialog(policy, user, c_pred, {}, opts, rng);
    r.lengths.push_back(ep.length());
    r.rewards.push_back(ep.total_reward);
  }
  r.mean_length = std::accumulate(r.lengths.begin(), r.lengths.end(), 0.0) / static_cast<double>(users);
  r.mean_reward = std::accumulate(r.rewards.begin(), r.rewards.end(), 0.0) / static_cast<double>(users);
  return r;
}

void save_checkpoint(const PolicyModel& policy, const CheckpointInfo& info, const std::filesystem::path& path) {
  const auto& shape = policy.shape();
  json header = {{"version", 1},
                 {"classes", shape.num_classes},
                 {"input", shape.input},
                 {"hidden", shape.hidden},
                 {"layers", shape.layers},
                 {"parameters", policy.parameter_count()},
                 {"episodes", info.episodes},
                 {"epsilon", info.epsilon},
                 {"sequence", info.sequence}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  append_u64_le(bytes, text.size());
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (double x : policy.parameters()) append_f32_le(bytes, static_cast<float>(x));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

PolicyModel load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw Error(ErrorCode::kMalformedHeader, "missing FLXPOL01 magic");
  }
  const std::uint64_t len = read_u64_le(bytes.data() + 8);
  if (len > bytes.size() - 16) throw Error(ErrorCode::kMalformedHeader, "checkpoint header truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("bad checkpoint header: ") + e.what());
  }
  PolicyModel policy(header.at("classes").get<std::size_t>(), 0, header.at("hidden").get<std::size_t>(),
                     header.at("layers").get<std::size_t>());
  const std::size_t count = header.at("parameters").get<std::size_t>();
  if (count != policy.parameter_count()) throw Error(ErrorCode::kMalformedHeader, "parameter count mismatch");
  if (bytes.size() - 16 - len < 4 * count) throw Error(ErrorCode::kTruncatedPayload, "checkpoint payload truncated");
  const std::uint8_t* p = bytes.data() + 16 + len;
  for (std::size_t i = 0; i < count; ++i) policy.parameters()[i] = read_f32_le(p + 4 * i);
  if (info != nullptr) {
    info->episodes = header.value("episodes", std::uint64_t{0});
    info->epsilon = header.value("epsilon", 0.0);
    info->sequence = header.value("sequence", std::uint64_t{0});
  }
  return policy;
}

std::string episode_log_line(const EpisodeLog& log) {
  json j = {{"episode", log.episode}, {"length", log.length}, {"reward", log.reward}};
  j["loss"] = log.loss ? json(*log.loss) : json(nullptr);
  return j.dump();
}

}  // namespace faultline::policy
