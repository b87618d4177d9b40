#include "faultline/faultline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "faultline/error.hpp"
#include "faultline/random.hpp"

namespace faultline {

using nlohmann::json;

namespace {

constexpr double kMaxMultiplier = 4.0;

std::vector<Vector> directions(const std::vector<Cav>& cavs) {
  std::vector<Vector> out;
  out.reserve(cavs.size());
  for (const auto& c : cavs) out.push_back(c.v);
  return out;
}

struct Candidate {
  std::vector<int> dp;
  std::vector<int> da;
  double objective = std::numeric_limits<double>::infinity();
  double margin = 0.0;

  int changes() const {
    int n = 0;
    for (int d : dp) n += d != 0;
    for (int d : da) n += d != 0;
    return n;
  }
};

// Strict "a is preferred over b": objective, then fewer changes, then
// lexicographic deltas.
bool better(const Candidate& a, const Candidate& b) {
  if (a.objective != b.objective) return a.objective < b.objective;
  if (a.changes() != b.changes()) return a.changes() < b.changes();
  if (a.dp != b.dp) return a.dp < b.dp;
  return a.da < b.da;
}

Vector to_continuous(const std::vector<int>& dp, const std::vector<int>& da) {
  Vector x;
  x.reserve(dp.size() + da.size());
  for (int d : dp) x.push_back(d);
  for (int d : da) x.push_back(d);
  return x;
}

void evaluate(const FaultLineObjective& obj, Candidate& c) {
  const Vector x = to_continuous(c.dp, c.da);
  c.objective = obj.total(x);
  c.margin = obj.margin(x);
}

// Flips coordinate i of the concatenated assignment.
void toggle(Candidate& c, std::size_t i) {
  if (i < c.dp.size()) {
    c.dp[i] = c.dp[i] == 0 ? -1 : 0;
  } else {
    auto& d = c.da[i - c.dp.size()];
    d = d == 0 ? 1 : 0;
  }
}

bool active(const Candidate& c, std::size_t i) {
  return i < c.dp.size() ? c.dp[i] != 0 : c.da[i - c.dp.size()] != 0;
}

void one_flip_descent(const FaultLineObjective& obj, Candidate& c) {
  const std::size_t n = c.dp.size() + c.da.size();
  for (;;) {
    Candidate best = c;
    for (std::size_t i = 0; i < n; ++i) {
      Candidate trial = c;
      toggle(trial, i);
      evaluate(obj, trial);
      if (better(trial, best)) best = std::move(trial);
    }
    if (!better(best, c)) return;
    c = std::move(best);
  }
}

// Adds components by largest margin gain until the decision flips.
void greedy_add(const FaultLineObjective& obj, Candidate& c) {
  const std::size_t n = c.dp.size() + c.da.size();
  while (c.margin <= 0.0) {
    std::size_t pick = n;
    double best_margin = c.margin;
    for (std::size_t i = 0; i < n; ++i) {
      if (active(c, i)) continue;
      Candidate trial = c;
      toggle(trial, i);
      evaluate(obj, trial);
      if (trial.margin > best_margin) {
        best_margin = trial.margin;
        pick = i;
      }
    }
    if (pick == n) return;
    toggle(c, pick);
    evaluate(obj, c);
  }
}

// Drops components while the decision stays flipped, most slack first.
void greedy_remove(const FaultLineObjective& obj, Candidate& c) {
  const std::size_t n = c.dp.size() + c.da.size();
  while (c.margin > 0.0) {
    std::size_t pick = n;
    double best_margin = 0.0;
    Candidate best;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active(c, i)) continue;
      Candidate trial = c;
      toggle(trial, i);
      evaluate(obj, trial);
      if (trial.margin > best_margin) {
        best_margin = trial.margin;
        pick = i;
        best = std::move(trial);
      }
    }
    if (pick == n) return;
    c = std::move(best);
  }
}

// Replaces a flipping candidate by the best-objective subset of its changes
// that still flips and has no flipping strict subset.
void reduce_to_minimal(const FaultLineObjective& obj, Candidate& c) {
  if (c.margin <= 0.0) return;
  const std::size_t n = c.dp.size() + c.da.size();
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < n; ++i) {
    if (active(c, i)) support.push_back(i);
  }
  if (support.size() > 20) {
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t i : support) {
        if (!active(c, i)) continue;
        Candidate trial = c;
        toggle(trial, i);
        evaluate(obj, trial);
        if (trial.margin > 0.0) {
          c = std::move(trial);
          changed = true;
        }
      }
    }
    return;
  }
  const std::uint32_t full = (1u << support.size()) - 1;
  std::vector<std::uint32_t> order(full);
  for (std::uint32_t m = 0; m < full; ++m) order[m] = m;
  std::stable_sort(order.begin(), order.end(),
                   [](std::uint32_t a, std::uint32_t b) { return std::popcount(a) < std::popcount(b); });
  std::vector<std::uint32_t> flipping;
  Candidate best;
  for (std::uint32_t m : order) {
    bool covers = false;
    for (std::uint32_t f : flipping) covers = covers || (f & m) == f;
    if (covers) continue;
    Candidate trial;
    trial.dp.assign(c.dp.size(), 0);
    trial.da.assign(c.da.size(), 0);
    for (std::size_t b = 0; b < support.size(); ++b) {
      if (m >> b & 1u) toggle(trial, support[b]);
    }
    evaluate(obj, trial);
    if (trial.margin <= 0.0) continue;
    flipping.push_back(m);
    if (better(trial, best)) best = std::move(trial);
  }
  if (!flipping.empty()) c = std::move(best);
}

FaultLine to_faultline(const FaultLineQuery& q, const Candidate& c, const std::vector<Cav>& sp,
                       const std::vector<Cav>& sa) {
  FaultLine line;
  line.image_id = q.image_id;
  line.c_pred = q.c_pred;
  line.c_alt = q.c_alt;
  line.delta_pred = c.dp;
  line.delta_alt = c.da;
  for (std::size_t i = 0; i < c.dp.size(); ++i) {
    if (c.dp[i] == -1) line.nft.push_back(sp[i].concept_id);
  }
  for (std::size_t i = 0; i < c.da.size(); ++i) {
    if (c.da[i] == 1) line.pft.push_back(sa[i].concept_id);
  }
  line.objective = c.objective;
  line.margin = c.margin;
  line.flipped = c.margin > 0.0;
  return line;
}

}  // namespace

void validate_query(const ModelBackend& backend, const FaultLineQuery& query) {
  const std::size_t pred = backend.class_index(query.c_pred);
  backend.class_index(query.c_alt);
  if (query.c_pred == query.c_alt) throw Error(ErrorCode::kInvalidArgument, "c_alt must differ from c_pred");
  const Vector y = backend.logits(query.activation);
  if (argmax(y) != pred) {
    throw Error(ErrorCode::kInvalidArgument, "c_pred '" + query.c_pred + "' is not the model's prediction for '" +
                                                 query.image_id + "'");
  }
}

void FaultLineHyperparams::validate() const {
  if (!(alpha >= 0 && beta >= 0 && lambda >= 0 && tau >= 0)) {
    throw Error(ErrorCode::kInvalidArgument, "alpha, beta, lambda, tau must be >= 0");
  }
  if (max_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_iters must be >= 1");
  if (!(step_size > 0)) throw Error(ErrorCode::kInvalidArgument, "step_size must be > 0");
  if (!(rounding_threshold > 0 && rounding_threshold <= 1)) {
    throw Error(ErrorCode::kInvalidArgument, "rounding_threshold must be in (0, 1]");
  }
}

std::string FaultLineHyperparams::digest() const {
  std::ostringstream ss;
  ss.precision(17);
  ss << alpha << '|' << beta << '|' << lambda << '|' << tau << '|' << max_iters << '|' << step_size << '|'
     << rounding_threshold << '|' << random_starts;
  return ss.str();
}

ActivationTensor perturb_activations(const ActivationTensor& a, std::span<const Vector> v_pred,
                                     std::span<const double> delta_pred, std::span<const Vector> v_alt,
                                     std::span<const double> delta_alt) {
  if (v_pred.size() != delta_pred.size() || v_alt.size() != delta_alt.size()) {
    throw Error(ErrorCode::kShape, "delta length differs from CAV count");
  }
  for (const auto* group : {&v_pred, &v_alt}) {
    for (const auto& v : *group) {
      if (v.size() != a.maps()) throw Error(ErrorCode::kShape, "CAV width differs from map count");
    }
  }
  ActivationTensor out = a;
  for (std::size_t k = 0; k < a.maps(); ++k) {
    double f_pred = 1.0;
    for (std::size_t q = 0; q < v_pred.size(); ++q) f_pred += delta_pred[q] * v_pred[q][k] * v_pred[q][k];
    double f_alt = 1.0;
    for (std::size_t r = 0; r < v_alt.size(); ++r) f_alt += delta_alt[r] * v_alt[r][k] * v_alt[r][k];
    const double mult = std::clamp(f_pred * f_alt, 0.0, kMaxMultiplier);
    for (double& x : out.plane(k)) x *= mult;
  }
  return out;
}

double hinge_loss(const ModelBackend& backend, const ActivationTensor& perturbed, const std::string& c_pred,
                  const std::string& c_alt, double tau) {
  const Vector y = backend.logits(perturbed);
  const double diff = y[backend.class_index(c_pred)] - y[backend.class_index(c_alt)];
  return std::max(diff, -tau);
}

double hinge_loss(const ClassifierHead& head, const ActivationTensor& perturbed, const std::string& c_pred,
                  const std::string& c_alt, double tau) {
  return hinge_loss(GapLinearBackend(head), perturbed, c_pred, c_alt, tau);
}

FaultLineObjective::FaultLineObjective(const ModelBackend& backend, const FaultLineQuery& query,
                                       std::vector<Vector> v_pred, std::vector<Vector> v_alt,
                                       const FaultLineHyperparams& hp)
    : backend_(backend),
      activation_(query.activation),
      pred_index_(backend.class_index(query.c_pred)),
      alt_index_(backend.class_index(query.c_alt)),
      v_pred_(std::move(v_pred)),
      v_alt_(std::move(v_alt)),
      hp_(hp) {
  hp_.validate();
  for (const auto* group : {&v_pred_, &v_alt_}) {
    for (const auto& v : *group) {
      if (v.size() != activation_.maps()) throw Error(ErrorCode::kShape, "CAV width differs from map count");
    }
  }
}

void FaultLineObjective::factors(std::span<const double> x, Vector& f_pred, Vector& f_alt) const {
  const std::size_t m = activation_.maps();
  f_pred.assign(m, 1.0);
  f_alt.assign(m, 1.0);
  for (std::size_t q = 0; q < n_pred(); ++q) {
    for (std::size_t k = 0; k < m; ++k) f_pred[k] += x[q] * v_pred_[q][k] * v_pred_[q][k];
  }
  for (std::size_t r = 0; r < n_alt(); ++r) {
    for (std::size_t k = 0; k < m; ++k) f_alt[k] += x[n_pred() + r] * v_alt_[r][k] * v_alt_[r][k];
  }
}

ActivationTensor FaultLineObjective::perturbed(std::span<const double> x) const {
  return perturb_activations(activation_, v_pred_, x.subspan(0, n_pred()), v_alt_, x.subspan(n_pred(), n_alt()));
}

double FaultLineObjective::margin(std::span<const double> x) const {
  const Vector y = backend_.logits(perturbed(x));
  return y[alt_index_] - y[pred_index_];
}

double FaultLineObjective::hinge(std::span<const double> x) const {
  return std::max(-margin(x), -hp_.tau);
}

Vector FaultLineObjective::smooth_gradient(std::span<const double> x) const {
  Vector grad(dim(), 0.0);
  const ActivationTensor p = perturbed(x);
  const Vector y = backend_.logits(p);
  const double diff = y[pred_index_] - y[alt_index_];
  if (diff <= -hp_.tau || hp_.alpha == 0.0) return grad;  // floor active

  const ActivationTensor gp = backend_.gradient(p, pred_index_);
  const ActivationTensor ga = backend_.gradient(p, alt_index_);
  Vector f_pred, f_alt;
  factors(x, f_pred, f_alt);
  const std::size_t m = activation_.maps();
  for (std::size_t k = 0; k < m; ++k) {
    const double mult = f_pred[k] * f_alt[k];
    if (mult < 0.0 || mult > kMaxMultiplier) continue;  // clamped: locally flat
    const auto a = activation_.plane(k);
    const auto dp = gp.plane(k);
    const auto da = ga.plane(k);
    double d_mult = 0.0;  // d(g_pred - g_alt) / d mult_k
    for (std::size_t c = 0; c < a.size(); ++c) d_mult += (dp[c] - da[c]) * a[c];
    d_mult *= hp_.alpha;
    for (std::size_t q = 0; q < n_pred(); ++q) grad[q] += d_mult * v_pred_[q][k] * v_pred_[q][k] * f_alt[k];
    for (std::size_t r = 0; r < n_alt(); ++r) {
      grad[n_pred() + r] += d_mult * v_alt_[r][k] * v_alt_[r][k] * f_pred[k];
    }
  }
  return grad;
}

double FaultLineObjective::penalty(std::span<const double> x) const {
  double p = 0.0;
  for (std::size_t q = 0; q < n_pred(); ++q) p += hp_.beta * std::abs(x[q]);
  for (std::size_t r = 0; r < n_alt(); ++r) p += hp_.lambda * std::abs(x[n_pred() + r]);
  return p;
}

void FaultLineObjective::prox(std::span<double> x, double s) const {
  // On [-1,0] the L1 term is -beta*x, on [0,1] it is lambda*x: shift, then project.
  for (std::size_t q = 0; q < n_pred(); ++q) x[q] = std::clamp(x[q] + s * hp_.beta, -1.0, 0.0);
  for (std::size_t r = 0; r < n_alt(); ++r) {
    auto& v = x[n_pred() + r];
    v = std::clamp(v - s * hp_.lambda, 0.0, 1.0);
  }
}

FistaResult run_fista(const FaultLineObjective& obj, Vector start) {
  const auto& hp = obj.hyperparams();
  const std::size_t n = obj.dim();
  FistaResult res;
  obj.prox(start, 0.0);
  Vector x = start;
  Vector y = start;
  double fx = obj.total(x);
  double t = 1.0;
  res.trace.push_back(fx);
  res.restart_at.push_back(0);
  bool momentum = false;

  for (std::size_t iter = 0; iter < hp.max_iters; ++iter) {
    res.iterations = iter + 1;
    const double fy_smooth = obj.smooth(y);
    const Vector g = obj.smooth_gradient(y);
    double s = hp.step_size;
    Vector next(n);
    for (;;) {
      for (std::size_t i = 0; i < n; ++i) next[i] = y[i] - s * g[i];
      obj.prox(next, s);
      double lin = 0.0, quad = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = next[i] - y[i];
        lin += g[i] * d;
        quad += d * d;
      }
      if (obj.smooth(next) <= fy_smooth + lin + quad / (2.0 * s) + 1e-15 || s < 1e-12) break;
      s *= 0.5;
    }
    const double f_next = obj.total(next);

    if (f_next > fx) {
      if (!momentum) break;  // plain proximal step cannot improve: stationary
      // Adaptive restart: drop momentum and retry from the last accepted iterate.
      y = x;
      t = 1.0;
      momentum = false;
      ++res.restarts;
      res.restart_at.push_back(res.trace.size());
      continue;
    }

    double step_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) step_norm = std::max(step_norm, std::abs(next[i] - x[i]));
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    for (std::size_t i = 0; i < n; ++i) y[i] = next[i] + ((t - 1.0) / t_next) * (next[i] - x[i]);
    momentum = t > 1.0;
    t = t_next;
    const double decrease = fx - f_next;
    x = std::move(next);
    fx = f_next;
    res.trace.push_back(fx);
    if (step_norm < 1e-10 && decrease < 1e-14) break;
  }
  res.x = std::move(x);
  res.objective = fx;
  return res;
}

double discrete_objective(const FaultLineObjective& objective, const std::vector<int>& delta_pred,
                          const std::vector<int>& delta_alt) {
  return objective.total(to_continuous(delta_pred, delta_alt));
}

FaultLine solve_faultline(const ModelBackend& backend, const FaultLineQuery& query,
                          const std::vector<Cav>& sigma_pred, const std::vector<Cav>& sigma_alt,
                          const FaultLineHyperparams& hp, std::uint64_t seed) {
  validate_query(backend, query);
  if (sigma_pred.empty() && sigma_alt.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "both concept sets are empty");
  }
  const FaultLineObjective obj(backend, query, directions(sigma_pred), directions(sigma_alt), hp);
  const std::size_t np = obj.n_pred();
  const std::size_t na = obj.n_alt();

  std::vector<Vector> starts;
  starts.emplace_back(obj.dim(), 0.0);
  Rng rng(seed);
  for (std::size_t s = 0; s < hp.random_starts; ++s) {
    Vector x(obj.dim());
    for (std::size_t i = 0; i < np; ++i) x[i] = -rng.uniform();
    for (std::size_t i = 0; i < na; ++i) x[np + i] = rng.uniform();
    starts.push_back(std::move(x));
  }

  Candidate best;
  FistaResult best_run;
  double best_continuous = std::numeric_limits<double>::infinity();
  std::size_t total_iterations = 0;
  std::size_t total_restarts = 0;
  for (auto& start : starts) {
    FistaResult run = run_fista(obj, std::move(start));
    total_iterations += run.iterations;
    total_restarts += run.restarts;

    Candidate rounded;
    for (std::size_t i = 0; i < np; ++i) rounded.dp.push_back(std::abs(run.x[i]) >= hp.rounding_threshold ? -1 : 0);
    for (std::size_t i = 0; i < na; ++i) rounded.da.push_back(std::abs(run.x[np + i]) >= hp.rounding_threshold ? 1 : 0);
    evaluate(obj, rounded);

    Candidate polished = rounded;
    one_flip_descent(obj, polished);

    Candidate repaired = polished;
    greedy_add(obj, repaired);
    greedy_remove(obj, repaired);
    one_flip_descent(obj, repaired);

    for (const Candidate* c : {&rounded, &polished, &repaired}) {
      if (better(*c, best)) best = *c;
    }
    if (run.objective < best_continuous) {
      best_continuous = run.objective;
      best_run = std::move(run);
    }
  }

  // Without a sparsity penalty the target is the largest margin, not a small edit.
  if (hp.beta > 0.0 || hp.lambda > 0.0) reduce_to_minimal(obj, best);
  FaultLine line = to_faultline(query, best, sigma_pred, sigma_alt);
  line.iterations = total_iterations;
  line.restarts = total_restarts;
  line.trace = std::move(best_run.trace);
  return line;
}

FaultLine brute_force_faultline(const ModelBackend& backend, const FaultLineQuery& query,
                                const std::vector<Cav>& sigma_pred, const std::vector<Cav>& sigma_alt,
                                const FaultLineHyperparams& hp) {
  const std::size_t n = sigma_pred.size() + sigma_alt.size();
  if (n > 16) throw Error(ErrorCode::kTooLarge, "brute force limited to 16 concepts, got " + std::to_string(n));
  validate_query(backend, query);
  const FaultLineObjective obj(backend, query, directions(sigma_pred), directions(sigma_alt), hp);
  const std::size_t np = sigma_pred.size();

  Candidate best;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    Candidate c;
    c.dp.assign(np, 0);
    c.da.assign(n - np, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) toggle(c, i);
    }
    evaluate(obj, c);
    if (better(c, best)) best = std::move(c);
  }
  FaultLine line = to_faultline(query, best, sigma_pred, sigma_alt);
  line.iterations = std::size_t{1} << n;
  return line;
}

double recompute_margin(const ModelBackend& backend, const FaultLineQuery& query, const std::vector<Cav>& sigma_pred,
                        const std::vector<Cav>& sigma_alt, const FaultLine& line) {
  Vector dp(line.delta_pred.begin(), line.delta_pred.end());
  Vector da(line.delta_alt.begin(), line.delta_alt.end());
  const auto vp = directions(sigma_pred);
  const auto va = directions(sigma_alt);
  const Vector y = backend.logits(perturb_activations(query.activation, vp, dp, va, da));
  return y[backend.class_index(query.c_alt)] - y[backend.class_index(query.c_pred)];
}

std::string faultline_bundle_json(const FaultLine& line,
                                  const std::map<std::string, std::vector<std::string>>& concept_examples,
                                  int indent) {
  json j;
  j["query"] = {{"image_id", line.image_id}, {"c_pred", line.c_pred}, {"c_alt", line.c_alt}};
  j["pft"] = line.pft;
  j["nft"] = line.nft;
  j["margin"] = line.margin;
  j["objective"] = line.objective;
  j["iterations"] = line.iterations;
  j["flipped"] = line.flipped;
  json examples = json::object();
  for (const auto* ids : {&line.pft, &line.nft}) {
    for (const auto& id : *ids) {
      auto it = concept_examples.find(id);
      examples[id] = it == concept_examples.end() ? std::vector<std::string>{} : it->second;
    }
  }
  j["concept_examples"] = examples;
  return j.dump(indent);
}

}  // namespace faultline
