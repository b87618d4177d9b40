#include "faultline/cav.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/random.hpp"

namespace faultline {

using nlohmann::json;

namespace {

struct Example {
  const Vector* x;
  double y;  // 1 = concept, 0 = random
};

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// Mean log-loss + (l2/2)|w|^2, bias unpenalized. theta = (w, b).
double objective(const std::vector<Example>& data, const Vector& theta, double l2) {
  const std::size_t d = theta.size() - 1;
  double loss = 0.0;
  for (const auto& e : data) {
    double t = theta[d];
    for (std::size_t i = 0; i < d; ++i) t += theta[i] * (*e.x)[i];
    // log(1 + exp(-s t)) with s = +-1, computed stably
    const double s = e.y > 0.5 ? t : -t;
    loss += s > 0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s));
  }
  loss /= static_cast<double>(data.size());
  double reg = 0.0;
  for (std::size_t i = 0; i < d; ++i) reg += theta[i] * theta[i];
  return loss + 0.5 * l2 * reg;
}

// Solves H x = g for symmetric positive definite H (Cholesky).
Vector solve_spd(std::vector<Vector> h, Vector g) {
  const std::size_t n = g.size();
  for (std::size_t j = 0; j < n; ++j) {
    double diag = h[j][j];
    for (std::size_t k = 0; k < j; ++k) diag -= h[j][k] * h[j][k];
    diag = std::sqrt(std::max(diag, 1e-300));
    h[j][j] = diag;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= h[i][k] * h[j][k];
      h[i][j] = s / diag;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = g[i];
    for (std::size_t k = 0; k < i; ++k) s -= h[i][k] * g[k];
    g[i] = s / h[i][i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = g[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= h[k][i] * g[k];
    g[i] = s / h[i][i];
  }
  return g;
}

Vector fit_logistic(const std::vector<Example>& data, std::size_t dim, const CavOptions& options) {
  const std::size_t p = dim + 1;
  Vector theta(p, 0.0);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  double f = objective(data, theta, options.l2);
  for (std::size_t step = 0; step < options.max_newton_steps; ++step) {
    Vector grad(p, 0.0);
    std::vector<Vector> hess(p, Vector(p, 0.0));
    for (const auto& e : data) {
      double t = theta[dim];
      for (std::size_t i = 0; i < dim; ++i) t += theta[i] * (*e.x)[i];
      const double mu = sigmoid(t);
      const double r = (mu - e.y) * inv_n;
      const double w = mu * (1.0 - mu) * inv_n;
      for (std::size_t i = 0; i < p; ++i) {
        const double xi = i < dim ? (*e.x)[i] : 1.0;
        grad[i] += r * xi;
        for (std::size_t j = 0; j <= i; ++j) {
          const double xj = j < dim ? (*e.x)[j] : 1.0;
          hess[i][j] += w * xi * xj;
        }
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      grad[i] += options.l2 * theta[i];
      hess[i][i] += options.l2;
    }
    hess[dim][dim] += 1e-10;  // keeps the bias direction positive definite
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = i + 1; j < p; ++j) hess[i][j] = hess[j][i];
    }
    double gnorm = 0.0;
    for (double g : grad) gnorm = std::max(gnorm, std::abs(g));
    if (gnorm < 1e-12) break;

    const Vector dir = solve_spd(hess, grad);
    double t = 1.0;
    Vector next(p);
    double f_next = f;
    for (int halvings = 0; halvings < 60; ++halvings, t *= 0.5) {
      for (std::size_t i = 0; i < p; ++i) next[i] = theta[i] - t * dir[i];
      f_next = objective(data, next, options.l2);
      if (f_next <= f) break;
    }
    if (!(f_next <= f)) break;
    const bool converged = f - f_next < 1e-15;
    theta = next;
    f = f_next;
    if (converged) break;
  }
  return theta;
}

void split(const std::vector<Vector>& side, std::vector<const Vector*>& train, std::vector<const Vector*>& test) {
  for (std::size_t i = 0; i < side.size(); ++i) {
    const bool held = side.size() >= 5 ? (i % 5 == 4) : (i + 1 == side.size());
    (held ? test : train).push_back(&side[i]);
  }
}

}  // namespace

Cav fit_cav(const std::vector<Vector>& concept_features, const std::vector<Vector>& random_features,
            std::uint64_t /*seed: the solver and split are deterministic*/, const CavOptions& options) {
  if (concept_features.size() < 2 || random_features.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "fit_cav needs at least two examples per side");
  }
  const std::size_t dim = concept_features.front().size();
  for (const auto* side : {&concept_features, &random_features}) {
    for (const auto& x : *side) {
      if (x.size() != dim) throw Error(ErrorCode::kShape, "CAV feature dimension mismatch");
    }
  }
  bool identical = true;
  for (const auto* side : {&concept_features, &random_features}) {
    for (const auto& x : *side) identical = identical && x == concept_features.front();
  }
  if (identical) throw InseparableError(0.5);

  std::vector<const Vector*> pos_train, pos_test, neg_train, neg_test;
  split(concept_features, pos_train, pos_test);
  split(random_features, neg_train, neg_test);

  std::vector<Example> train;
  for (auto* x : pos_train) train.push_back({x, 1.0});
  for (auto* x : neg_train) train.push_back({x, 0.0});
  const Vector theta = fit_logistic(train, dim, options);

  Cav cav;
  cav.v.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(dim));
  double norm = 0.0;
  for (double x : cav.v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm < 1e-300) throw InseparableError(0.5);
  for (double& x : cav.v) x /= norm;

  auto mean_projection = [&](const std::vector<Vector>& side) {
    double s = 0.0;
    for (const auto& x : side) {
      for (std::size_t i = 0; i < dim; ++i) s += cav.v[i] * x[i];
    }
    return s / static_cast<double>(side.size());
  };
  if (mean_projection(concept_features) < mean_projection(random_features)) {
    for (double& x : cav.v) x = -x;
  }

  std::size_t correct = 0;
  auto predict = [&](const Vector& x) {
    double t = theta[dim];
    for (std::size_t i = 0; i < dim; ++i) t += theta[i] * x[i];
    return t > 0.0;
  };
  for (auto* x : pos_test) correct += predict(*x) ? 1 : 0;
  for (auto* x : neg_test) correct += predict(*x) ? 0 : 1;
  cav.separator_accuracy = static_cast<double>(correct) / static_cast<double>(pos_test.size() + neg_test.size());
  return cav;
}

std::vector<Cav> fit_cavs(const std::vector<Xconcept>& concepts, std::uint64_t seed, const CavOptions& options) {
  std::vector<Cav> out;
  Rng rng(seed);
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    std::vector<const Vector*> pool;
    for (std::size_t o = 0; o < concepts.size(); ++o) {
      if (o == c) continue;
      for (const auto& m : concepts[o].members) pool.push_back(&m.feature);
    }
    std::vector<Vector> positives;
    for (const auto& m : concepts[c].members) positives.push_back(m.feature);
    if (pool.empty() || positives.size() < 2) continue;
    std::vector<Vector> negatives;
    for (std::size_t i = 0; i < positives.size(); ++i) negatives.push_back(*pool[rng.index(pool.size())]);
    try {
      Cav cav = fit_cav(positives, negatives, seed + c, options);
      cav.concept_id = concepts[c].concept_id;
      out.push_back(std::move(cav));
    } catch (const InseparableError&) {
      continue;
    }
  }
  return out;
}

double directional_derivative(const ModelBackend& backend, const ActivationTensor& a, const std::string& label,
                              const Cav& cav) {
  const Vector g = backend.pooled_gradient(a, backend.class_index(label));
  if (g.size() != cav.v.size()) throw Error(ErrorCode::kShape, "CAV dimension differs from feature width");
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * cav.v[i];
  return s;
}

double directional_derivative(const ClassifierHead& head, const ActivationTensor& a, const std::string& label,
                              const Cav& cav) {
  return directional_derivative(GapLinearBackend(head), a, label, cav);
}

ClassConceptSet class_specific_xconcepts(const std::vector<Cav>& cavs, const LabeledActivationSet& dataset,
                                         const ModelBackend& backend, const std::string& label, std::size_t n) {
  if (n > cavs.size()) throw Error(ErrorCode::kInvalidArgument, "n exceeds number of concepts");
  backend.class_index(label);
  const auto& ids = dataset.ids_of(label);
  if (ids.empty()) throw Error(ErrorCode::kEmptyClass, "class '" + label + "' has no images");

  ClassConceptSet set;
  set.class_label = label;
  for (const auto& cav : cavs) {
    ConceptScore score;
    score.concept_id = cav.concept_id;
    std::size_t positive = 0;
    for (const auto& id : ids) {
      const double s = directional_derivative(backend, dataset.find(id).activation, label, cav);
      if (s > 0.0) ++positive;
      score.mean_s += s;
    }
    score.tcav = static_cast<double>(positive) / static_cast<double>(ids.size());
    score.mean_s /= static_cast<double>(ids.size());
    set.entries.push_back(std::move(score));
  }
  std::stable_sort(set.entries.begin(), set.entries.end(), [](const ConceptScore& a, const ConceptScore& b) {
    if (a.tcav != b.tcav) return a.tcav > b.tcav;
    if (a.mean_s != b.mean_s) return a.mean_s > b.mean_s;
    return a.concept_id < b.concept_id;
  });
  for (std::size_t i = 0; i < n; ++i) set.selected.push_back(set.entries[i].concept_id);
  return set;
}

const Cav& find_cav(const std::vector<Cav>& cavs, const std::string& concept_id) {
  for (const auto& c : cavs) {
    if (c.concept_id == concept_id) return c;
  }
  throw Error(ErrorCode::kNotFound, "no CAV for concept '" + concept_id + "'");
}

std::string cavs_to_json(const std::vector<Cav>& cavs) {
  json j;
  j["cavs"] = json::array();
  for (const auto& c : cavs) {
    j["cavs"].push_back({{"concept_id", c.concept_id}, {"v", c.v}, {"accuracy", c.separator_accuracy}});
  }
  return j.dump(2) + "\n";
}

void save_cavs(const std::vector<Cav>& cavs, const std::filesystem::path& path) {
  write_text_file(path, cavs_to_json(cavs));
}

std::vector<Cav> load_cavs(const std::filesystem::path& path) {
  std::vector<Cav> out;
  try {
    const json j = json::parse(read_text_file(path));
    for (const auto& c : j.at("cavs")) {
      out.push_back({c.at("concept_id").get<std::string>(), c.at("v").get<Vector>(), c.at("accuracy").get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, "bad CAV store '" + path.string() + "': " + e.what());
  }
  return out;
}

}  // namespace faultline
