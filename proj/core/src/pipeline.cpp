#include "faultline/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"

namespace faultline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path data_root(const fs::path& base_dir) {
  if (const char* env = std::getenv("FAULTLINE_DATA_DIR"); env != nullptr && *env != '\0') return fs::path(env);
  return base_dir;
}

fs::path resolve(const fs::path& root, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : root / path;
}

double number_or_inf(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    throw Error(ErrorCode::kInvalidArgument, "expected a number, got '" + s + "'");
  }
  return j.get<double>();
}

json number_json(double x) { return std::isinf(x) ? json("inf") : json(x); }

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

PipelineConfig PipelineConfig::defaults(const fs::path& base_dir) {
  return from_json("{}", base_dir);
}

PipelineConfig PipelineConfig::from_json(const std::string& text, const fs::path& base_dir) {
  PipelineConfig c;
  const fs::path root = data_root(base_dir);
  try {
    const json j = json::parse(text);
    const json data = j.value("data", json::object());
    c.activations = resolve(root, data.value("activations", std::string("activations.flx")));
    c.head = resolve(root, data.value("head", std::string("head.json")));
    if (data.contains("map_labels")) c.map_labels = resolve(root, data.at("map_labels").get<std::string>());

    const json stores = j.value("stores", json::object());
    c.xconcepts = resolve(root, stores.value("xconcepts", std::string("out/xconcepts.json")));
    c.cavs = resolve(root, stores.value("cavs", std::string("out/cavs.json")));
    c.class_sets = resolve(root, stores.value("class_sets", std::string("out/class_sets.json")));
    c.policy = resolve(root, stores.value("policy", std::string("out/policy.flxpol")));
    c.sessions = resolve(root, stores.value("sessions", std::string("out/sessions")));

    const json miner = j.value("miner", json::object());
    read_opt(miner, "p", c.p);
    read_opt(miner, "k_min", c.clustering.k_min);
    read_opt(miner, "k_max", c.clustering.k_max);
    read_opt(miner, "outlier_fraction", c.clustering.outlier_fraction);
    read_opt(miner, "restarts", c.clustering.restarts);
    read_opt(miner, "max_iterations", c.clustering.max_iterations);
    read_opt(miner, "allow", c.allow);
    read_opt(miner, "deny", c.deny);

    const json cav = j.value("cav", json::object());
    read_opt(cav, "n_per_class", c.n_per_class);
    read_opt(cav, "l2", c.cav.l2);

    const json solver = j.value("solver", json::object());
    read_opt(solver, "alpha", c.solver.alpha);
    read_opt(solver, "beta", c.solver.beta);
    read_opt(solver, "lambda", c.solver.lambda);
    if (solver.contains("tau")) c.solver.tau = number_or_inf(solver.at("tau"));
    read_opt(solver, "max_iters", c.solver.max_iters);
    read_opt(solver, "step_size", c.solver.step_size);
    read_opt(solver, "rounding_threshold", c.solver.rounding_threshold);
    read_opt(solver, "random_starts", c.solver.random_starts);

    const json pol = j.value("policy", json::object());
    read_opt(pol, "episodes", c.training.episodes);
    read_opt(pol, "update_every", c.training.update_every);
    read_opt(pol, "anneal_episodes", c.training.anneal_episodes);
    read_opt(pol, "epsilon_start", c.training.epsilon_start);
    read_opt(pol, "epsilon_end", c.training.epsilon_end);
    read_opt(pol, "max_turns", c.training.max_turns);
    read_opt(pol, "buffer_capacity", c.training.buffer_capacity);
    read_opt(pol, "learning_rate", c.training.learning.learning_rate);
    read_opt(pol, "clip", c.training.learning.clip);
    read_opt(pol, "gamma", c.training.learning.gamma);
    read_opt(pol, "n_step", c.training.learning.n_step);
    read_opt(pol, "batch", c.training.learning.batch);
    read_opt(pol, "steps_per_update", c.training.learning.steps_per_update);
    read_opt(pol, "value_weight", c.training.learning.value_weight);
    read_opt(pol, "hidden", c.hidden);
    read_opt(pol, "layers", c.layers);
    read_opt(pol, "evaluation_users", c.evaluation_users);
    if (pol.contains("reward")) {
      const json& r = pol.at("reward");
      read_opt(r, "correct", c.training.reward.correct);
      read_opt(r, "incorrect", c.training.reward.incorrect);
      read_opt(r, "per_turn", c.training.reward.per_turn);
    }

    const json pop = j.value("population", json::object());
    read_opt(pop, "structure_seed", c.population.structure_seed);
    read_opt(pop, "best_prior", c.population.best_prior);
    read_opt(pop, "second_prior", c.population.second_prior);
    read_opt(pop, "base_prior", c.population.base_prior);
    read_opt(pop, "prior_noise", c.population.prior_noise);
    read_opt(pop, "learning_rate_lo", c.population.learning_rate_lo);
    read_opt(pop, "learning_rate_hi", c.population.learning_rate_hi);
    read_opt(pop, "quiz_noise", c.population.quiz_noise);

    const json svc = j.value("service", json::object());
    read_opt(svc, "host", c.service.host);
    read_opt(svc, "port", c.service.port);
    read_opt(svc, "images_per_session", c.service.images_per_session);
    read_opt(svc, "quiz_options", c.service.quiz_options);

    read_opt(j, "threads", c.threads);
    read_opt(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("bad config: ") + e.what());
  }
  c.solver.validate();
  if (c.training.update_every == 0) throw Error(ErrorCode::kInvalidArgument, "update_every must be >= 1");
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  return from_json(read_text_file(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

std::string PipelineConfig::to_json() const {
  json j;
  j["data"] = {{"activations", activations.string()}, {"head", head.string()}};
  if (map_labels) j["data"]["map_labels"] = map_labels->string();
  j["stores"] = {{"xconcepts", xconcepts.string()}, {"cavs", cavs.string()}, {"class_sets", class_sets.string()},
                 {"policy", policy.string()}, {"sessions", sessions.string()}};
  j["miner"] = {{"p", p},
                {"k_min", clustering.k_min},
                {"k_max", clustering.k_max},
                {"outlier_fraction", clustering.outlier_fraction},
                {"restarts", clustering.restarts},
                {"max_iterations", clustering.max_iterations},
                {"allow", allow},
                {"deny", deny}};
  j["cav"] = {{"n_per_class", n_per_class}, {"l2", cav.l2}};
  j["solver"] = {{"alpha", solver.alpha},         {"beta", solver.beta},
                 {"lambda", solver.lambda},       {"tau", number_json(solver.tau)},
                 {"max_iters", solver.max_iters}, {"step_size", solver.step_size},
                 {"rounding_threshold", solver.rounding_threshold}, {"random_starts", solver.random_starts}};
  const auto& l = training.learning;
  j["policy"] = {{"episodes", training.episodes},
                 {"update_every", training.update_every},
                 {"anneal_episodes", training.anneal_episodes},
                 {"epsilon_start", training.epsilon_start},
                 {"epsilon_end", training.epsilon_end},
                 {"max_turns", training.max_turns},
                 {"buffer_capacity", training.buffer_capacity},
                 {"learning_rate", l.learning_rate},
                 {"clip", l.clip},
                 {"gamma", l.gamma},
                 {"n_step", l.n_step},
                 {"batch", l.batch},
                 {"steps_per_update", l.steps_per_update},
                 {"value_weight", l.value_weight},
                 {"hidden", hidden},
                 {"layers", layers},
                 {"evaluation_users", evaluation_users},
                 {"reward",
                  {{"correct", training.reward.correct},
                   {"incorrect", training.reward.incorrect},
                   {"per_turn", training.reward.per_turn}}}};
  j["population"] = {{"structure_seed", population.structure_seed}, {"best_prior", population.best_prior},
                     {"second_prior", population.second_prior},     {"base_prior", population.base_prior},
                     {"prior_noise", population.prior_noise},       {"learning_rate_lo", population.learning_rate_lo},
                     {"learning_rate_hi", population.learning_rate_hi}, {"quiz_noise", population.quiz_noise}};
  j["service"] = {{"host", service.host},
                  {"port", service.port},
                  {"images_per_session", service.images_per_session},
                  {"quiz_options", service.quiz_options}};
  j["threads"] = threads;
  j["seed"] = seed;
  return j.dump(2);
}

void PipelineConfig::validate_inputs() const {
  for (const auto& p : {activations, head}) {
    if (!fs::exists(p)) throw Error(ErrorCode::kIo, "missing input file '" + p.string() + "'");
  }
  if (map_labels && !fs::exists(*map_labels)) {
    throw Error(ErrorCode::kIo, "missing input file '" + map_labels->string() + "'");
  }
}

LabeledActivationSet load_dataset(const PipelineConfig& config) {
  config.validate_inputs();
  return load_activation_set(config.activations);
}

ClassifierHead load_classifier(const PipelineConfig& config) {
  config.validate_inputs();
  return load_head(config.head);
}

namespace {

std::vector<std::string> load_map_labels(const PipelineConfig& config) {
  if (!config.map_labels) return {};
  try {
    return json::parse(read_text_file(*config.map_labels)).get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("bad map label file: ") + e.what());
  }
}

}  // namespace

Artifacts load_artifacts(const PipelineConfig& config) {
  Artifacts a;
  a.dataset = load_dataset(config);
  a.backend = std::make_shared<GapLinearBackend>(load_classifier(config));
  a.map_labels = load_map_labels(config);
  a.concepts = load_xconcepts(config.xconcepts, a.dataset);
  a.cavs = load_cavs(config.cavs);
  a.class_sets = load_class_sets(config.class_sets);
  return a;
}

std::string class_sets_to_json(const std::map<std::string, ClassConceptSet>& sets) {
  json j;
  j["classes"] = json::array();
  for (const auto& [label, set] : sets) {
    json entries = json::array();
    for (const auto& e : set.entries) entries.push_back({{"concept_id", e.concept_id}, {"tcav", e.tcav}, {"mean_s", e.mean_s}});
    j["classes"].push_back({{"class", label}, {"entries", entries}, {"selected", set.selected}});
  }
  return j.dump(2) + "\n";
}

std::map<std::string, ClassConceptSet> load_class_sets(const fs::path& path) {
  std::map<std::string, ClassConceptSet> out;
  try {
    const json j = json::parse(read_text_file(path));
    for (const auto& c : j.at("classes")) {
      ClassConceptSet set;
      set.class_label = c.at("class").get<std::string>();
      for (const auto& e : c.at("entries")) {
        set.entries.push_back({e.at("concept_id").get<std::string>(), e.at("tcav").get<double>(), e.at("mean_s").get<double>()});
      }
      set.selected = c.at("selected").get<std::vector<std::string>>();
      out.emplace(set.class_label, std::move(set));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, "bad class set store '" + path.string() + "': " + e.what());
  }
  return out;
}

Explainer::Explainer(Artifacts artifacts, FaultLineHyperparams hp, std::uint64_t seed)
    : artifacts_(std::move(artifacts)), hp_(hp), seed_(seed) {
  if (!artifacts_.backend) throw Error(ErrorCode::kInvalidArgument, "explainer needs a model backend");
  hp_.validate();
}

std::string Explainer::predicted_label(const std::string& image_id) const {
  const auto& item = artifacts_.dataset.find(image_id);
  return classes()[argmax(artifacts_.backend->logits(item.activation))];
}

FaultLineQuery Explainer::query(const std::string& image_id, const std::string& c_alt) const {
  const auto& item = artifacts_.dataset.find(image_id);
  FaultLineQuery q{image_id, item.activation, predicted_label(image_id), c_alt};
  validate_query(*artifacts_.backend, q);
  return q;
}

std::vector<Cav> Explainer::sigma(const std::string& label) const {
  auto it = artifacts_.class_sets.find(label);
  if (it == artifacts_.class_sets.end()) throw Error(ErrorCode::kNotFound, "no class-specific concepts for '" + label + "'");
  std::vector<Cav> out;
  for (const auto& id : it->second.selected) out.push_back(find_cav(artifacts_.cavs, id));
  return out;
}

FaultLine Explainer::explain(const std::string& image_id, const std::string& c_alt) const {
  const auto q = query(image_id, c_alt);
  return solve_faultline(*artifacts_.backend, q, sigma(q.c_pred), sigma(c_alt), hp_, seed_);
}

FaultLine Explainer::explain_brute_force(const std::string& image_id, const std::string& c_alt) const {
  const auto q = query(image_id, c_alt);
  return brute_force_faultline(*artifacts_.backend, q, sigma(q.c_pred), sigma(c_alt), hp_);
}

double Explainer::verify_margin(const FaultLine& line) const {
  const auto q = query(line.image_id, line.c_alt);
  return recompute_margin(*artifacts_.backend, q, sigma(line.c_pred), sigma(line.c_alt), line);
}

std::map<std::string, std::vector<std::string>> Explainer::concept_examples(const FaultLine& line,
                                                                            std::size_t per_concept) const {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto* ids : {&line.pft, &line.nft}) {
    for (const auto& id : *ids) {
      auto& examples = out[id];
      for (const auto& x : artifacts_.concepts) {
        if (x.concept_id != id) continue;
        for (std::size_t i = 0; i < std::min(per_concept, x.example_image_ids.size()); ++i) {
          examples.push_back(x.example_image_ids[i]);
        }
      }
    }
  }
  return out;
}

std::string Explainer::bundle_json(const FaultLine& line, int indent) const {
  return faultline_bundle_json(line, concept_examples(line), indent);
}

MineSummary cmd_mine(const PipelineConfig& config) {
  const auto dataset = load_dataset(config);
  const GapLinearBackend backend(load_classifier(config));
  const auto superpixels = select_top_superpixels(dataset, backend, config.p);
  auto result = cluster_xconcepts(superpixels, config.clustering);
  const auto labels = load_map_labels(config);
  if (!labels.empty()) name_concepts_by_dominant_map(result.concepts, labels);
  const std::set<std::string> allow(config.allow.begin(), config.allow.end());
  const std::set<std::string> deny(config.deny.begin(), config.deny.end());
  auto concepts = filter_concepts(std::move(result.concepts), allow, deny);
  save_xconcepts(concepts, config.xconcepts);

  MineSummary s{superpixels.size(), result.chosen_k, result.silhouette, {}};
  for (const auto& x : concepts) s.concept_ids.push_back(x.concept_id);
  return s;
}

FitSummary cmd_fit_cavs(const PipelineConfig& config) {
  const auto dataset = load_dataset(config);
  const GapLinearBackend backend(load_classifier(config));
  const auto concepts = load_xconcepts(config.xconcepts, dataset);
  const auto cavs = fit_cavs(concepts, config.seed, config.cav);
  save_cavs(cavs, config.cavs);

  FitSummary s;
  for (const auto& x : concepts) {
    const bool fitted = std::any_of(cavs.begin(), cavs.end(), [&](const Cav& c) { return c.concept_id == x.concept_id; });
    (fitted ? s.fitted : s.skipped).push_back(x.concept_id);
  }
  std::map<std::string, ClassConceptSet> sets;
  const std::size_t n = std::min(config.n_per_class, cavs.size());
  for (const auto& label : backend.class_labels()) {
    sets.emplace(label, class_specific_xconcepts(cavs, dataset, backend, label, n));
  }
  write_text_file(config.class_sets, class_sets_to_json(sets));
  return s;
}

FaultLine cmd_explain(const PipelineConfig& config, const std::string& image_id, const std::string& c_alt,
                      std::string* bundle) {
  const Explainer explainer(load_artifacts(config), config.solver, config.seed);
  FaultLine line = explainer.explain(image_id, c_alt);
  if (bundle != nullptr) *bundle = explainer.bundle_json(line);
  return line;
}

TrainSummary cmd_train_policy(const PipelineConfig& config, std::size_t episodes, std::ostream* log) {
  const auto head = load_classifier(config);
  policy::PolicyModel model(head.num_classes(), config.seed, config.hidden, config.layers);
  policy::Optimizer optimizer(model.parameter_count());
  auto population = config.population;
  population.num_classes = head.num_classes();
  auto training = config.training;
  training.episodes = episodes;
  training.seed = config.seed;

  const auto result = policy::train_policy(model, optimizer, population, training);
  if (log != nullptr) {
    for (const auto& e : result.log) *log << policy::episode_log_line(e) << "\n";
  }
  policy::save_checkpoint(model, {episodes, policy::epsilon_at(training, episodes), 0}, config.policy);

  TrainSummary s{episodes, result.interactions, result.updates, {}, {}};
  const std::uint64_t eval_seed = config.seed + 1000003;
  s.trained = policy::evaluate_policy(model, population, config.evaluation_users, eval_seed, false, training.max_turns,
                                      training.reward);
  s.baseline = policy::evaluate_policy(model, population, config.evaluation_users, eval_seed, true, training.max_turns,
                                       training.reward);
  return s;
}

trust::TrustReport cmd_evaluate_games(const fs::path& games_file) {
  return trust::trust_report(trust::games_from_json(read_text_file(games_file)));
}

}  // namespace faultline
