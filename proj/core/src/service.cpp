#include "faultline/service.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <regex>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "faultline/error.hpp"
#include "faultline/random.hpp"
#include "faultline/trust.hpp"

namespace faultline {

using nlohmann::json;
namespace fs = std::filesystem;

ServiceOptions ServiceOptions::from_config(const PipelineConfig& config) {
  ServiceOptions o;
  o.sessions_dir = config.sessions;
  o.policy_path = config.policy;
  o.training = config.training;
  o.hidden = config.hidden;
  o.layers = config.layers;
  o.images_per_session = config.service.images_per_session;
  o.quiz_options = config.service.quiz_options;
  o.seed = config.seed;
  return o;
}

namespace {

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kMalformedHeader: return 400;
    case ErrorCode::kShape:
    case ErrorCode::kUnknownClass:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kUnknownLabel:
    case ErrorCode::kDialogExhausted:
    case ErrorCode::kEmptySet: return 422;
    default: return 500;
  }
}

ApiResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, json{{"code", code}, {"message", message}}.dump()};
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string describe_change(std::vector<std::string> add, std::vector<std::string> remove) {
  std::sort(add.begin(), add.end());
  std::sort(remove.begin(), remove.end());
  if (add.empty() && remove.empty()) return "no change flips the decision";
  auto join = [](const std::vector<std::string>& xs) {
    std::string out;
    for (const auto& x : xs) out += (out.empty() ? "" : ", ") + x;
    return out;
  };
  std::string s;
  if (!add.empty()) s += "add {" + join(add) + "}";
  if (!remove.empty()) s += std::string(s.empty() ? "" : "; ") + "remove {" + join(remove) + "}";
  return s;
}

constexpr const char* kTestPrefix = "test-";

}  // namespace

struct DialogService::Impl {
  struct Quiz {
    std::string quiz_id;
    std::string image_id;
    std::string c_alt;
    std::string prompt;
    std::vector<std::string> options;
    std::size_t correct_index = 0;
    std::optional<std::size_t> answer;
  };

  struct ImageDialog {
    policy::DialogState state;
    std::uint64_t episode = 0;
    bool finished = false;
    std::map<std::string, std::vector<Vector>> pending;  // quiz id -> state sequence at selection
  };

  struct Session {
    std::string id;
    std::string created_at;
    std::vector<std::string> images;
    std::map<std::string, ImageDialog> dialogs;
    std::map<std::string, Quiz> quizzes;
    json quiz_log = json::array();
    std::map<std::string, bool> test_answers;   // image -> user predicts success
    std::map<std::string, bool> model_correct;  // image -> model correct
    std::map<std::string, ApiResponse> responses;  // idempotency key -> response
    std::size_t quiz_counter = 0;
    mutable std::mutex mu;
  };

  struct Route {
    std::string method;
    std::regex pattern;
    std::function<ApiResponse(const std::smatch&, const std::string&)> handler;
    bool idempotent_post = false;
    std::string raw;
  };

  std::shared_ptr<const Explainer> explainer;
  ServiceOptions options;

  mutable std::shared_mutex sessions_mu;
  std::map<std::string, std::unique_ptr<Session>> sessions;
  std::mutex global_keys_mu;
  std::map<std::string, ApiResponse> global_responses;

  std::mutex cache_mu;
  std::map<std::string, FaultLine> cache;

  mutable std::shared_mutex policy_mu;
  policy::PolicyModel model;
  policy::Optimizer optimizer;
  std::uint64_t sequence = 0;
  std::size_t updates = 0;

  std::mutex buffer_mu;
  policy::ReplayBuffer buffer;
  std::size_t interactions = 0;
  Rng update_rng;

  std::atomic<std::uint64_t> event_seq{0};
  std::atomic<std::uint64_t> episode_counter{0};
  std::atomic<std::uint64_t> id_counter{0};

  std::vector<Route> routes;
  httplib::Server server;
  std::thread server_thread;

  Impl(std::shared_ptr<const Explainer> e, ServiceOptions o)
      : explainer(std::move(e)), options(std::move(o)), buffer(options.training.buffer_capacity),
        update_rng(options.seed ^ 0x5DEECE66DULL) {
    if (!explainer) throw Error(ErrorCode::kInvalidArgument, "service needs an explainer");
    if (options.training.update_every == 0) throw Error(ErrorCode::kInvalidArgument, "update_every must be >= 1");
    fs::create_directories(options.sessions_dir);
    load_policy();
    recover();
    build_routes();
  }

  std::size_t num_classes() const { return explainer->classes().size(); }

  std::size_t class_index(const std::string& label) const {
    return explainer->artifacts().backend->class_index(label);
  }

  // ---- policy ----------------------------------------------------------

  void load_policy() {
    if (fs::exists(options.policy_path)) {
      policy::CheckpointInfo info;
      model = policy::load_checkpoint(options.policy_path, &info);
      if (model.shape().num_classes != num_classes()) {
        throw Error(ErrorCode::kShape, "policy checkpoint class count does not match the model");
      }
      sequence = info.sequence;
    } else {
      model = policy::PolicyModel(num_classes(), options.seed, options.hidden, options.layers);
      policy::save_checkpoint(model, {0, 0.0, 0}, options.policy_path);
    }
    optimizer = policy::Optimizer(model.parameter_count());
  }

  void record_interaction(policy::Transition t) {
    std::lock_guard lock(buffer_mu);
    buffer.push(std::move(t));
    ++interactions;
    if (interactions % options.training.update_every != 0) return;
    std::unique_lock plock(policy_mu);
    const std::size_t batch = std::min(options.training.learning.batch, buffer.size());
    policy::update_policy(model, optimizer, buffer, batch, options.training.learning, update_rng);
    ++updates;
    ++sequence;
    policy::save_checkpoint(model, {0, 0.0, sequence}, options.policy_path);
  }

  // ---- journal -----------------------------------------------------------

  fs::path journal_path(const std::string& id) const { return options.sessions_dir / (id + ".jsonl"); }

  void append(const Session& s, const json& event) {
    std::ofstream out(journal_path(s.id), std::ios::app | std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write journal for session " + s.id);
    out << event.dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::kIo, "journal write failed for session " + s.id);
  }

  static policy::Transition transition_from(const json& t) {
    policy::Transition tr;
    tr.state = t.at("state").get<std::vector<Vector>>();
    tr.action = t.at("action").get<std::size_t>();
    tr.reward = t.at("reward").get<double>();
    tr.next_state = t.at("next_state").get<std::vector<Vector>>();
    tr.terminal = t.at("terminal").get<bool>();
    tr.episode = t.at("episode").get<std::uint64_t>();
    tr.step = t.at("step").get<std::size_t>();
    return tr;
  }

  static json transition_json(const policy::Transition& t) {
    return {{"state", t.state},       {"action", t.action},     {"reward", t.reward}, {"next_state", t.next_state},
            {"terminal", t.terminal}, {"episode", t.episode}, {"step", t.step}};
  }

  // The single place where session state changes, shared by live calls and replay.
  void apply(Session& s, const json& ev) {
    const auto type = ev.at("type").get<std::string>();
    if (type == "create") {
      s.id = ev.at("session_id").get<std::string>();
      s.created_at = ev.at("created_at").get<std::string>();
      s.images = ev.at("images").get<std::vector<std::string>>();
    } else if (type == "faultline") {
      const auto image = ev.at("image_id").get<std::string>();
      auto it = s.dialogs.find(image);
      if (it == s.dialogs.end()) {
        ImageDialog d;
        d.state = policy::DialogState::fresh(s.id, image, num_classes(), ev.at("c_pred_index").get<std::size_t>());
        d.episode = ev.at("episode").get<std::uint64_t>();
        it = s.dialogs.emplace(image, std::move(d)).first;
      }
      const auto& q = ev.at("quiz");
      Quiz quiz{q.at("quiz_id").get<std::string>(), image, ev.at("c_alt").get<std::string>(),
                q.at("prompt").get<std::string>(), q.at("options").get<std::vector<std::string>>(),
                q.at("correct_index").get<std::size_t>(), std::nullopt};
      it->second.state.exposure[ev.at("c_alt_index").get<std::size_t>()] = true;
      it->second.pending[quiz.quiz_id] = ev.at("state").get<std::vector<Vector>>();
      s.quizzes[quiz.quiz_id] = std::move(quiz);
      ++s.quiz_counter;
    } else if (type == "quiz") {
      auto& quiz = s.quizzes.at(ev.at("quiz_id").get<std::string>());
      quiz.answer = ev.at("answer").get<std::size_t>();
      auto& d = s.dialogs.at(quiz.image_id);
      const bool correct = ev.at("correct").get<bool>();
      d.state.record(class_index(quiz.c_alt), correct);
      d.pending.erase(quiz.quiz_id);
      if (ev.at("transition").at("terminal").get<bool>()) d.finished = true;
      s.quiz_log.push_back({{"quiz_id", quiz.quiz_id},
                            {"answer", *quiz.answer},
                            {"correct", correct},
                            {"reward", ev.at("transition").at("reward")}});
    } else if (type == "test") {
      const auto image = ev.at("image_id").get<std::string>();
      s.test_answers[image] = ev.at("predicts_success").get<bool>();
      s.model_correct[image] = ev.at("model_correct").get<bool>();
      s.quiz_log.push_back({{"quiz_id", ev.at("quiz_id")}, {"answer", ev.at("answer")}, {"correct", ev.at("correct")}});
    } else if (type == "response") {
      ApiResponse r{ev.at("status").get<int>(), ev.at("body").get<std::string>()};
      const auto key = ev.at("key").get<std::string>();
      if (ev.value("scope", std::string("session")) == "global") {
        std::lock_guard lock(global_keys_mu);
        global_responses[key] = r;
      } else {
        s.responses[key] = r;
      }
    } else {
      throw Error(ErrorCode::kMalformedHeader, "unknown journal event '" + type + "'");
    }
  }

  void commit(Session& s, const json& ev) {
    append(s, ev);
    apply(s, ev);
  }

  void recover() {
    std::vector<std::pair<std::uint64_t, policy::Transition>> transitions;
    std::uint64_t max_seq = 0;
    std::uint64_t max_episode = 0;
    for (const auto& entry : fs::directory_iterator(options.sessions_dir)) {
      if (entry.path().extension() != ".jsonl") continue;
      auto session = std::make_unique<Session>();
      std::ifstream in(entry.path(), std::ios::binary);
      std::string line;
      std::vector<std::string> lines;
      while (std::getline(in, line)) lines.push_back(line);
      for (std::size_t i = 0; i < lines.size(); ++i) {
        json ev;
        try {
          ev = json::parse(lines[i]);
        } catch (const json::exception&) {
          // A torn final line from an interrupted write is dropped.
          if (i + 1 == lines.size()) break;
          throw Error(ErrorCode::kMalformedHeader, "corrupt journal " + entry.path().string());
        }
        apply(*session, ev);
        if (ev.contains("seq")) max_seq = std::max(max_seq, ev.at("seq").get<std::uint64_t>());
        if (ev.contains("episode")) max_episode = std::max(max_episode, ev.at("episode").get<std::uint64_t>());
        if (ev.at("type") == "quiz") {
          transitions.emplace_back(ev.at("seq").get<std::uint64_t>(), transition_from(ev.at("transition")));
        }
      }
      if (session->id.empty()) continue;
      const std::string id = session->id;
      sessions.emplace(id, std::move(session));
    }
    std::sort(transitions.begin(), transitions.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [seq, t] : transitions) {
      buffer.push(std::move(t));
      ++interactions;
    }
    event_seq = max_seq;
    episode_counter = max_episode;
    updates = interactions / options.training.update_every;
  }

  // ---- lookup ------------------------------------------------------------

  Session& session(const std::string& id) {
    std::shared_lock lock(sessions_mu);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw Error(ErrorCode::kNotFound, "unknown session '" + id + "'");
    return *it->second;
  }

  const LabeledItem& image(const std::string& id) const {
    if (!explainer->artifacts().dataset.contains(id)) throw Error(ErrorCode::kNotFound, "unknown image '" + id + "'");
    return explainer->artifacts().dataset.find(id);
  }

  // ---- operations ----------------------------------------------------------

  std::string new_session_id() {
    static thread_local std::mt19937_64 gen(std::random_device{}() ^
                                            static_cast<std::uint64_t>(std::hash<std::thread::id>{}(std::this_thread::get_id())));
    char buf[40];
    std::snprintf(buf, sizeof buf, "s%016llx%04llx", static_cast<unsigned long long>(gen()),
                  static_cast<unsigned long long>(++id_counter & 0xffff));
    return buf;
  }

  ApiResponse create_session(const std::string& key) {
    if (!key.empty()) {
      std::lock_guard lock(global_keys_mu);
      if (auto it = global_responses.find(key); it != global_responses.end()) return it->second;
    }
    auto s = std::make_unique<Session>();
    std::string id;
    {
      std::shared_lock lock(sessions_mu);
      do {
        id = new_session_id();
      } while (sessions.count(id) != 0);
    }
    // Uniform draw without replacement, seeded by the session id.
    std::vector<std::string> ids;
    for (const auto& item : explainer->artifacts().dataset.items()) ids.push_back(item.image_id);
    Rng rng(fnv1a(id) ^ options.seed);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.index(i)]);
    ids.resize(std::min(ids.size(), options.images_per_session));

    const json ev = {{"type", "create"}, {"session_id", id}, {"created_at", now_iso()}, {"images", ids}};
    s->id = id;
    std::lock_guard slock(s->mu);
    commit(*s, ev);
    ApiResponse r{201, json{{"session_id", id}, {"created_at", s->created_at}, {"images", s->images}}.dump()};
    if (!key.empty()) {
      std::lock_guard lock(global_keys_mu);
      if (auto it = global_responses.find(key); it != global_responses.end()) return it->second;
      append(*s, {{"type", "response"}, {"scope", "global"}, {"key", key}, {"status", r.status}, {"body", r.body}});
      global_responses[key] = r;
    }
    std::unique_lock lock(sessions_mu);
    sessions.emplace(id, std::move(s));
    return r;
  }

  ApiResponse list_images() const {
    json out = json::array();
    for (const auto& item : explainer->artifacts().dataset.items()) {
      out.push_back({{"image_id", item.image_id},
                     {"true_class", item.true_class},
                     {"predicted_class", explainer->predicted_label(item.image_id)}});
    }
    return {200, json{{"images", out}}.dump()};
  }

  policy::DialogState current_state(const Session& s, const std::string& image_id) const {
    if (auto it = s.dialogs.find(image_id); it != s.dialogs.end()) return it->second.state;
    return policy::DialogState::fresh(s.id, image_id, num_classes(), class_index(explainer->predicted_label(image_id)));
  }

  std::vector<std::string> ranked_alts(const policy::DialogState& state) const {
    std::shared_lock lock(policy_mu);
    std::vector<std::string> out;
    for (auto c : policy::rank_actions(model, state)) out.push_back(explainer->classes()[c]);
    return out;
  }

  ApiResponse list_alts(const std::string& sid, const std::string& image_id) {
    Session& s = session(sid);
    image(image_id);
    policy::DialogState state;
    {
      std::lock_guard lock(s.mu);
      state = current_state(s, image_id);
    }
    const json out = {{"image_id", image_id},
                      {"c_pred", explainer->classes()[state.c_pred]},
                      {"alts", ranked_alts(state)}};
    return {200, out.dump()};
  }

  FaultLine cached_faultline(const std::string& image_id, const std::string& c_alt, bool* from_cache) {
    const std::string key = image_id + "\x1f" + c_alt + "\x1f" + explainer->hyperparams().digest();
    {
      std::lock_guard lock(cache_mu);
      if (auto it = cache.find(key); it != cache.end()) {
        *from_cache = true;
        return it->second;
      }
    }
    *from_cache = false;
    FaultLine line = explainer->explain(image_id, c_alt);
    std::lock_guard lock(cache_mu);
    return cache.emplace(key, std::move(line)).first->second;
  }

  Quiz make_quiz(const Session& s, const FaultLine& line) const {
    Quiz q;
    q.quiz_id = "q" + std::to_string(s.quiz_counter + 1);
    q.image_id = line.image_id;
    q.c_alt = line.c_alt;
    q.prompt = "Which change to image " + line.image_id + " makes the model predict " + line.c_alt +
               " instead of " + line.c_pred + "?";
    const std::string correct = describe_change(line.pft, line.nft);

    std::set<std::string> shown(line.pft.begin(), line.pft.end());
    shown.insert(line.nft.begin(), line.nft.end());
    std::vector<std::string> add_pool, remove_pool;
    for (const auto& c : explainer->sigma(line.c_alt)) {
      if (!shown.count(c.concept_id)) add_pool.push_back(c.concept_id);
    }
    for (const auto& c : explainer->sigma(line.c_pred)) {
      if (!shown.count(c.concept_id)) remove_pool.push_back(c.concept_id);
    }

    const std::size_t wanted = std::clamp<std::size_t>(options.quiz_options, 2, 5);
    std::vector<std::string> options_text{correct};
    Rng rng(fnv1a(s.id + "/" + q.quiz_id) ^ options.seed);
    auto draw = [&](std::vector<std::string> pool, std::size_t n) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < n && !pool.empty(); ++i) {
        const std::size_t j = rng.index(pool.size());
        out.push_back(pool[j]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
      }
      return out;
    };
    const std::size_t n_add = std::max<std::size_t>(line.pft.size(), line.pft.empty() && line.nft.empty() ? 1 : 0);
    for (int attempt = 0; attempt < 40 && options_text.size() < wanted; ++attempt) {
      const auto add = draw(add_pool, n_add);
      const auto remove = draw(remove_pool, line.nft.size());
      if (std::find_first_of(add.begin(), add.end(), remove.begin(), remove.end()) != add.end()) continue;
      const auto text = describe_change(add, remove);
      if (std::find(options_text.begin(), options_text.end(), text) == options_text.end()) options_text.push_back(text);
    }
    for (const char* fallback : {"no change flips the decision", "remove every concept of the predicted class"}) {
      if (options_text.size() >= 2) break;
      if (std::find(options_text.begin(), options_text.end(), fallback) == options_text.end()) {
        options_text.push_back(fallback);
      }
    }
    for (std::size_t i = options_text.size(); i > 1; --i) std::swap(options_text[i - 1], options_text[rng.index(i)]);
    q.correct_index = static_cast<std::size_t>(std::find(options_text.begin(), options_text.end(), correct) - options_text.begin());
    q.options = std::move(options_text);
    return q;
  }

  ApiResponse get_faultline(const std::string& sid, const std::string& body) {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kMalformedHeader, std::string("bad request body: ") + e.what());
    }
    if (!req.contains("image_id") || !req.contains("c_alt")) {
      throw Error(ErrorCode::kInvalidArgument, "body needs image_id and c_alt");
    }
    const auto image_id = req.at("image_id").get<std::string>();
    const auto c_alt = req.at("c_alt").get<std::string>();
    Session& s = session(sid);
    image(image_id);
    const std::size_t alt = class_index(c_alt);

    std::lock_guard lock(s.mu);
    const policy::DialogState state = current_state(s, image_id);
    if (alt == state.c_pred) throw Error(ErrorCode::kInvalidArgument, "c_alt must differ from the predicted class");
    if (auto it = s.dialogs.find(image_id); it != s.dialogs.end() && it->second.finished) {
      throw Error(ErrorCode::kConflict, "the dialog for image '" + image_id + "' has finished");
    }
    if (state.exposure[alt]) throw Error(ErrorCode::kConflict, "class '" + c_alt + "' was already shown for this image");

    bool from_cache = false;
    const FaultLine line = cached_faultline(image_id, c_alt, &from_cache);
    const double margin = explainer->verify_margin(line);
    const bool verified = std::abs(margin - line.margin) <= 1e-9 * std::max(1.0, std::abs(margin));

    const Quiz quiz = make_quiz(s, line);
    const auto dialog = s.dialogs.find(image_id);
    const std::uint64_t episode = dialog != s.dialogs.end() ? dialog->second.episode : ++episode_counter;
    const json ev = {{"type", "faultline"},
                     {"seq", ++event_seq},
                     {"image_id", image_id},
                     {"c_pred_index", state.c_pred},
                     {"c_alt", c_alt},
                     {"c_alt_index", alt},
                     {"episode", episode},
                     {"state", policy::encode_sequence(state)},
                     {"quiz",
                      {{"quiz_id", quiz.quiz_id},
                       {"prompt", quiz.prompt},
                       {"options", quiz.options},
                       {"correct_index", quiz.correct_index}}}};
    commit(s, ev);

    json out = json::parse(explainer->bundle_json(line, -1));
    out["cached"] = from_cache;
    out["margin_verified"] = verified;
    out["quiz"] = {{"quiz_id", quiz.quiz_id}, {"prompt", quiz.prompt}, {"options", quiz.options}};
    return {200, out.dump()};
  }

  ApiResponse submit_quiz(const std::string& sid, const std::string& quiz_id, const std::string& body) {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kMalformedHeader, std::string("bad request body: ") + e.what());
    }
    if (!req.contains("answer") || !req.at("answer").is_number_unsigned()) {
      throw Error(ErrorCode::kInvalidArgument, "body needs a non-negative integer answer");
    }
    const std::size_t answer = req.at("answer").get<std::size_t>();
    Session& s = session(sid);

    if (quiz_id.rfind(kTestPrefix, 0) == 0) {
      const std::string image_id = quiz_id.substr(std::string(kTestPrefix).size());
      const auto& item = image(image_id);
      if (answer > 1) throw Error(ErrorCode::kInvalidArgument, "test answers are 0 (model succeeds) or 1 (model fails)");
      const bool model_correct = explainer->predicted_label(image_id) == item.true_class;
      const bool predicts_success = answer == 0;
      std::lock_guard lock(s.mu);
      if (s.test_answers.count(image_id)) throw Error(ErrorCode::kConflict, "quiz '" + quiz_id + "' was already answered");
      const bool correct = predicts_success == model_correct;
      commit(s, {{"type", "test"},
                 {"seq", ++event_seq},
                 {"quiz_id", quiz_id},
                 {"image_id", image_id},
                 {"answer", answer},
                 {"predicts_success", predicts_success},
                 {"model_correct", model_correct},
                 {"correct", correct}});
      return {200, json{{"correct", correct}, {"reward", nullptr}, {"next_prompt", nullptr}}.dump()};
    }

    policy::Transition t;
    policy::DialogState next;
    bool correct = false;
    {
      std::lock_guard lock(s.mu);
      auto it = s.quizzes.find(quiz_id);
      if (it == s.quizzes.end()) throw Error(ErrorCode::kNotFound, "unknown quiz '" + quiz_id + "'");
      const Quiz& quiz = it->second;
      if (quiz.answer) throw Error(ErrorCode::kConflict, "quiz '" + quiz_id + "' was already answered");
      if (answer >= quiz.options.size()) throw Error(ErrorCode::kInvalidArgument, "answer index out of range");
      const ImageDialog& d = s.dialogs.at(quiz.image_id);
      correct = answer == quiz.correct_index;
      const std::size_t turn = d.state.turn_count + 1;
      next = d.state;
      next.record(class_index(quiz.c_alt), correct);

      t.state = d.pending.at(quiz_id);
      t.action = class_index(quiz.c_alt);
      t.reward = policy::reward(correct, turn, options.training.reward);
      t.next_state = policy::encode_sequence(next);
      t.terminal = correct || turn >= options.training.max_turns || !next.has_valid_action();
      t.episode = d.episode;
      t.step = turn - 1;
      commit(s, {{"type", "quiz"},
                 {"seq", ++event_seq},
                 {"quiz_id", quiz_id},
                 {"answer", answer},
                 {"correct", correct},
                 {"transition", transition_json(t)}});
    }
    const double reward = t.reward;
    const bool terminal = t.terminal;
    record_interaction(std::move(t));

    json out = {{"correct", correct}, {"reward", reward}};
    if (terminal) {
      out["next_prompt"] = nullptr;
    } else {
      out["next_prompt"] = {{"image_id", next.current_image_id},
                            {"message", "Pick another class to compare against."},
                            {"alts", ranked_alts(next)}};
    }
    return {200, out.dump()};
  }

  ApiResponse trust(const std::string& sid) {
    Session& s = session(sid);
    std::map<std::string, bool> answers, truth;
    {
      std::lock_guard lock(s.mu);
      answers = s.test_answers;
      truth = s.model_correct;
    }
    return {200, trust::trust_report_to_json(trust_from_test_answers(answers, truth), -1)};
  }

  std::string state_json(const std::string& sid) {
    Session& s = session(sid);
    std::lock_guard lock(s.mu);
    json dialogs = json::object();
    for (const auto& [image, d] : s.dialogs) {
      json history = json::array();
      for (const auto& t : d.state.history) history.push_back({{"c_alt", t.c_alt}, {"quiz_correct", t.quiz_correct}});
      json pending = json::object();
      for (const auto& [qid, seq] : d.pending) pending[qid] = seq;
      dialogs[image] = {{"session_id", d.state.session_id},
                        {"current_image_id", d.state.current_image_id},
                        {"c_pred", d.state.c_pred},
                        {"exposure", d.state.exposure},
                        {"history", history},
                        {"turn_count", d.state.turn_count},
                        {"episode", d.episode},
                        {"finished", d.finished},
                        {"pending", pending}};
    }
    json quizzes = json::object();
    for (const auto& [qid, q] : s.quizzes) {
      quizzes[qid] = {{"image_id", q.image_id},           {"c_alt", q.c_alt},
                      {"prompt", q.prompt},               {"options", q.options},
                      {"correct_index", q.correct_index}, {"answer", q.answer ? json(*q.answer) : json(nullptr)}};
    }
    json tests = json::object();
    for (const auto& [image, predicted] : s.test_answers) {
      tests[image] = {{"predicts_success", predicted}, {"model_correct", s.model_correct.at(image)}};
    }
    const json out = {{"session_id", s.id}, {"created_at", s.created_at}, {"images", s.images},
                      {"dialogs", dialogs}, {"quizzes", quizzes},       {"quiz_log", s.quiz_log},
                      {"test_answers", tests}};
    return out.dump();
  }

  // ---- routing -------------------------------------------------------------

  void build_routes() {
    const std::string id = "([A-Za-z0-9_.-]+)";
    routes.push_back({"POST", std::regex("/sessions"), nullptr, true, "/sessions"});
    routes.push_back({"GET", std::regex("/images"),
                      [this](const std::smatch&, const std::string&) { return list_images(); }, false, "/images"});
    routes.push_back({"GET", std::regex("/healthz"),
                      [](const std::smatch&, const std::string&) { return ApiResponse{200, R"({"status":"ok"})"}; },
                      false, "/healthz"});
    routes.push_back({"GET", std::regex("/sessions/" + id),
                      [this](const std::smatch& m, const std::string&) { return ApiResponse{200, state_json(m[1])}; },
                      false, "/sessions/" + id});
    routes.push_back({"GET", std::regex("/sessions/" + id + "/images/" + id + "/alts"),
                      [this](const std::smatch& m, const std::string&) { return list_alts(m[1], m[2]); }, false,
                      "/sessions/" + id + "/images/" + id + "/alts"});
    routes.push_back({"POST", std::regex("/sessions/" + id + "/faultline"),
                      [this](const std::smatch& m, const std::string& b) { return get_faultline(m[1], b); }, true,
                      "/sessions/" + id + "/faultline"});
    routes.push_back({"POST", std::regex("/sessions/" + id + "/quiz/" + id),
                      [this](const std::smatch& m, const std::string& b) { return submit_quiz(m[1], m[2], b); }, true,
                      "/sessions/" + id + "/quiz/" + id});
    routes.push_back({"GET", std::regex("/sessions/" + id + "/trust"),
                      [this](const std::smatch& m, const std::string&) { return trust(m[1]); }, false,
                      "/sessions/" + id + "/trust"});
  }

  ApiResponse dispatch(const std::string& method, const std::string& path, const std::string& body,
                       const std::string& key) {
    try {
      for (const auto& r : routes) {
        std::smatch m;
        if (r.method != method || !std::regex_match(path, m, r.pattern)) continue;
        if (!r.handler) return create_session(key);
        if (r.idempotent_post && !key.empty()) return idempotent(m[1], key, [&] { return r.handler(m, body); });
        return r.handler(m, body);
      }
      return error_response(404, "not_found", "no route for " + method + " " + path);
    } catch (const Error& e) {
      return error_response(http_status(e.code()), error_code_name(e.code()), e.what());
    } catch (const json::exception& e) {
      return error_response(400, "malformed_request", e.what());
    } catch (const std::exception& e) {
      return error_response(500, "internal", e.what());
    }
  }

  ApiResponse idempotent(const std::string& sid, const std::string& key, const std::function<ApiResponse()>& run) {
    Session& s = session(sid);
    {
      std::lock_guard lock(s.mu);
      if (auto it = s.responses.find(key); it != s.responses.end()) return it->second;
    }
    ApiResponse r = run();
    if (r.status < 300) {
      std::lock_guard lock(s.mu);
      if (auto it = s.responses.find(key); it != s.responses.end()) return it->second;
      commit(s, {{"type", "response"}, {"scope", "session"}, {"key", key}, {"status", r.status}, {"body", r.body}});
    }
    return r;
  }

  void install_http() {
    for (const auto& r : routes) {
      auto handler = [this, method = r.method](const httplib::Request& req, httplib::Response& res) {
        const auto out = dispatch(method, req.path, req.body, req.get_header_value("Idempotency-Key"));
        res.status = out.status;
        res.set_content(out.body, "application/json");
      };
      if (r.method == "GET") {
        server.Get(r.raw, handler);
      } else {
        server.Post(r.raw, handler);
      }
    }
  }
};

trust::TrustReport trust_from_test_answers(const std::map<std::string, bool>& predicts_success,
                                           const std::map<std::string, bool>& model_correct) {
  if (predicts_success.empty()) throw Error(ErrorCode::kEmptySet, "no test-phase answers");
  std::vector<trust::AnnotatedMind> games;
  for (const auto& [image_id, predicted] : predicts_success) {
    auto it = model_correct.find(image_id);
    if (it == model_correct.end()) throw Error(ErrorCode::kInvalidArgument, "no model outcome for '" + image_id + "'");
    auto graph = [&](bool positive) {
      trust::ParseGraph g;
      g.add_node({"image:" + image_id, trust::NodeKind::kObject, {}, trust::Process::kAlpha,
                  positive ? trust::Polarity::kPositive : trust::Polarity::kNegative});
      return g;
    };
    games.push_back({games.size(), graph(predicted), graph(it->second)});
  }
  auto report = trust::trust_report(games);
  report.jt_classification = trust::justified_trust_classification(model_correct, predicts_success);
  return report;
}

trust::TrustReport trust_report_from_journals(const std::vector<fs::path>& journals) {
  std::map<std::string, bool> predicts, truth;
  for (std::size_t j = 0; j < journals.size(); ++j) {
    std::ifstream in(journals[j], std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open journal '" + journals[j].string() + "'");
    std::string line;
    while (std::getline(in, line)) {
      json ev;
      try {
        ev = json::parse(line);
      } catch (const json::exception&) {
        continue;  // torn tail
      }
      if (ev.value("type", std::string()) != "test") continue;
      const std::string key = std::to_string(j) + "/" + ev.at("image_id").get<std::string>();
      predicts[key] = ev.at("predicts_success").get<bool>();
      truth[key] = ev.at("model_correct").get<bool>();
    }
  }
  return trust_from_test_answers(predicts, truth);
}

DialogService::DialogService(std::shared_ptr<const Explainer> explainer, ServiceOptions options)
    : impl_(std::make_unique<Impl>(std::move(explainer), std::move(options))) {}

DialogService::~DialogService() { stop(); }

ApiResponse DialogService::call(const std::string& method, const std::string& path, const std::string& body,
                                const std::string& idempotency_key) {
  return impl_->dispatch(method, path, body, idempotency_key);
}

std::string DialogService::session_state(const std::string& session_id) const {
  return impl_->state_json(session_id);
}

std::vector<std::string> DialogService::session_ids() const {
  std::shared_lock lock(impl_->sessions_mu);
  std::vector<std::string> out;
  for (const auto& [id, s] : impl_->sessions) out.push_back(id);
  return out;
}

std::uint64_t DialogService::checkpoint_sequence() const {
  std::shared_lock lock(impl_->policy_mu);
  return impl_->sequence;
}

std::size_t DialogService::interactions() const {
  std::lock_guard lock(impl_->buffer_mu);
  return impl_->interactions;
}

std::size_t DialogService::updates() const {
  std::shared_lock lock(impl_->policy_mu);
  return impl_->updates;
}

policy::PolicyModel DialogService::policy_snapshot() const {
  std::shared_lock lock(impl_->policy_mu);
  return impl_->model;
}

void DialogService::listen(const std::string& host, int port) {
  impl_->install_http();
  if (!impl_->server.listen(host, port)) {
    throw Error(ErrorCode::kIo, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

int DialogService::start_background(const std::string& host) {
  impl_->install_http();
  const int port = impl_->server.bind_to_any_port(host);
  if (port <= 0) throw Error(ErrorCode::kIo, "cannot bind " + host);
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void DialogService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

}  // namespace faultline
