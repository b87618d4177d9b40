#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "faultline/error.hpp"
#include "faultline/service.hpp"
#include "workspace.hpp"

namespace faultline {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

ServiceOptions options_in(const fs::path& dir) {
  ServiceOptions o = ServiceOptions::from_config(testing::shared_animal_config());
  o.sessions_dir = dir / "sessions";
  o.policy_path = dir / "policy.flxpol";
  o.hidden = 16;
  return o;
}

std::unique_ptr<DialogService> make_service(const fs::path& dir) {
  return std::make_unique<DialogService>(testing::shared_animal_explainer(), options_in(dir));
}

std::string new_session(DialogService& svc) {
  const auto r = svc.call("POST", "/sessions");
  EXPECT_EQ(r.status, 201) << r.body;
  return json::parse(r.body).at("session_id").get<std::string>();
}

json post_faultline(DialogService& svc, const std::string& sid, const std::string& image, const std::string& alt,
                    int expect = 200) {
  const auto r = svc.call("POST", "/sessions/" + sid + "/faultline",
                          json{{"image_id", image}, {"c_alt", alt}}.dump());
  EXPECT_EQ(r.status, expect) << r.body;
  return json::parse(r.body);
}

std::size_t correct_index(DialogService& svc, const std::string& sid, const std::string& quiz_id) {
  return json::parse(svc.session_state(sid)).at("quizzes").at(quiz_id).at("correct_index").get<std::size_t>();
}

json answer(DialogService& svc, const std::string& sid, const std::string& quiz_id, std::size_t a, int expect = 200) {
  const auto r = svc.call("POST", "/sessions/" + sid + "/quiz/" + quiz_id, json{{"answer", a}}.dump());
  EXPECT_EQ(r.status, expect) << r.body;
  return json::parse(r.body);
}

// Answers wrong on every turn until the dialog for `image` ends; returns interactions used.
std::size_t exhaust_image(DialogService& svc, const std::string& sid, const std::string& image,
                          std::size_t budget) {
  std::size_t used = 0;
  json alts = json::parse(svc.call("GET", "/sessions/" + sid + "/images/" + image + "/alts").body).at("alts");
  while (used < budget && !alts.empty()) {
    const auto fl = post_faultline(svc, sid, image, alts[0].get<std::string>());
    const auto qid = fl.at("quiz").at("quiz_id").get<std::string>();
    const std::size_t wrong = correct_index(svc, sid, qid) == 0 ? 1 : 0;
    const auto res = answer(svc, sid, qid, wrong);
    ++used;
    if (res.at("next_prompt").is_null()) break;
    alts = res.at("next_prompt").at("alts");
  }
  return used;
}

TEST(Sessions, CreationsGetDistinctIds) {
  const auto dir = testing::scratch_dir("svc-ids");
  auto svc = make_service(dir);
  const auto a = svc->call("POST", "/sessions");
  const auto b = svc->call("POST", "/sessions");
  ASSERT_EQ(a.status, 201);
  const auto ja = json::parse(a.body), jb = json::parse(b.body);
  EXPECT_NE(ja.at("session_id"), jb.at("session_id"));
  EXPECT_EQ(ja.at("images").size(), 8u);
  std::set<std::string> unique(ja.at("images").begin(), ja.at("images").end());
  EXPECT_EQ(unique.size(), 8u);
}

TEST(Sessions, HundredConcurrentCreationsAreDistinct) {
  const auto dir = testing::scratch_dir("svc-concurrent");
  auto svc = make_service(dir);
  std::vector<std::string> ids(100);
  std::vector<std::thread> threads;
  for (int t = 0; t < 10; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 10; ++i) ids[t * 10 + i] = json::parse(svc->call("POST", "/sessions").body).at("session_id");
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 100u);
  EXPECT_EQ(svc->session_ids().size(), 100u);
}

TEST(Sessions, ImagesAndAlternates) {
  const auto dir = testing::scratch_dir("svc-images");
  auto svc = make_service(dir);
  const auto images = json::parse(svc->call("GET", "/images").body).at("images");
  EXPECT_EQ(images.size(), 120u);
  const auto sid = new_session(*svc);
  const auto alts = json::parse(svc->call("GET", "/sessions/" + sid + "/images/goat-00/alts").body);
  EXPECT_EQ(alts.at("c_pred"), "Goat");
  EXPECT_EQ(alts.at("alts").size(), 5u);
  for (const auto& a : alts.at("alts")) EXPECT_NE(a, "Goat");
  EXPECT_EQ(svc->call("GET", "/sessions/nope/images/goat-00/alts").status, 404);
  EXPECT_EQ(svc->call("GET", "/sessions/" + sid + "/images/nope/alts").status, 404);
  EXPECT_EQ(svc->call("GET", "/nowhere").status, 404);
}

TEST(Faultline, RejectsBadRequests) {
  const auto dir = testing::scratch_dir("svc-bad");
  auto svc = make_service(dir);
  const auto sid = new_session(*svc);
  const auto same = post_faultline(*svc, sid, "goat-00", "Goat", 422);
  EXPECT_EQ(same.at("code"), "invalid_argument");
  post_faultline(*svc, "missing", "goat-00", "Sheep", 404);
  post_faultline(*svc, sid, "goat-99", "Sheep", 404);
  post_faultline(*svc, sid, "goat-00", "Unicorn", 422);
  EXPECT_EQ(svc->call("POST", "/sessions/" + sid + "/faultline", "{not json").status, 400);
  EXPECT_EQ(svc->call("POST", "/sessions/" + sid + "/faultline", "{}").status, 422);
}

TEST(Faultline, BundleQuizAndCache) {
  const auto dir = testing::scratch_dir("svc-cache");
  auto svc = make_service(dir);
  const auto s1 = new_session(*svc), s2 = new_session(*svc);
  const auto first = post_faultline(*svc, s1, "goat-00", "Sheep");
  EXPECT_FALSE(first.at("cached").get<bool>());
  EXPECT_TRUE(first.at("margin_verified").get<bool>());
  EXPECT_TRUE(first.at("flipped").get<bool>());
  EXPECT_EQ(first.at("pft"), json::array({"wool"}));
  EXPECT_EQ(first.at("quiz").at("quiz_id"), "q1");
  EXPECT_GE(first.at("quiz").at("options").size(), 2u);
  const auto second = post_faultline(*svc, s2, "goat-00", "Sheep");
  EXPECT_TRUE(second.at("cached").get<bool>());
  EXPECT_EQ(second.at("margin"), first.at("margin"));
  // Showing the same alternate again for the same image conflicts.
  post_faultline(*svc, s1, "goat-00", "Sheep", 409);
}

std::set<std::string> braced(const std::string& text, const std::string& verb) {
  std::set<std::string> out;
  const auto at = text.find(verb + " {");
  if (at == std::string::npos) return out;
  const auto open = at + verb.size() + 2, close = text.find('}', open);
  std::string item;
  for (char ch : text.substr(open, close - open) + ",") {
    if (ch == ',') {
      out.insert(item);
      item.clear();
    } else if (ch != ' ') {
      item += ch;
    }
  }
  return out;
}

TEST(Faultline, QuizOptionsNeverAddAndRemoveTheSameConcept) {
  const auto dir = testing::scratch_dir("svc-options");
  auto svc = make_service(dir);
  const auto sid = new_session(*svc);
  const std::vector<std::pair<std::string, std::string>> asks = {
      {"goat-00", "Sheep"}, {"goat-00", "Dog"}, {"dog-00", "Thylacine"}, {"toad-00", "Frog"},
      {"sheep-00", "Goat"}, {"frog-00", "Toad"}, {"thylacine-00", "Dog"}};
  for (const auto& [image, alt] : asks) {
    const auto fl = post_faultline(*svc, sid, image, alt);
    const auto options = fl.at("quiz").at("options");
    std::set<std::string> texts;
    for (const auto& o : options) {
      const auto text = o.get<std::string>();
      texts.insert(text);
      for (const auto& c : braced(text, "add")) EXPECT_EQ(braced(text, "remove").count(c), 0u) << text;
    }
    EXPECT_EQ(texts.size(), options.size());
    const auto qid = fl.at("quiz").at("quiz_id").get<std::string>();
    const auto q = json::parse(svc->session_state(sid)).at("quizzes").at(qid);
    EXPECT_LT(q.at("correct_index").get<std::size_t>(), q.at("options").size());
  }
}

TEST(Idempotency, RepeatedKeyReplaysTheResponse) {
  const auto dir = testing::scratch_dir("svc-idem");
  auto svc = make_service(dir);
  const auto c1 = svc->call("POST", "/sessions", "", "create-1");
  const auto c2 = svc->call("POST", "/sessions", "", "create-1");
  EXPECT_EQ(c1.body, c2.body);
  EXPECT_EQ(svc->session_ids().size(), 1u);

  const auto sid = json::parse(c1.body).at("session_id").get<std::string>();
  const std::string body = json{{"image_id", "dog-00"}, {"c_alt", "Thylacine"}}.dump();
  const auto f1 = svc->call("POST", "/sessions/" + sid + "/faultline", body, "fl-1");
  const std::string state = svc->session_state(sid);
  const auto f2 = svc->call("POST", "/sessions/" + sid + "/faultline", body, "fl-1");
  EXPECT_EQ(f1.status, 200);
  EXPECT_EQ(f1.body, f2.body);
  EXPECT_EQ(svc->session_state(sid), state);

  const std::string ans = json{{"answer", correct_index(*svc, sid, "q1")}}.dump();
  const auto a1 = svc->call("POST", "/sessions/" + sid + "/quiz/q1", ans, "ans-1");
  const auto a2 = svc->call("POST", "/sessions/" + sid + "/quiz/q1", ans, "ans-1");
  EXPECT_EQ(a1.body, a2.body);
  EXPECT_EQ(svc->interactions(), 1u);
  EXPECT_EQ(svc->call("POST", "/sessions/" + sid + "/quiz/q1", ans).status, 409);
}

TEST(Quiz, RewardsAndTermination) {
  const auto dir = testing::scratch_dir("svc-quiz");
  auto svc = make_service(dir);
  const auto sid = new_session(*svc);

  auto fl = post_faultline(*svc, sid, "goat-00", "Sheep");
  const auto right = answer(*svc, sid, "q1", correct_index(*svc, sid, "q1"));
  EXPECT_TRUE(right.at("correct").get<bool>());
  EXPECT_DOUBLE_EQ(right.at("reward").get<double>(), 0.95);
  EXPECT_TRUE(right.at("next_prompt").is_null());
  answer(*svc, sid, "q1", 0, 409);
  post_faultline(*svc, sid, "goat-00", "Dog", 409);

  fl = post_faultline(*svc, sid, "dog-00", "Thylacine");
  const auto qid = fl.at("quiz").at("quiz_id").get<std::string>();
  EXPECT_EQ(qid, "q2");
  const std::size_t wrong = correct_index(*svc, sid, qid) == 0 ? 1 : 0;
  const auto miss = answer(*svc, sid, qid, wrong);
  EXPECT_FALSE(miss.at("correct").get<bool>());
  EXPECT_DOUBLE_EQ(miss.at("reward").get<double>(), -1.05);
  ASSERT_TRUE(miss.at("next_prompt").is_object());
  EXPECT_EQ(miss.at("next_prompt").at("image_id"), "dog-00");
  const auto alts = miss.at("next_prompt").at("alts");
  EXPECT_EQ(alts.size(), 4u);
  for (const auto& a : alts) EXPECT_TRUE(a != "Dog" && a != "Thylacine");

  fl = post_faultline(*svc, sid, "dog-00", alts[0].get<std::string>());
  const auto q3 = fl.at("quiz").at("quiz_id").get<std::string>();
  const auto second = answer(*svc, sid, q3, correct_index(*svc, sid, q3));
  EXPECT_DOUBLE_EQ(second.at("reward").get<double>(), 1.0 - 0.05 * 2);

  answer(*svc, sid, "q9", 0, 404);
  answer(*svc, sid, "q1", 99, 409);
}

TEST(Quiz, FifteenthInteractionAdvancesCheckpoint) {
  const auto dir = testing::scratch_dir("svc-cadence");
  auto svc = make_service(dir);
  EXPECT_EQ(svc->checkpoint_sequence(), 0u);
  std::size_t done = 0;
  while (done < 14) {
    const auto sid = new_session(*svc);
    const auto images = json::parse(svc->session_state(sid)).at("images");
    for (const auto& img : images) {
      if (done >= 14) break;
      done += exhaust_image(*svc, sid, img.get<std::string>(), 14 - done);
    }
  }
  EXPECT_EQ(svc->interactions(), 14u);
  EXPECT_EQ(svc->checkpoint_sequence(), 0u);
  const auto sid = new_session(*svc);
  exhaust_image(*svc, sid, json::parse(svc->session_state(sid)).at("images")[0].get<std::string>(), 1);
  EXPECT_EQ(svc->interactions(), 15u);
  EXPECT_EQ(svc->updates(), 1u);
  EXPECT_EQ(svc->checkpoint_sequence(), 1u);
  policy::CheckpointInfo info;
  policy::load_checkpoint(dir / "policy.flxpol", &info);
  EXPECT_EQ(info.sequence, 1u);
}

TEST(Trust, EmptyThenTestAnswers) {
  const auto dir = testing::scratch_dir("svc-trust");
  auto svc = make_service(dir);
  const auto sid = new_session(*svc);
  EXPECT_EQ(svc->call("GET", "/sessions/" + sid + "/trust").status, 422);
  EXPECT_EQ(svc->call("GET", "/sessions/nope/trust").status, 404);

  const auto images = json::parse(svc->call("GET", "/images").body).at("images");
  int answered = 0;
  const auto first = images[0].at("image_id").get<std::string>();
  for (const auto& img : images) {
    if (answered == 4) break;
    const auto id = img.at("image_id").get<std::string>();
    const bool model_correct = img.at("true_class") == img.at("predicted_class");
    const auto r = answer(*svc, sid, "test-" + id, model_correct ? 0 : 1);
    EXPECT_TRUE(r.at("correct").get<bool>());
    ++answered;
  }
  answer(*svc, sid, "test-" + first, 0, 409);
  answer(*svc, sid, "test-goat-19", 2, 422);
  const auto report = json::parse(svc->call("GET", "/sessions/" + sid + "/trust").body);
  EXPECT_DOUBLE_EQ(report.at("jt_classification").get<double>(), 1.0);
}

TEST(Recovery, RestartReplaysJournalsByteForByte) {
  const auto dir = testing::scratch_dir("svc-restart");
  std::string sid, before;
  std::size_t interactions = 0;
  {
    auto svc = make_service(dir);
    sid = new_session(*svc);
    exhaust_image(*svc, sid, "toad-00", 3);
    post_faultline(*svc, sid, "goat-00", "Sheep");
    answer(*svc, sid, "test-dog-00", 0);
    before = svc->session_state(sid);
    interactions = svc->interactions();
  }
  {
    auto svc = make_service(dir);
    EXPECT_EQ(svc->session_state(sid), before);
    EXPECT_EQ(svc->interactions(), interactions);
  }
  // A torn final line is dropped.
  std::ofstream(dir / "sessions" / (sid + ".jsonl"), std::ios::app) << "{\"type\":\"quiz\",\"se";
  auto svc = make_service(dir);
  EXPECT_EQ(svc->session_state(sid), before);
  const auto q = json::parse(before).at("quizzes");
  std::string pending;
  for (auto it = q.begin(); it != q.end(); ++it) {
    if (it.value().at("answer").is_null()) pending = it.key();
  }
  ASSERT_FALSE(pending.empty());
  answer(*svc, sid, pending, 0);
}

TEST(Http, ServesTheSameApi) {
  const auto dir = testing::scratch_dir("svc-http");
  auto svc = make_service(dir);
  const int port = svc->start_background();
  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  auto created = cli.Post("/sessions", "", "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const auto sid = json::parse(created->body).at("session_id").get<std::string>();
  auto fl = cli.Post("/sessions/" + sid + "/faultline", json{{"image_id", "goat-00"}, {"c_alt", "Goat"}}.dump(),
                     "application/json");
  ASSERT_TRUE(fl);
  EXPECT_EQ(fl->status, 422);
  httplib::Headers headers = {{"Idempotency-Key", "k1"}};
  const std::string body = json{{"image_id", "goat-00"}, {"c_alt", "Sheep"}}.dump();
  auto a = cli.Post("/sessions/" + sid + "/faultline", headers, body, "application/json");
  auto b = cli.Post("/sessions/" + sid + "/faultline", headers, body, "application/json");
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->status, 200);
  EXPECT_EQ(a->body, b->body);
  auto missing = cli.Get("/sessions/zzz");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  svc->stop();
}

}  // namespace
}  // namespace faultline
