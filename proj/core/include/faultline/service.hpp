#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "faultline/pipeline.hpp"
#include "faultline/policy.hpp"
#include "faultline/trust.hpp"

namespace faultline {

struct ServiceOptions {
  std::filesystem::path sessions_dir;
  std::filesystem::path policy_path;
  policy::TrainingConfig training;  // update cadence, learning, reward, max_turns
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t images_per_session = 8;
  std::size_t quiz_options = 4;
  std::uint64_t seed = 7;

  static ServiceOptions from_config(const PipelineConfig& config);
};

struct ApiResponse {
  int status = 200;
  std::string body;  // JSON
};

// Session-oriented dialog loop over a shared explainer and an online policy.
// Every state change is appended to the session's JSON-lines journal before
// the call returns; constructing a service over an existing sessions
// directory replays all journals.
class DialogService {
 public:
  DialogService(std::shared_ptr<const Explainer> explainer, ServiceOptions options);
  ~DialogService();
  DialogService(const DialogService&) = delete;
  DialogService& operator=(const DialogService&) = delete;

  // In-process dispatch with the same routing, status codes and
  // idempotency handling as the HTTP server.
  ApiResponse call(const std::string& method, const std::string& path, const std::string& body = "",
                   const std::string& idempotency_key = "");

  // Canonical JSON of a session's state; identical bytes after a replay.
  std::string session_state(const std::string& session_id) const;
  std::vector<std::string> session_ids() const;

  std::uint64_t checkpoint_sequence() const;
  std::size_t interactions() const;
  std::size_t updates() const;
  policy::PolicyModel policy_snapshot() const;

  // Blocking HTTP server.
  void listen(const std::string& host, int port);
  // Binds to a free port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Test-phase trust: one game per image with a single image-level node whose
// polarity is the model's actual outcome (pg_M) or the user's prediction
// (pg_MinU), plus classification-form justified trust.
trust::TrustReport trust_from_test_answers(const std::map<std::string, bool>& predicts_success,
                                           const std::map<std::string, bool>& model_correct);

// Aggregates the test-phase answers recorded in session journals.
trust::TrustReport trust_report_from_journals(const std::vector<std::filesystem::path>& journals);

}  // namespace faultline
