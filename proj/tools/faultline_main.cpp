// faultline: batch entry points for mining, CAV fitting, explanation,
// policy training, trust evaluation and the dialog service.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/fixture.hpp"
#include "faultline/pipeline.hpp"
#include "faultline/service.hpp"
#include "faultline/trust.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace faultline;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
  std::optional<std::size_t> threads;
};

fs::path default_config_path() {
  if (const char* env = std::getenv("FAULTLINE_DATA_DIR"); env != nullptr && *env != '\0') {
    return fs::path(env) / "config.json";
  }
  return "config.json";
}

PipelineConfig load_config(const GlobalFlags& flags) {
  const fs::path path = flags.config.empty() ? default_config_path() : fs::path(flags.config);
  PipelineConfig config = fs::exists(path) ? PipelineConfig::load(path)
                                           : throw Error(ErrorCode::kIo, "config file '" + path.string() + "' not found");
  if (flags.seed) config.seed = *flags.seed;
  if (flags.threads) config.threads = *flags.threads;
  return config;
}

void progress(const std::string& message) { std::cerr << "[faultline] " << message << "\n"; }

void emit(const GlobalFlags& flags, const json& result, const std::string& human) {
  if (flags.json) {
    std::cout << result.dump(2) << "\n";
  } else {
    std::cout << human;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fault-line explanations, concept mining and explanation-dialog tooling"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags flags;
  app.add_option("--config", flags.config, "Pipeline config JSON (default: $FAULTLINE_DATA_DIR/config.json)");
  app.add_option("--seed", flags.seed, "Override the config seed");
  app.add_option("--out", flags.out, "Output path for the command's artifact");
  app.add_flag("--json", flags.json, "Machine-readable JSON on stdout");
  app.add_option("--threads", flags.threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* fixture_cmd = app.add_subcommand("make-fixture", "Write the six-class synthetic animal fixture");
  std::string fixture_dir = "fixtures/animals";
  std::uint64_t fixture_seed = 2024;
  std::size_t fixture_images = 20;
  fixture_cmd->add_option("--dir", fixture_dir, "Destination directory");
  fixture_cmd->add_option("--fixture-seed", fixture_seed, "Generator seed");
  fixture_cmd->add_option("--images-per-class", fixture_images, "Images per class")->check(CLI::PositiveNumber);

  auto* mine_cmd = app.add_subcommand("mine", "Mine xconcepts from the activation set");

  auto* fit_cmd = app.add_subcommand("fit-cavs", "Fit concept activation vectors and class-specific concept sets");

  auto* explain_cmd = app.add_subcommand("explain", "Solve a fault-line explanation for one image");
  std::string image_id, c_alt;
  bool brute_force = false;
  explain_cmd->add_option("--image", image_id, "Image id")->required();
  explain_cmd->add_option("--alt", c_alt, "Alternate class")->required();
  explain_cmd->add_flag("--brute-force", brute_force, "Exhaustive search instead of FISTA");

  auto* train_cmd = app.add_subcommand("train-policy", "Train the explanation-selection policy on simulated users");
  std::optional<std::size_t> episodes;
  std::string train_log;
  train_cmd->add_option("--episodes", episodes, "Training episodes (default from config)");
  train_cmd->add_option("--log", train_log, "JSON-lines episode log path");

  auto* eval_cmd = app.add_subcommand("evaluate", "Trust report from parse-graph games or session journals");
  std::string games_file;
  std::vector<std::string> journals;
  eval_cmd->add_option("--games", games_file, "Games JSON {games:[{minu, m}]}");
  eval_cmd->add_option("journals", journals, "Session journal files (.jsonl)");

  auto* serve_cmd = app.add_subcommand("serve", "Run the dialog service");
  std::optional<int> port;
  std::optional<std::string> host;
  serve_cmd->add_option("--port", port, "Listen port (default from config)");
  serve_cmd->add_option("--host", host, "Listen address (default from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*fixture_cmd) {
      const fs::path dir = flags.out.empty() ? fs::path(fixture_dir) : fs::path(flags.out);
      write_animal_fixture(make_animal_fixture(fixture_seed, fixture_images), dir);
      emit(flags, {{"dir", dir.string()}, {"config", (dir / "config.json").string()}},
           "fixture written to " + dir.string() + "\n");
      return 0;
    }

    if (*eval_cmd) {
      if (games_file.empty() && journals.empty()) {
        throw Error(ErrorCode::kInvalidArgument, "evaluate needs --games or at least one journal");
      }
      trust::TrustReport report;
      if (!games_file.empty()) {
        report = cmd_evaluate_games(games_file);
      }
      if (!journals.empty()) {
        std::vector<fs::path> paths(journals.begin(), journals.end());
        const auto from_journals = trust_report_from_journals(paths);
        if (games_file.empty()) {
          report = from_journals;
        } else {
          report.jt_classification = from_journals.jt_classification;
        }
      }
      const std::string text = trust::trust_report_to_json(report);
      if (!flags.out.empty()) write_text_file(flags.out, text + "\n");
      std::cout << text << "\n";
      return 0;
    }

    PipelineConfig config = load_config(flags);

    if (*mine_cmd) {
      if (!flags.out.empty()) config.xconcepts = flags.out;
      progress("mining xconcepts");
      const auto s = cmd_mine(config);
      std::string human = "superpixels: " + std::to_string(s.superpixels) + "\nK: " + std::to_string(s.chosen_k) +
                          "\nsilhouette: " + std::to_string(s.silhouette) + "\nconcepts:";
      for (const auto& id : s.concept_ids) human += " " + id;
      emit(flags,
           {{"superpixels", s.superpixels},
            {"chosen_k", s.chosen_k},
            {"silhouette", s.silhouette},
            {"concepts", s.concept_ids},
            {"store", config.xconcepts.string()}},
           human + "\nstore: " + config.xconcepts.string() + "\n");
    } else if (*fit_cmd) {
      if (!flags.out.empty()) config.cavs = flags.out;
      progress("fitting CAVs");
      const auto s = cmd_fit_cavs(config);
      std::string human = "fitted: " + std::to_string(s.fitted.size()) + "\n";
      for (const auto& id : s.skipped) human += "skipped (inseparable): " + id + "\n";
      emit(flags,
           {{"fitted", s.fitted},
            {"skipped", s.skipped},
            {"cavs", config.cavs.string()},
            {"class_sets", config.class_sets.string()}},
           human);
    } else if (*explain_cmd) {
      const Explainer explainer(load_artifacts(config), config.solver, config.seed);
      const FaultLine line =
          brute_force ? explainer.explain_brute_force(image_id, c_alt) : explainer.explain(image_id, c_alt);
      const std::string bundle = explainer.bundle_json(line);
      if (!flags.out.empty()) write_text_file(flags.out, bundle + "\n");
      if (!line.flipped) progress("no assignment flips the decision; returning the best partial change");
      std::cout << bundle << "\n";
    } else if (*train_cmd) {
      if (!flags.out.empty()) config.policy = flags.out;
      const std::size_t n = episodes.value_or(config.training.episodes);
      progress("training policy for " + std::to_string(n) + " episodes");
      std::unique_ptr<std::ofstream> log;
      if (!train_log.empty()) {
        if (fs::path(train_log).has_parent_path()) fs::create_directories(fs::path(train_log).parent_path());
        log = std::make_unique<std::ofstream>(train_log);
      }
      const auto s = cmd_train_policy(config, n, log.get());
      const json result = {{"episodes", s.episodes},
                           {"interactions", s.interactions},
                           {"updates", s.updates},
                           {"checkpoint", config.policy.string()},
                           {"trained", {{"mean_length", s.trained.mean_length}, {"mean_reward", s.trained.mean_reward}}},
                           {"baseline", {{"mean_length", s.baseline.mean_length}, {"mean_reward", s.baseline.mean_reward}}}};
      emit(flags, result,
           "episodes: " + std::to_string(s.episodes) + "\nupdates: " + std::to_string(s.updates) +
               "\nmean length (trained / random): " + std::to_string(s.trained.mean_length) + " / " +
               std::to_string(s.baseline.mean_length) + "\nmean reward (trained / random): " +
               std::to_string(s.trained.mean_reward) + " / " + std::to_string(s.baseline.mean_reward) +
               "\ncheckpoint: " + config.policy.string() + "\n");
    } else if (*serve_cmd) {
      auto explainer = std::make_shared<const Explainer>(load_artifacts(config), config.solver, config.seed);
      DialogService service(explainer, ServiceOptions::from_config(config));
      const std::string h = host.value_or(config.service.host);
      const int p = port.value_or(config.service.port);
      progress("serving on " + h + ":" + std::to_string(p));
      service.listen(h, p);
    }
  } catch (const Error& e) {
    std::cerr << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
