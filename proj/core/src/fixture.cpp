#include "faultline/fixture.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/random.hpp"

namespace faultline {

using nlohmann::json;

namespace {

constexpr std::size_t kSide = 8;
constexpr std::size_t kBackgroundRows = 2;
constexpr double kBackgroundNoise = 0.2;

const std::vector<std::string> kMaps = {"fur",         "ears",  "snout", "tail",  "stripes", "webbed_feet",
                                        "smooth_skin", "bumps", "wool",  "beard", "horns",   "hooves"};
const std::vector<std::string> kClasses = {"Dog", "Thylacine", "Frog", "Toad", "Goat", "Sheep"};

std::size_t map_of(const std::string& name) {
  for (std::size_t k = 0; k < kMaps.size(); ++k) {
    if (kMaps[k] == name) return k;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown part " + name);
}

// Nominal part strengths (pooled activation) per class.
const std::vector<std::vector<std::pair<std::string, double>>> kParts = {
    {{"fur", 1.0}, {"ears", 1.0}, {"snout", 1.0}, {"tail", 1.0}, {"stripes", 0.25}},
    {{"fur", 1.0}, {"ears", 1.0}, {"snout", 1.0}, {"tail", 1.0}, {"stripes", 1.0}},
    {{"webbed_feet", 1.0}, {"smooth_skin", 1.0}},
    {{"webbed_feet", 1.0}, {"smooth_skin", 1.0}, {"bumps", 1.0}},
    {{"beard", 1.0}, {"horns", 1.0}, {"hooves", 1.0}, {"wool", 0.25}},
    {{"wool", 1.0}, {"hooves", 1.0}},
};

const std::vector<std::vector<std::pair<std::string, double>>> kWeights = {
    {{"fur", 0.5}, {"ears", 0.5}, {"snout", 0.5}, {"tail", 0.5}, {"stripes", -0.5}},
    {{"fur", 0.5}, {"ears", 0.5}, {"snout", 0.5}, {"tail", 0.5}, {"stripes", 2.5}},
    {{"webbed_feet", 0.5}, {"smooth_skin", 0.5}, {"bumps", -0.3}},
    {{"webbed_feet", 0.5}, {"smooth_skin", 0.5}, {"bumps", 1.0}},
    {{"beard", 1.1}, {"horns", 1.1}, {"hooves", 0.6}, {"wool", -0.2}},
    {{"wool", 3.4}, {"hooves", 0.6}},
};
const std::vector<double> kBias = {0.55, -0.55, 0.35, -0.35, 0.6, -0.6};

// Top-left cell of part k's 2x2 site.
std::pair<std::size_t, std::size_t> site(std::size_t k) {
  return {kBackgroundRows + 2 * (k / 4), 2 * (k % 4)};
}

}  // namespace

AnimalFixture make_animal_fixture(std::uint64_t seed, std::size_t images_per_class) {
  if (images_per_class == 0) throw Error(ErrorCode::kInvalidArgument, "images_per_class must be positive");
  const std::size_t m = kMaps.size();
  std::vector<std::vector<double>> weights(kClasses.size(), std::vector<double>(m, 0.0));
  for (std::size_t c = 0; c < kClasses.size(); ++c) {
    for (const auto& [part, w] : kWeights[c]) weights[c][map_of(part)] = w;
  }
  AnimalFixture fx{LabeledActivationSet(kClasses, m, kSide, kSide), ClassifierHead(weights, kBias, kClasses), kMaps};

  Rng rng(seed);
  const double cells_per_site = 4.0;
  const double plane = static_cast<double>(kSide * kSide);
  for (std::size_t c = 0; c < kClasses.size(); ++c) {
    for (std::size_t i = 0; i < images_per_class; ++i) {
      ActivationTensor a(m, kSide, kSide);
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t r = 0; r < kBackgroundRows; ++r) {
          for (std::size_t col = 0; col < kSide; ++col) a.at(k, r, col) = rng.uniform(0.0, kBackgroundNoise);
        }
      }
      for (const auto& [part, strength] : kParts[c]) {
        const std::size_t k = map_of(part);
        const double jitter = i == 0 ? 1.0 : rng.uniform(0.85, 1.15);
        const double cell = strength * jitter * plane / cells_per_site;
        const auto [r0, c0] = site(k);
        for (std::size_t dr = 0; dr < 2; ++dr) {
          for (std::size_t dc = 0; dc < 2; ++dc) a.at(k, r0 + dr, c0 + dc) = cell;
        }
      }
      char id[64];
      std::snprintf(id, sizeof id, "%s-%02zu", kClasses[c].c_str(), i);
      std::string image_id(id);
      for (auto& ch : image_id) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      fx.dataset.add({image_id, std::move(a), kClasses[c]});
    }
  }
  return fx;
}

void write_animal_fixture(const AnimalFixture& fixture, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_activation_set(fixture.dataset, dir / "activations.flx");
  save_head(fixture.head, dir / "head.json");
  write_text_file(dir / "maps.json", json(fixture.map_labels).dump() + "\n");
  const json config = {
      {"data", {{"activations", "activations.flx"}, {"head", "head.json"}, {"map_labels", "maps.json"}}},
      {"stores",
       {{"xconcepts", "out/xconcepts.json"},
        {"cavs", "out/cavs.json"},
        {"class_sets", "out/class_sets.json"},
        {"policy", "out/policy.flxpol"},
        {"sessions", "out/sessions"}}},
      {"miner", {{"p", 3}, {"k_min", 2}, {"k_max", 16}, {"outlier_fraction", 0.02}, {"restarts", 16}}},
      {"cav", {{"n_per_class", 5}}},
      {"seed", 7},
  };
  write_text_file(dir / "config.json", config.dump(2) + "\n");
}

SolverInstance make_solver_instance(std::uint64_t seed, std::size_t n_pred, std::size_t n_alt, bool sparse,
                                    std::size_t maps, std::size_t side, std::size_t classes) {
  Rng rng(seed);
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.push_back("c" + std::to_string(c));
  std::vector<std::vector<double>> w(classes, std::vector<double>(maps));
  for (auto& row : w) {
    for (double& x : row) x = rng.normal();
  }
  std::vector<double> bias(classes);
  for (double& b : bias) b = 0.1 * rng.normal();
  ClassifierHead head(w, bias, labels);

  ActivationTensor a(maps, side, side);
  for (std::size_t k = 0; k < maps; ++k) {
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) a.at(k, i, j) = rng.uniform(0.0, 2.0);
    }
  }
  const std::size_t pred = predicted_class(head, a);
  std::size_t alt = rng.index(classes - 1);
  if (alt >= pred) ++alt;

  auto random_cav = [&](const std::string& id) {
    Cav cav{id, Vector(maps, 0.0), 1.0};
    if (sparse) {
      const std::size_t support = 1 + rng.index(2);
      for (std::size_t s = 0; s < support; ++s) cav.v[rng.index(maps)] += rng.normal();
    } else {
      for (double& x : cav.v) x = rng.normal();
    }
    double norm = 0.0;
    for (double x : cav.v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      cav.v[0] = 1.0;
      norm = 1.0;
    }
    for (double& x : cav.v) x /= norm;
    return cav;
  };

  SolverInstance inst{head, {"img-" + std::to_string(seed), a, labels[pred], labels[alt]}, {}, {}};
  for (std::size_t q = 0; q < n_pred; ++q) inst.sigma_pred.push_back(random_cav("p" + std::to_string(q)));
  for (std::size_t r = 0; r < n_alt; ++r) inst.sigma_alt.push_back(random_cav("a" + std::to_string(r)));
  return inst;
}

PlantedBlobs make_planted_blobs(std::uint64_t seed, std::size_t blobs, std::size_t per_blob, std::size_t dims,
                                double sigma) {
  if (blobs > dims) throw Error(ErrorCode::kInvalidArgument, "need dims >= blobs");
  Rng rng(seed);
  PlantedBlobs out;
  const double scale = 1.0 / std::sqrt(2.0);  // pairwise center distance 1
  for (std::size_t b = 0; b < blobs; ++b) {
    for (std::size_t i = 0; i < per_blob; ++i) {
      Vector p(dims);
      for (std::size_t d = 0; d < dims; ++d) p[d] = (d == b ? scale : 0.0) + sigma * rng.normal();
      out.points.push_back(std::move(p));
      out.labels.push_back(b);
    }
  }
  return out;
}

}  // namespace faultline
