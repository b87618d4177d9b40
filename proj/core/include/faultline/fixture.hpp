#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "faultline/cav.hpp"
#include "faultline/faultline.hpp"
#include "faultline/model.hpp"

namespace faultline {

// Six-class synthetic animal set (Dog, Thylacine, Frog, Toad, Goat, Sheep)
// over 12 named part maps on an 8x8 grid. Each part owns a fixed 2x2 site;
// the first image of every class carries the nominal part strengths.
struct AnimalFixture {
  LabeledActivationSet dataset;
  ClassifierHead head;
  std::vector<std::string> map_labels;
};

AnimalFixture make_animal_fixture(std::uint64_t seed = 2024, std::size_t images_per_class = 20);

// Writes activations.flx, head.json, maps.json and a pipeline config.json
// whose relative paths point into `dir`.
void write_animal_fixture(const AnimalFixture& fixture, const std::filesystem::path& dir);

// Random fault-line instance: small random head, nonnegative activation
// predicted as c_pred, random concept vectors. `sparse` restricts every
// concept vector to one or two maps.
struct SolverInstance {
  ClassifierHead head;
  FaultLineQuery query;
  std::vector<Cav> sigma_pred;
  std::vector<Cav> sigma_alt;
};

SolverInstance make_solver_instance(std::uint64_t seed, std::size_t n_pred, std::size_t n_alt,
                                    bool sparse = false, std::size_t maps = 8, std::size_t side = 3,
                                    std::size_t classes = 4);

// Gaussian blobs in `dims` dimensions, unit-separated centers.
struct PlantedBlobs {
  std::vector<Vector> points;
  std::vector<std::size_t> labels;
};

PlantedBlobs make_planted_blobs(std::uint64_t seed, std::size_t blobs, std::size_t per_blob, std::size_t dims,
                                double sigma);

}  // namespace faultline
