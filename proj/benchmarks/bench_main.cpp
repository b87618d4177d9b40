#include <benchmark/benchmark.h>

#include "faultline/cav.hpp"
#include "faultline/faultline.hpp"
#include "faultline/fixture.hpp"
#include "faultline/policy.hpp"
#include "faultline/random.hpp"
#include "faultline/xconcept.hpp"

namespace {

using namespace faultline;

void BM_SolveFaultline(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto inst = make_solver_instance(42, n, n);
  const GapLinearBackend backend(inst.head);
  for (auto _ : state) {
    benchmark::DoNotOptimize(solve_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, {}, 7));
  }
}
BENCHMARK(BM_SolveFaultline)->Arg(2)->Arg(4)->Arg(6)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_BruteForce(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto inst = make_solver_instance(42, n, n);
  const GapLinearBackend backend(inst.head);
  for (auto _ : state) {
    benchmark::DoNotOptimize(brute_force_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, {}));
  }
}
BENCHMARK(BM_BruteForce)->Arg(2)->Arg(4)->Arg(6)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_KMeans(benchmark::State& state) {
  const auto blobs = make_planted_blobs(3, 3, static_cast<std::size_t>(state.range(0)), 12, 0.2);
  for (auto _ : state) benchmark::DoNotOptimize(kmeans(blobs.points, 3, 1, 4));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(blobs.points.size()));
}
BENCHMARK(BM_KMeans)->Arg(100)->Arg(1000);

void BM_FitCav(benchmark::State& state) {
  Rng rng(5);
  std::vector<Vector> pos, neg;
  for (int i = 0; i < 200; ++i) {
    Vector x(12), y(12);
    for (auto& v : x) v = rng.normal(0.5, 1.0);
    for (auto& v : y) v = rng.normal(-0.5, 1.0);
    pos.push_back(x);
    neg.push_back(y);
  }
  for (auto _ : state) benchmark::DoNotOptimize(fit_cav(pos, neg, 1));
}
BENCHMARK(BM_FitCav);

void BM_PolicyForward(benchmark::State& state) {
  const policy::PolicyModel model(6, 1, static_cast<std::size_t>(state.range(0)), 2);
  auto s = policy::DialogState::fresh("b", "img", 6, 0);
  s.record(2, false);
  s.record(4, false);
  const auto seq = policy::encode_sequence(s);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(seq));
}
BENCHMARK(BM_PolicyForward)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
