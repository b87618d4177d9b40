#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "faultline/error.hpp"
#include "faultline/faultline.hpp"
#include "faultline/fixture.hpp"
#include "faultline/random.hpp"

namespace faultline {
namespace {

std::vector<Vector> dirs(const std::vector<Cav>& cavs) {
  std::vector<Vector> out;
  for (const auto& c : cavs) out.push_back(c.v);
  return out;
}

// Independent restatement of the mask and the logits under it.
Vector naive_perturbed_logits(const ClassifierHead& head, const ActivationTensor& a, const std::vector<Vector>& vp,
                              const Vector& dp, const std::vector<Vector>& va, const Vector& da) {
  Vector y = head.bias();
  for (std::size_t k = 0; k < a.maps(); ++k) {
    double fp = 1.0, fa = 1.0;
    for (std::size_t q = 0; q < vp.size(); ++q) fp += dp[q] * vp[q][k] * vp[q][k];
    for (std::size_t r = 0; r < va.size(); ++r) fa += da[r] * va[r][k] * va[r][k];
    const double mult = std::clamp(fp * fa, 0.0, 4.0);
    double mean = 0.0;
    for (std::size_t i = 0; i < a.height(); ++i) {
      for (std::size_t j = 0; j < a.width(); ++j) mean += a.at(k, i, j) * mult;
    }
    mean /= static_cast<double>(a.plane_size());
    for (std::size_t c = 0; c < y.size(); ++c) y[c] += head.row(c)[k] * mean;
  }
  return y;
}

struct Oracle {
  double objective = std::numeric_limits<double>::infinity();
  std::vector<int> dp, da;
};

// Enumerates every discrete assignment with the naive logits.
Oracle enumerate(const SolverInstance& inst, const FaultLineHyperparams& hp) {
  const auto vp = dirs(inst.sigma_pred), va = dirs(inst.sigma_alt);
  const std::size_t np = vp.size(), na = va.size(), n = np + na;
  const std::size_t p = inst.head.class_index(inst.query.c_pred), q = inst.head.class_index(inst.query.c_alt);
  Oracle best;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    Vector dp(np), da(na);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(mask >> i & 1u)) continue;
      if (i < np) dp[i] = -1.0; else da[i - np] = 1.0;
    }
    const Vector y = naive_perturbed_logits(inst.head, inst.query.activation, vp, dp, va, da);
    double l1p = 0.0, l1a = 0.0;
    for (double x : dp) l1p += std::abs(x);
    for (double x : da) l1a += std::abs(x);
    const double obj = hp.alpha * std::max(y[p] - y[q], -hp.tau) + hp.beta * l1p + hp.lambda * l1a;
    if (obj < best.objective - 1e-12) {
      best.objective = obj;
      best.dp.assign(dp.begin(), dp.end());
      best.da.assign(da.begin(), da.end());
    }
  }
  return best;
}

TEST(Perturb, ZeroDeltasAreIdentity) {
  const auto inst = make_solver_instance(1, 3, 2);
  const Vector zp(3, 0.0), za(2, 0.0);
  EXPECT_EQ(perturb_activations(inst.query.activation, dirs(inst.sigma_pred), zp, dirs(inst.sigma_alt), za),
            inst.query.activation);
}

TEST(Perturb, AxisDeletionZeroesOneMap) {
  const auto inst = make_solver_instance(2, 1, 0, false, 5, 3);
  Vector e(5, 0.0);
  e[2] = 1.0;
  const std::vector<Vector> vp = {e};
  const ActivationTensor out = perturb_activations(inst.query.activation, vp, Vector{-1.0}, {}, Vector{});
  for (std::size_t k = 0; k < 5; ++k) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(out.at(k, i, j), k == 2 ? 0.0 : inst.query.activation.at(k, i, j));
      }
    }
  }
}

TEST(Perturb, LogitsMatchNaiveMask) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto inst = make_solver_instance(100 + t, 3, 3);
    Vector dp(3), da(3);
    for (double& x : dp) x = -rng.uniform();
    for (double& x : da) x = rng.uniform();
    const auto vp = dirs(inst.sigma_pred), va = dirs(inst.sigma_alt);
    const Vector got = logits(inst.head, perturb_activations(inst.query.activation, vp, dp, va, da));
    const Vector want = naive_perturbed_logits(inst.head, inst.query.activation, vp, dp, va, da);
    for (std::size_t c = 0; c < got.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-10);
  }
}

TEST(Hinge, TieGivesZeroAndWideMarginSaturates) {
  // Two classes over one map: y0 = a, y1 = a + offset.
  auto head_with = [](double offset) { return ClassifierHead({Vector{1.0}, Vector{1.0}}, Vector{0.0, offset}, {"p", "q"}); };
  const ActivationTensor a(1, 1, 1, {1.0});
  EXPECT_DOUBLE_EQ(hinge_loss(head_with(0.0), a, "p", "q", 0.5), 0.0);
  EXPECT_DOUBLE_EQ(hinge_loss(head_with(1.0), a, "p", "q", 0.5), -0.5);
}

TEST(Hinge, MatchesPiecewiseFormula) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const double b0 = rng.normal(), b1 = rng.normal();
    const ClassifierHead head({Vector{0.3}, Vector{-0.2}}, Vector{b0, b1}, {"p", "q"});
    const ActivationTensor a(1, 2, 2, {0.5, 1.0, 1.5, 2.0});
    const double gp = 0.3 * 1.25 + b0, ga = -0.2 * 1.25 + b1;
    const double want = gp - ga > -0.5 ? gp - ga : -0.5;
    EXPECT_NEAR(hinge_loss(head, a, "p", "q", 0.5), want, 1e-12);
  }
}

TEST(Objective, SmoothGradientMatchesFiniteDifferences) {
  Rng rng(5);
  int probes = 0;
  for (int t = 0; t < 40 && probes < 40; ++t) {
    const auto inst = make_solver_instance(300 + t, 3, 3);
    const GapLinearBackend backend(inst.head);
    FaultLineHyperparams hp;
    hp.tau = std::numeric_limits<double>::infinity();
    const FaultLineObjective obj(backend, inst.query, dirs(inst.sigma_pred), dirs(inst.sigma_alt), hp);
    Vector x(6);
    for (std::size_t i = 0; i < 3; ++i) x[i] = -rng.uniform(0.05, 0.3);
    for (std::size_t i = 3; i < 6; ++i) x[i] = rng.uniform(0.05, 0.3);
    const Vector g = obj.smooth_gradient(x);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 6; ++i) {
      Vector xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (obj.smooth(xp) - obj.smooth(xm)) / (2 * h);
      if (std::abs(fd) < 1e-6) continue;
      EXPECT_LT(std::abs(fd - g[i]) / std::abs(fd), 1e-4);
      ++probes;
    }
  }
  EXPECT_GE(probes, 20);
}

TEST(Objective, ProxSoftThresholdsAndProjects) {
  const auto inst = make_solver_instance(7, 2, 2);
  const GapLinearBackend backend(inst.head);
  FaultLineHyperparams hp;
  hp.beta = 0.2;
  hp.lambda = 0.3;
  const FaultLineObjective obj(backend, inst.query, dirs(inst.sigma_pred), dirs(inst.sigma_alt), hp);
  Vector x = {-0.5, 0.4, 0.1, 1.8};
  obj.prox(x, 1.0);
  // pred coordinates: shrink toward 0 by beta*s, then clip to [-1, 0].
  EXPECT_NEAR(x[0], -0.3, 1e-12);
  EXPECT_NEAR(x[1], 0.0, 1e-12);
  // alt coordinates: shrink by lambda*s, clip to [0, 1].
  EXPECT_NEAR(x[2], 0.0, 1e-12);
  EXPECT_NEAR(x[3], 1.0, 1e-12);
}

TEST(Fista, TraceIsMonotonePerSegment) {
  for (int t = 0; t < 20; ++t) {
    const auto inst = make_solver_instance(500 + t, 4, 4);
    const GapLinearBackend backend(inst.head);
    const FaultLineObjective obj(backend, inst.query, dirs(inst.sigma_pred), dirs(inst.sigma_alt), {});
    const FistaResult r = run_fista(obj, Vector(8, 0.0));
    std::vector<std::size_t> starts = r.restart_at;
    starts.push_back(r.trace.size());
    std::size_t begin = 0;
    for (std::size_t end : starts) {
      for (std::size_t i = begin + 1; i < end; ++i) EXPECT_LE(r.trace[i], r.trace[i - 1] + 1e-12);
      begin = end;
    }
  }
}

TEST(BruteForce, MatchesIndependentEnumeration) {
  FaultLineHyperparams hp;
  for (int t = 0; t < 30; ++t) {
    const auto inst = make_solver_instance(700 + t, 1 + t % 4, 1 + (t / 4) % 4, t % 2 == 0);
    const GapLinearBackend backend(inst.head);
    const FaultLine bf = brute_force_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, hp);
    const Oracle o = enumerate(inst, hp);
    EXPECT_NEAR(bf.objective, o.objective, 1e-10);
  }
}

TEST(BruteForce, OnePlusOneAgreesWithHandEvaluation) {
  const ClassifierHead head({Vector{1.0, 0.0}, Vector{0.0, 1.0}}, Vector{0.0, 0.0}, {"p", "q"});
  const ActivationTensor a(2, 1, 1, {1.0, 0.5});
  const GapLinearBackend backend(head);
  const FaultLineQuery q{"x", a, "p", "q"};
  const std::vector<Cav> sp = {{"p0", {1.0, 0.0}, 1.0}}, sa = {{"a0", {0.0, 1.0}, 1.0}};
  // (dp, da) -> objective: (0,0) 0.5; (-1,0) -0.5+0.1; (0,1) 0+0.1; (-1,1) -0.5+0.2.
  const FaultLine line = brute_force_faultline(backend, q, sp, sa, {});
  EXPECT_EQ(line.delta_pred, std::vector<int>{-1});
  EXPECT_EQ(line.delta_alt, std::vector<int>{0});
  EXPECT_NEAR(line.objective, -0.4, 1e-12);
  EXPECT_TRUE(line.flipped);
  EXPECT_EQ(line.iterations, 4u);
}

TEST(BruteForce, EmptySetsGiveZeroDeltas) {
  const auto inst = make_solver_instance(3, 0, 0);
  const GapLinearBackend backend(inst.head);
  const FaultLine line = brute_force_faultline(backend, inst.query, {}, {}, {});
  EXPECT_TRUE(line.delta_pred.empty());
  EXPECT_TRUE(line.delta_alt.empty());
  EXPECT_FALSE(line.flipped);
}

TEST(BruteForce, RejectsLargeInstances) {
  const auto inst = make_solver_instance(3, 9, 8);
  const GapLinearBackend backend(inst.head);
  try {
    brute_force_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTooLarge);
  }
}

TEST(Solve, SingleSwitchInstance) {
  // Only one concept moves c_alt's logit, and doubling it is enough.
  const ClassifierHead head({Vector{1.0, 0.0, 0.0}, Vector{0.0, 1.0, 0.0}}, Vector{0.0, 0.0}, {"p", "q"});
  const ActivationTensor a(3, 1, 1, {1.0, 0.8, 1.0});
  const GapLinearBackend backend(head);
  const FaultLineQuery q{"x", a, "p", "q"};
  const std::vector<Cav> sp = {{"p0", {0.0, 0.0, 1.0}, 1.0}};
  const std::vector<Cav> sa = {{"big", {0.0, 1.0, 0.0}, 1.0}, {"other", {0.0, 0.0, 1.0}, 1.0}};
  const FaultLine line = solve_faultline(backend, q, sp, sa, {}, 1);
  EXPECT_EQ(line.pft, std::vector<std::string>{"big"});
  EXPECT_TRUE(line.nft.empty());
  EXPECT_TRUE(line.flipped);
}

TEST(Solve, MatchesEnumerationOnThreePlusThree) {
  FaultLineHyperparams hp;
  int matched = 0;
  for (int t = 0; t < 25; ++t) {
    const auto inst = make_solver_instance(900 + t, 3, 3);
    const GapLinearBackend backend(inst.head);
    const FaultLine line = solve_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, hp, 7);
    const Oracle o = enumerate(inst, hp);
    EXPECT_GE(line.objective, o.objective - 1e-10);
    matched += std::abs(line.objective - o.objective) < 1e-9;
  }
  EXPECT_GE(matched, 20);
}

TEST(Solve, FlippedSolutionsAreMinimal) {
  FaultLineHyperparams hp;
  for (int t = 0; t < 40; ++t) {
    const auto inst = make_solver_instance(1100 + t, 1 + t % 5, 1 + (t / 5) % 5, true);
    const GapLinearBackend backend(inst.head);
    const FaultLine line = solve_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, hp, 7);
    if (!line.flipped) continue;
    const auto vp = dirs(inst.sigma_pred), va = dirs(inst.sigma_alt);
    std::vector<std::size_t> support;
    const std::size_t np = vp.size();
    for (std::size_t i = 0; i < np; ++i) if (line.delta_pred[i]) support.push_back(i);
    for (std::size_t i = 0; i < va.size(); ++i) if (line.delta_alt[i]) support.push_back(np + i);
    const std::size_t p = inst.head.class_index(inst.query.c_pred), q = inst.head.class_index(inst.query.c_alt);
    for (std::uint32_t m = 0; m + 1 < (1u << support.size()); ++m) {
      Vector dp(np), da(va.size());
      for (std::size_t b = 0; b < support.size(); ++b) {
        if (!(m >> b & 1u)) continue;
        if (support[b] < np) dp[support[b]] = -1.0; else da[support[b] - np] = 1.0;
      }
      const Vector y = naive_perturbed_logits(inst.head, inst.query.activation, vp, dp, va, da);
      EXPECT_LE(y[q] - y[p], 0.0) << "instance " << t << " subset " << m;
    }
  }
}

TEST(Solve, ReportedMarginReverifies) {
  for (int t = 0; t < 20; ++t) {
    const auto inst = make_solver_instance(1300 + t, 3, 4);
    const GapLinearBackend backend(inst.head);
    const FaultLine line = solve_faultline(backend, inst.query, inst.sigma_pred, inst.sigma_alt, {}, 3);
    const double m = recompute_margin(backend, inst.query, inst.sigma_pred, inst.sigma_alt, line);
    EXPECT_NEAR(m, line.margin, 1e-9);
    EXPECT_EQ(line.flipped, line.margin > 0.0);
  }
}

TEST(Solve, InvalidQueriesThrow) {
  const auto inst = make_solver_instance(4, 2, 2);
  const GapLinearBackend backend(inst.head);
  FaultLineQuery same = inst.query;
  same.c_alt = same.c_pred;
  EXPECT_THROW(solve_faultline(backend, same, inst.sigma_pred, inst.sigma_alt, {}, 1), Error);
  FaultLineQuery wrong = inst.query;
  std::swap(wrong.c_pred, wrong.c_alt);
  EXPECT_THROW(solve_faultline(backend, wrong, inst.sigma_pred, inst.sigma_alt, {}, 1), Error);
  FaultLineHyperparams bad;
  bad.beta = -1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Bundle, CarriesQueryAndExamples) {
  FaultLine line;
  line.image_id = "goat-00";
  line.c_pred = "Goat";
  line.c_alt = "Sheep";
  line.pft = {"wool"};
  line.nft = {"beard"};
  line.flipped = true;
  line.margin = 0.5;
  const auto j = nlohmann::json::parse(faultline_bundle_json(line, {{"wool", {"sheep-00"}}}));
  EXPECT_EQ(j["query"]["c_alt"], "Sheep");
  EXPECT_EQ(j["pft"][0], "wool");
  EXPECT_EQ(j["concept_examples"]["wool"][0], "sheep-00");
  EXPECT_TRUE(j["concept_examples"]["beard"].empty());
  for (const char* key : {"margin", "objective", "iterations", "flipped"}) EXPECT_TRUE(j.contains(key));
}

}  // namespace
}  // namespace faultline
