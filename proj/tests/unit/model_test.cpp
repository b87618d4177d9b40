#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "faultline/activation_io.hpp"
#include "faultline/error.hpp"
#include "faultline/fixture.hpp"
#include "faultline/model.hpp"
#include "faultline/random.hpp"

namespace faultline {
namespace {

ActivationTensor random_tensor(Rng& rng, std::size_t m, std::size_t u, std::size_t v) {
  ActivationTensor a(m, u, v);
  for (double& x : a.values()) x = rng.uniform(-1.0, 2.0);
  return a;
}

ClassifierHead random_head(Rng& rng, std::size_t classes, std::size_t maps) {
  std::vector<Vector> w(classes, Vector(maps));
  Vector b(classes);
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < classes; ++c) {
    for (double& x : w[c]) x = rng.normal();
    b[c] = rng.normal();
    labels.push_back("class" + std::to_string(c));
  }
  return ClassifierHead(w, b, labels);
}

int error_code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return static_cast<int>(e.code());
  }
  return -1;
}

TEST(GlobalAveragePool, ZeroTensorGivesZeroVector) {
  const Vector g = global_average_pool(ActivationTensor(4, 3, 3));
  EXPECT_EQ(g, Vector(4, 0.0));
}

TEST(GlobalAveragePool, ConstantMapsGiveTheirConstants) {
  ActivationTensor a(3, 2, 5);
  for (std::size_t k = 0; k < 3; ++k) {
    for (double& x : a.plane(k)) x = 1.5 * static_cast<double>(k) - 0.25;
  }
  const Vector g = global_average_pool(a);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(g[k], 1.5 * static_cast<double>(k) - 0.25);
}

TEST(GlobalAveragePool, MatchesNaiveLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const ActivationTensor a = random_tensor(rng, 2, 2, 2);
    const Vector g = global_average_pool(a);
    for (std::size_t k = 0; k < 2; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) sum += a.at(k, i, j);
      }
      EXPECT_NEAR(g[k], sum / 4.0, 1e-15);
    }
  }
}

TEST(Logits, ZeroActivationsGiveBias) {
  Rng rng(5);
  const ClassifierHead head = random_head(rng, 4, 6);
  const Vector y = logits(head, ActivationTensor(6, 3, 3));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y[c], head.bias()[c]);
}

TEST(Logits, IdentityHeadReturnsMapConstants) {
  const std::size_t m = 4;
  std::vector<Vector> w(m, Vector(m, 0.0));
  for (std::size_t k = 0; k < m; ++k) w[k][k] = 1.0;
  const ClassifierHead head(w, Vector(m, 0.0), {"a", "b", "c", "d"});
  ActivationTensor a(m, 2, 2);
  for (std::size_t k = 0; k < m; ++k) {
    for (double& x : a.plane(k)) x = 0.5 + static_cast<double>(k);
  }
  const Vector y = logits(head, a);
  for (std::size_t k = 0; k < m; ++k) EXPECT_DOUBLE_EQ(y[k], 0.5 + static_cast<double>(k));
}

TEST(Logits, FixtureLogitsMatchHandRolledProduct) {
  const AnimalFixture fx = make_animal_fixture();
  for (const auto& item : fx.dataset.items()) {
    const Vector y = logits(fx.head, item.activation);
    const auto& a = item.activation;
    for (std::size_t c = 0; c < fx.head.num_classes(); ++c) {
      double acc = fx.head.bias()[c];
      for (std::size_t k = 0; k < a.maps(); ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.height(); ++i) {
          for (std::size_t j = 0; j < a.width(); ++j) s += a.at(k, i, j);
        }
        acc += fx.head.row(c)[k] * s / static_cast<double>(a.plane_size());
      }
      EXPECT_NEAR(y[c], acc, 1e-10);
    }
  }
}

TEST(Logits, ShapeMismatchThrows) {
  Rng rng(1);
  const ClassifierHead head = random_head(rng, 3, 5);
  EXPECT_EQ(error_code_of([&] { logits(head, ActivationTensor(4, 2, 2)); }), static_cast<int>(ErrorCode::kShape));
}

TEST(Gradient, ZeroRowGivesZeroTensor) {
  std::vector<Vector> w = {Vector(3, 0.0), Vector{1.0, 2.0, 3.0}};
  const ClassifierHead head(w, Vector(2, 0.0), {"zero", "other"});
  Rng rng(2);
  const ActivationTensor g = grad_logit_wrt_activations(head, random_tensor(rng, 3, 4, 4), "zero");
  for (double x : g.values()) EXPECT_EQ(x, 0.0);
}

TEST(Gradient, CancellingWeightsGiveOnes) {
  const std::size_t u = 3, v = 5;
  const double uv = static_cast<double>(u * v);
  const ClassifierHead head({Vector(4, uv), Vector(4, 0.0)}, Vector(2, 0.0), {"a", "b"});
  const ActivationTensor g = grad_logit_wrt_activations(head, ActivationTensor(4, u, v), "a");
  for (double x : g.values()) EXPECT_DOUBLE_EQ(x, 1.0);
}

TEST(Gradient, MatchesCentralDifferences) {
  Rng rng(11);
  const ClassifierHead head = random_head(rng, 5, 6);
  const GapLinearBackend backend(head);
  const double h = 1e-5;
  for (int probe = 0; probe < 20; ++probe) {
    const ActivationTensor a = random_tensor(rng, 6, 4, 3);
    const std::size_t c = rng.index(5);
    const ActivationTensor g = backend.gradient(a, c);
    for (std::size_t idx = 0; idx < a.size(); ++idx) {
      ActivationTensor plus = a, minus = a;
      plus.values()[idx] += h;
      minus.values()[idx] -= h;
      const double fd = (backend.logits(plus)[c] - backend.logits(minus)[c]) / (2 * h);
      EXPECT_LT(std::abs(fd - g.values()[idx]) / std::max(1e-8, std::abs(fd)), 1e-4);
    }
  }
}

TEST(Gradient, UnknownLabelThrows) {
  Rng rng(1);
  const ClassifierHead head = random_head(rng, 3, 5);
  EXPECT_EQ(error_code_of([&] { grad_logit_wrt_activations(head, ActivationTensor(5, 2, 2), "nope"); }),
            static_cast<int>(ErrorCode::kUnknownClass));
}

TEST(ActivationIo, EmptySetRoundTrips) {
  const LabeledActivationSet set({"a", "b"}, 3, 2, 2);
  std::stringstream buf;
  write_activation_set(set, buf);
  const auto back = read_activation_set(buf);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.classes(), set.classes());
}

TEST(ActivationIo, SingleItemRoundTripsBitExactly) {
  Rng rng(8);
  LabeledActivationSet set({"a", "b"}, 3, 2, 4);
  ActivationTensor a = random_tensor(rng, 3, 2, 4);
  for (double& x : a.values()) x = static_cast<float>(x);  // representable in the payload
  set.add({"img", a, "b"});
  std::stringstream buf;
  write_activation_set(set, buf);
  const auto back = read_activation_set(buf);
  EXPECT_EQ(back, set);
}

TEST(ActivationIo, HundredItemsKeepPerClassCounts) {
  Rng rng(9);
  LabeledActivationSet set({"x", "y", "z"}, 2, 3, 3);
  std::map<std::string, int> expected;
  for (int i = 0; i < 100; ++i) {
    const std::string label = set.classes()[rng.index(3)];
    ++expected[label];
    set.add({"i" + std::to_string(i), random_tensor(rng, 2, 3, 3), label});
  }
  std::stringstream buf;
  write_activation_set(set, buf);
  const std::string bytes = buf.str();
  std::uint64_t len = 0;
  for (int b = 7; b >= 0; --b) len = (len << 8) | static_cast<unsigned char>(bytes[8 + b]);
  const auto manifest = nlohmann::json::parse(bytes.substr(16, len));
  std::map<std::string, int> from_manifest;
  for (const auto& item : manifest.at("items")) ++from_manifest[item.at("class").get<std::string>()];
  EXPECT_EQ(from_manifest, expected);

  std::stringstream in(bytes);
  const auto back = read_activation_set(in);
  for (const auto& [label, n] : expected) EXPECT_EQ(static_cast<int>(back.ids_of(label).size()), n);
}

TEST(ActivationIo, DistinctErrorsForMalformedTruncatedAndUnknownLabel) {
  LabeledActivationSet set({"a"}, 1, 2, 2);
  set.add({"img", ActivationTensor(1, 2, 2, {1, 2, 3, 4}), "a"});
  std::stringstream good;
  write_activation_set(set, good);
  const std::string bytes = good.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  const int malformed = error_code_of([&] {
    std::stringstream in(bad_magic);
    read_activation_set(in);
  });

  const int truncated = error_code_of([&] {
    std::stringstream in(bytes.substr(0, bytes.size() - 3));
    read_activation_set(in);
  });

  std::uint64_t len = 0;
  for (int b = 7; b >= 0; --b) len = (len << 8) | static_cast<unsigned char>(bytes[8 + b]);
  std::string manifest = bytes.substr(16, len);
  const auto pos = manifest.find("\"class\":\"a\"");
  ASSERT_NE(pos, std::string::npos);
  manifest.replace(pos, 11, "\"class\":\"q\"");
  const std::string relabeled = bytes.substr(0, 16) + manifest + bytes.substr(16 + len);
  const int unknown = error_code_of([&] {
    std::stringstream in(relabeled);
    read_activation_set(in);
  });

  EXPECT_EQ(malformed, static_cast<int>(ErrorCode::kMalformedHeader));
  EXPECT_EQ(truncated, static_cast<int>(ErrorCode::kTruncatedPayload));
  EXPECT_EQ(unknown, static_cast<int>(ErrorCode::kUnknownLabel));
}

TEST(Tensor, RejectsZeroDimensions) {
  EXPECT_THROW(ActivationTensor(0, 2, 2), Error);
}

TEST(Tensor, RejectsNonFiniteValues) {
  EXPECT_THROW(ActivationTensor(1, 1, 2, {1.0, std::nan("")}), Error);
}

}  // namespace
}  // namespace faultline
