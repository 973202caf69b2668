#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "metr/losses.hpp"
#include "metr/rng.hpp"
#include "oracles.hpp"

using namespace metr;

TEST_CASE("binary focal fixtures") {
  const FocalConfig cfg{0.25, 2.0};
  CHECK(binary_focal(0.999999, 1, cfg).value == Catch::Approx(0.0).margin(1e-10));

  // independent scalar substitution: alpha*(1-p)^gamma*(-ln p)
  const double expect_pos = 0.25 * 0.25 * std::log(2.0);
  CHECK(binary_focal(0.5, 1, cfg).value == Catch::Approx(expect_pos));
  CHECK(expect_pos == Catch::Approx(0.043322).margin(1e-6));

  const double expect_neg = 0.75 * 0.25 * std::log(2.0);
  CHECK(binary_focal(0.5, 0, cfg).value == Catch::Approx(expect_neg));
  CHECK(expect_neg == Catch::Approx(0.129966).margin(1e-6));

  CHECK_THROWS_AS(binary_focal(0.0, 1, cfg), DomainError);
  CHECK_THROWS_AS(binary_focal(1.0, 1, cfg), DomainError);
  CHECK_THROWS_AS(binary_focal(-0.2, 0, cfg), DomainError);
}

TEST_CASE("binary focal gradient matches finite differences") {
  const FocalConfig cfg{0.25, 2.0};
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const double p = rng.uniform(0.02, 0.98);
    for (int target : {0, 1}) {
      const LossAndGrad lg = binary_focal(p, target, cfg);
      const double numeric =
          oracle::central_diff([&](double x) { return binary_focal(x, target, cfg).value; }, p);
      CHECK(oracle::grad_matches(lg.grad[0], numeric));
    }
  }
}

TEST_CASE("binary focal with gamma 0 and alpha 0.5 halves cross entropy") {
  const FocalConfig cfg{0.5, 0.0};
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const double p = rng.uniform(0.01, 0.99);
    const double bce_pos = -std::log(p);
    const double bce_neg = -std::log(1.0 - p);
    CHECK(binary_focal(p, 1, cfg).value == Catch::Approx(0.5 * bce_pos).epsilon(0).margin(1e-10));
    CHECK(binary_focal(p, 0, cfg).value == Catch::Approx(0.5 * bce_neg).epsilon(0).margin(1e-10));
  }
}

TEST_CASE("class_match_cost is the positive focal term") {
  const FocalConfig cfg{0.25, 2.0};
  CHECK(class_match_cost(0.999999, cfg) == Catch::Approx(0.0).margin(1e-10));
  CHECK(class_match_cost(0.5, cfg) == Catch::Approx(binary_focal(0.5, 1, cfg).value));
  CHECK(class_match_cost(0.3, cfg) > class_match_cost(0.7, cfg));
}

TEST_CASE("multiclass focal cost") {
  const FocalConfig cfg{0.25, 2.0};
  Vec probs{0.1, 0.999999, 0.4};
  CHECK(multiclass_focal_cost(probs, 1, cfg) == Catch::Approx(0.0).margin(1e-10));
  probs[1] = 0.5;
  CHECK(multiclass_focal_cost(probs, 1, cfg) == Catch::Approx(0.25 * 0.25 * std::log(2.0)));
  CHECK_THROWS_AS(multiclass_focal_cost(probs, 3, cfg), std::out_of_range);

  // K=1 reduces exactly to class_match_cost
  const Vec single{0.37};
  CHECK(multiclass_focal_cost(single, 0, cfg) == class_match_cost(0.37, cfg));
}

TEST_CASE("asymmetric loss fixtures") {
  const AslConfig cfg{0.0, 4.0, 0.05};
  SECTION("confident positives vanish") {
    const Vec s(4, 1.0 - 1e-7);
    const std::vector<int> t(4, 1);
    CHECK(asymmetric_loss(s, t, cfg, 1.0).value == Catch::Approx(0.0).margin(1e-5));
  }
  SECTION("negatives below the clip contribute exactly zero") {
    const LossAndGrad lg = asymmetric_loss({0.04}, {0}, cfg, 1.0);
    CHECK(lg.value == 0.0);
    CHECK(lg.grad[0] == 0.0);
  }
  SECTION("single negative at 0.5") {
    // independent substitution: sm = 0.45, 0.45^4 * (-ln 0.55)
    const double expect = std::pow(0.45, 4.0) * (-std::log(0.55));
    const LossAndGrad lg = asymmetric_loss({0.5}, {0}, cfg, 1.0);
    CHECK(lg.value == Catch::Approx(expect));
  }
  SECTION("mu scales the loss") {
    const double base = asymmetric_loss({0.5}, {0}, cfg, 1.0).value;
    CHECK(asymmetric_loss({0.5}, {0}, cfg, 2.5).value == Catch::Approx(2.5 * base));
  }
  SECTION("length mismatch raises") {
    CHECK_THROWS_AS(asymmetric_loss({0.5, 0.5}, {0}, cfg, 1.0), ShapeError);
  }
}

TEST_CASE("asymmetric loss gradient matches finite differences") {
  const AslConfig cfg{0.0, 4.0, 0.05};
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 3 + static_cast<int>(rng.uniform_int(4));
    Vec s(k);
    std::vector<int> t(k);
    for (int i = 0; i < k; ++i) {
      t[i] = rng.uniform() < 0.4 ? 1 : 0;
      // keep clear of the clip kink at s = clip_m, where the quartic
      // negative term is too flat for finite differences to resolve
      do {
        s[i] = rng.uniform(0.01, 0.99);
      } while (std::fabs(s[i] - cfg.clip_m) < 2e-2);
    }
    const LossAndGrad lg = asymmetric_loss(s, t, cfg, 1.3);
    CHECK(lg.value >= 0.0);
    for (int i = 0; i < k; ++i) {
      const double numeric = oracle::central_diff(
          [&](double x) {
            Vec sp = s;
            sp[i] = x;
            return asymmetric_loss(sp, t, cfg, 1.3).value;
          },
          s[i]);
      INFO("trial " << trial << " index " << i << " target " << t[i]);
      CHECK(oracle::grad_matches(lg.grad[i], numeric));
    }
  }
}

TEST_CASE("asymmetric loss is monotone in each score") {
  const AslConfig cfg{0.0, 4.0, 0.05};
  Rng rng(37);
  for (int trial = 0; trial < 200; ++trial) {
    const double s = rng.uniform(0.05, 0.9);
    const double eps = 0.02;
    // positive scores: loss non-increasing
    CHECK(asymmetric_loss({s + eps}, {1}, cfg, 1.0).value <= asymmetric_loss({s}, {1}, cfg, 1.0).value + 1e-12);
    // negative scores: loss non-decreasing
    CHECK(asymmetric_loss({s + eps}, {0}, cfg, 1.0).value >= asymmetric_loss({s}, {0}, cfg, 1.0).value - 1e-12);
  }
}
