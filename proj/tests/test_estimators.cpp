#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "permtail/estimators.hpp"
#include "permtail/gpd.hpp"
#include "permtail/rng.hpp"

using namespace permtail;
using Catch::Approx;

namespace {

std::vector<double> fuzz_excesses(Xoshiro256pp& rng, std::size_t n) {
  const GpdParams truth{0.5 + 1.5 * rng.uniform(), -0.5 + rng.uniform()};
  return gpd_sample(n, truth, rng.next());
}

}  // namespace

TEST_CASE("moment estimator identities", "[estimators]") {
  // data built so that mean^2 == sample variance  =>  xi_hat = 0,
  // sigma_hat = mean: three of c-d and three of c+d with d = c*sqrt(5/6)
  const double c = 3.0, d = c * std::sqrt(5.0 / 6.0);
  const std::vector<double> ys{c - d, c - d, c - d, c + d, c + d, c + d};
  const GpdParams fit = fit_gpd(ys, {GpdEstimator::mom});
  CHECK(fit.xi == Approx(0.0).margin(1e-12));
  CHECK(fit.sigma == Approx(3.0).epsilon(1e-12));
}

TEST_CASE("moment estimator rejects the constraint", "[estimators]") {
  const auto ys = gpd_sample(50, {1.0, 0.0}, 4);
  CHECK_THROWS_AS(fit_gpd(ys, {GpdEstimator::mom}, {true, 100.0}), UnsupportedCombination);
}

TEST_CASE("profile log-likelihood arithmetic", "[estimators]") {
  const std::vector<double> ys{1.0, 2.0};
  const auto eval = profile_loglik_theta(0.1, ys);
  const double k_hat = -(std::log(0.9) + std::log(0.8)) / 2.0;
  CHECK(k_hat == Approx(0.16425).margin(5e-6));
  CHECK(eval.xi_hat == Approx(-k_hat).epsilon(1e-12));
  CHECK(eval.sigma_hat == Approx(k_hat / 0.1).epsilon(1e-12));
  const double expected_ll = -2.0 * std::log(k_hat / 0.1) + 2.0 * k_hat - 2.0;
  CHECK(eval.loglik == Approx(expected_ll).epsilon(1e-12));
}

TEST_CASE("profile log-likelihood exponential limit", "[estimators]") {
  const std::vector<double> ys{1.0, 2.0, 3.0};
  const auto at_zero = profile_loglik_theta(0.0, ys);
  CHECK(at_zero.xi_hat == 0.0);
  CHECK(at_zero.sigma_hat == Approx(2.0).epsilon(1e-12));
  const auto near_zero = profile_loglik_theta(1e-12, ys);
  CHECK(near_zero.xi_hat == Approx(0.0).margin(1e-9));
  CHECK(near_zero.sigma_hat == Approx(2.0).margin(1e-9));
  CHECK(near_zero.loglik == Approx(at_zero.loglik).margin(1e-9));

  CHECK_THROWS_AS(profile_loglik_theta(0.5, ys), DomainError);  // 1/max = 1/3
}

TEST_CASE("mle1d beats every grid theta", "[estimators]") {
  const auto ys = gpd_sample(400, {1.0, -0.3}, 11);
  const GpdParams fit = fit_gpd(ys, {GpdEstimator::mle1d});
  const double theta_hat = fit.xi == 0.0 ? 0.0 : -fit.xi / fit.sigma;
  const double ll_hat = profile_loglik_theta(theta_hat, ys).loglik;
  const double y_max = *std::max_element(ys.begin(), ys.end());
  for (int i = 0; i <= 200; ++i) {
    const double theta =
        -2.0 + (static_cast<double>(i) / 200.0) * (2.0 + (1.0 - 1e-9) / y_max);
    if (!(theta * y_max < 1.0)) continue;
    CHECK(ll_hat >= profile_loglik_theta(theta, ys).loglik - 1e-7);
  }
}

TEST_CASE("constrained fits keep the boundary above the bound", "[estimators]") {
  // 1000 fuzzed datasets across all constrained methods
  Xoshiro256pp rng(500);
  const GpdEstimator methods[4] = {GpdEstimator::lme, GpdEstimator::mle1d, GpdEstimator::mle2d,
                                   GpdEstimator::zse};
  int checked = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto ys = fuzz_excesses(rng, 50 + rng.below(200));
    const double y_max = *std::max_element(ys.begin(), ys.end());
    const double bound = y_max * (1.05 + 2.0 * rng.uniform());
    const EstimatorConfig cfg{methods[rep % 4]};
    GpdParams fit;
    try {
      fit = fit_gpd(ys, cfg, {true, bound});
    } catch (const EstimationError&) {
      continue;
    }
    if (fit.xi < 0.0) {
      ++checked;
      CHECK(-fit.sigma / fit.xi > bound);
      CHECK(gpd_survival(y_max, fit) > 0.0);
    }
  }
  CHECK(checked > 200);
}

TEST_CASE("constrained mle1d example", "[estimators]") {
  const auto ys = gpd_sample(500, {1.0, -0.2}, 21);  // boundary at 5
  const GpdParams fit = fit_gpd(ys, {GpdEstimator::mle1d}, {true, 7.0});
  if (fit.xi < 0.0) CHECK(fit.support_bound() > 7.0);
  CHECK(gpd_survival(7.0, fit) >= 0.0);
  CHECK(gpd_survival(6.999, fit) > 0.0);
}

TEST_CASE("estimator consistency sweep", "[estimators]") {
  // smaller companion of the acceptance criterion
  for (double xi0 : {-0.4, 0.0, 0.4}) {
    for (const GpdEstimator m : {GpdEstimator::lme, GpdEstimator::mle1d, GpdEstimator::zse}) {
      double acc = 0.0;
      const int reps = 40;
      for (int rep = 0; rep < reps; ++rep) {
        const auto ys = gpd_sample(1000, {1.0, xi0}, derive_stream(42 + rep, rep * 3 + 1));
        const GpdParams fit = fit_gpd(ys, {m});
        acc += std::abs(fit.xi - xi0);
      }
      INFO(to_string(m) << " at xi0=" << xi0);
      CHECK(acc / reps < 0.1);
    }
  }
}

TEST_CASE("mle2d dominates mom on the likelihood", "[estimators]") {
  Xoshiro256pp rng(9001);
  for (int rep = 0; rep < 60; ++rep) {
    const auto ys = fuzz_excesses(rng, 100 + rng.below(200));
    const GpdParams mle = fit_gpd(ys, {GpdEstimator::mle2d});
    GpdParams mom;
    try {
      mom = fit_gpd(ys, {GpdEstimator::mom});
    } catch (const EstimationError&) {
      continue;
    }
    CHECK(gpd_loglik(ys, mle) >= gpd_loglik(ys, mom) - 1e-6);
  }
}

TEST_CASE("lme estimating equation residual at the root", "[estimators]") {
  const double r = -0.5;
  const double tol = EstimatorConfig::default_tol(GpdEstimator::lme);
  Xoshiro256pp rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    const auto ys = fuzz_excesses(rng, 200 + rng.below(300));
    const GpdParams fit = fit_gpd(ys, {GpdEstimator::lme});
    const double theta = fit.xi == 0.0 ? 0.0 : -fit.xi / fit.sigma;
    const double n = static_cast<double>(ys.size());
    double s = 0.0, lk = 0.0;
    for (double y : ys) {
      s += std::pow(1.0 - theta * y, r);
      lk += std::log1p(-theta * y);
    }
    const double k_hat = -lk / n;
    const double g = s / n - 1.0 / (1.0 + r * k_hat);
    CHECK(std::abs(g) < 10.0 * tol);
  }
}

TEST_CASE("fits are deterministic", "[estimators]") {
  const auto ys = gpd_sample(300, {1.2, -0.15}, 8);
  for (const GpdEstimator m : {GpdEstimator::mom, GpdEstimator::mle1d, GpdEstimator::mle2d,
                               GpdEstimator::lme, GpdEstimator::zse}) {
    const GpdParams a = fit_gpd(ys, {m});
    const GpdParams b = fit_gpd(ys, {m});
    CHECK(a.sigma == b.sigma);
    CHECK(a.xi == b.xi);
  }
}

TEST_CASE("degenerate input yields the point-mass adjacent fit", "[estimators]") {
  const std::vector<double> ys(12, 2.5);
  FitReport report;
  const GpdParams fit = fit_gpd(ys, {GpdEstimator::lme}, {}, &report);
  CHECK(report.degenerate);
  CHECK(fit.xi == -1.0);
  CHECK(fit.sigma == 2.5);
}

TEST_CASE("input validation", "[estimators]") {
  CHECK_THROWS_AS(fit_gpd(std::vector<double>{1.0, 2.0}, {GpdEstimator::lme}), DomainError);
  CHECK_THROWS_AS(fit_gpd(std::vector<double>{1.0, 2.0, 3.0, -1.0, 2.0}, {GpdEstimator::lme}),
                  DomainError);
  const auto ys = gpd_sample(50, {1.0, 0.0}, 3);
  CHECK_THROWS_AS(fit_gpd(ys, {GpdEstimator::lme}, {true, -1.0}), ParameterError);
}

TEST_CASE("per-method default tolerances", "[estimators]") {
  CHECK(EstimatorConfig::default_tol(GpdEstimator::lme) == 1e-7);
  CHECK(EstimatorConfig::default_tol(GpdEstimator::mle1d) == 1e-10);
  CHECK(EstimatorConfig::default_tol(GpdEstimator::mle2d) == 1e-10);
  EstimatorConfig cfg{GpdEstimator::lme};
  CHECK(cfg.resolved_tol() == 1e-7);
  cfg.tol = 1e-9;
  CHECK(cfg.resolved_tol() == 1e-9);
}
