#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "permtail/simharness.hpp"

using namespace permtail;
using Catch::Approx;

TEST_CASE("t-test replicate shape and determinism", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::gaussian_ttest;
  spec.n = 50;
  spec.d = 1.0;
  spec.B = 200;
  spec.seed = 31;
  const auto a = simulate_ttest_replicate(spec, 3);
  CHECK(a.perms.size() == spec.B);  // exactly B permuted statistics
  CHECK(a.reference_p > 0.0);
  const auto b = simulate_ttest_replicate(spec, 3);
  CHECK(a.stat_obs == b.stat_obs);
  CHECK(a.perms == b.perms);
  const auto c = simulate_ttest_replicate(spec, 4);
  CHECK(a.stat_obs != c.stat_obs);
}

TEST_CASE("null t-test reference p-values are near uniform", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::gaussian_ttest;
  spec.n = 40;
  spec.d = 0.0;
  spec.B = 1;  // permutations unused here
  spec.seed = 97;
  const int reps = 500;
  std::vector<double> ps(reps);
  for (int rep = 0; rep < reps; ++rep) ps[rep] = simulate_ttest_replicate(spec, rep).reference_p;
  std::sort(ps.begin(), ps.end());
  double ks = 0.0;
  for (int i = 0; i < reps; ++i) {
    const double ecdf_hi = static_cast<double>(i + 1) / reps;
    const double ecdf_lo = static_cast<double>(i) / reps;
    ks = std::max({ks, std::abs(ecdf_hi - ps[i]), std::abs(ps[i] - ecdf_lo)});
  }
  CHECK(ks < 0.1);
}

TEST_CASE("strong effects push the t reference deep into the tail", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::gaussian_ttest;
  spec.n = 100;
  spec.d = 1.0;
  spec.B = 1;
  spec.seed = 13;
  int tiny = 0;
  for (int rep = 0; rep < 50; ++rep)
    tiny += simulate_ttest_replicate(spec, rep).reference_p < 1e-6 ? 1 : 0;
  CHECK(tiny >= 45);
}

TEST_CASE("wilcoxon null U centers at n^2/2", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::exponential_wilcoxon;
  spec.n = 30;
  spec.d = 0.0;
  spec.B = 1;
  spec.seed = 7;
  double acc = 0.0;
  const int reps = 400;
  for (int rep = 0; rep < reps; ++rep) acc += simulate_wilcoxon_replicate(spec, rep).raw_stat;
  const double mean_u = acc / reps;
  const double expected = 30.0 * 30.0 / 2.0;
  const double sd_u = std::sqrt(30.0 * 30.0 * 61.0 / 12.0);
  CHECK(std::abs(mean_u - expected) < 4.0 * sd_u / std::sqrt(static_cast<double>(reps)));
}

TEST_CASE("tiny-n permutation p agrees with exact enumeration", "[simharness]") {
  // n = 5 per group: 252 label splits in total; the permutation p over all
  // splits must match the exact two-sided enumeration oracle
  ScenarioSpec spec;
  spec.family = ScenarioFamily::exponential_wilcoxon;
  spec.n = 5;
  spec.d = 1.0;
  spec.B = 40000;  // large B: the sampled permutation p converges to exact
  spec.seed = 11;
  const auto r = simulate_wilcoxon_replicate(spec, 2);
  std::size_t count = 0;
  for (double v : r.perms) count += std::abs(v) >= std::abs(r.stat_obs) ? 1 : 0;
  const double p_perm = (1.0 + count) / (1.0 + spec.B);
  CHECK(p_perm == Approx(r.reference_p).margin(0.02));
}

TEST_CASE("large effects give tiny wilcoxon reference p", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::exponential_wilcoxon;
  spec.n = 250;
  spec.d = 2.0;
  spec.B = 1;
  spec.seed = 3;
  int tiny = 0;
  for (int rep = 0; rep < 20; ++rep)
    tiny += simulate_wilcoxon_replicate(spec, rep).reference_p < 1e-10 ? 1 : 0;
  CHECK(tiny >= 16);
}

TEST_CASE("battery preserves group structure and is thread-invariant", "[simharness]") {
  const std::vector<double> ds{0.0, 1.0};
  const auto one = make_battery(ScenarioFamily::exponential_wilcoxon, ds, 4, 25, 150, 5, 1);
  const auto two = make_battery(ScenarioFamily::exponential_wilcoxon, ds, 4, 25, 150, 5, 4);
  REQUIRE(one.data.num_tests() == 8);
  CHECK(one.data.t_obs == two.data.t_obs);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(one.data.perms[j] == two.data.perms[j]);
    CHECK(one.data.perms[j].size() == 150);
  }
  CHECK(one.reference_p == two.reference_p);
  CHECK(one.effect_sizes == std::vector<double>{0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0});
}

TEST_CASE("permutation engine preserves group sizes", "[simharness]") {
  // the centered U statistic of any permutation stays inside its exact range
  // [-n^2/2, n^2/2]; a broken shuffle (unequal group sizes) would escape it
  ScenarioSpec spec;
  spec.family = ScenarioFamily::exponential_wilcoxon;
  spec.n = 20;
  spec.d = 0.5;
  spec.B = 2000;
  spec.seed = 23;
  const auto r = simulate_wilcoxon_replicate(spec, 0);
  const double half_range = 20.0 * 20.0 / 2.0;
  for (double v : r.perms) {
    CHECK(v >= -half_range - 1e-9);
    CHECK(v <= half_range + 1e-9);
  }
}

TEST_CASE("comparison rows are complete and thread-invariant", "[simharness]") {
  ScenarioSpec spec;
  spec.family = ScenarioFamily::gaussian_ttest;
  spec.n = 25;
  spec.d = 1.5;
  spec.B = 300;
  spec.reps = 4;
  spec.seed = 41;
  const std::vector<Comparator> methods{Comparator::constrained_default, Comparator::gamma_full};
  const auto a = run_comparison(spec, methods, 1);
  const auto b = run_comparison(spec, methods, 4);
  REQUIRE(a.size() == spec.reps * methods.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].p_method == b[i].p_method);
    CHECK(a[i].rep == b[i].rep);
    CHECK(a[i].method == b[i].method);
  }
}

TEST_CASE("estimator benchmark table", "[simharness]") {
  BenchSpec spec;
  spec.xi0 = {-0.2, 0.0};
  spec.ns = {100, 400};
  spec.methods = {GpdEstimator::lme, GpdEstimator::mom};
  spec.reps = 60;
  spec.seed = 77;
  const auto cells = estimator_benchmark(spec, 2);
  REQUIRE(cells.size() == 2 * 2 * 2);
  for (const auto& c : cells) {
    CHECK(c.rmse_xi > 0.0);
    CHECK(c.rmse_xi < 0.5);
    CHECK(c.failures == 0);
  }
  // RMSE decreases with sample size in every (method, xi0) cell
  for (double xi0 : spec.xi0) {
    for (auto m : spec.methods) {
      double r100 = 0.0, r400 = 0.0;
      for (const auto& c : cells) {
        if (c.xi0 == xi0 && c.method == m) (c.n == 100 ? r100 : r400) = c.rmse_xi;
      }
      CHECK(r400 < r100);
    }
  }
}

TEST_CASE("benchmark reproduces the qualitative estimator ordering", "[simharness]") {
  BenchSpec spec;
  spec.xi0 = {-0.4, 0.0};
  spec.ns = {1000};
  spec.reps = 150;
  spec.seed = 4242;
  const auto cells = estimator_benchmark(spec, 2);
  auto rmse_of = [&](GpdEstimator m, double xi0) {
    for (const auto& c : cells)
      if (c.method == m && c.xi0 == xi0) return c.rmse_xi;
    FAIL("cell missing");
    return 0.0;
  };
  auto min_rmse = [&](double xi0) {
    double best = 1e9;
    for (const auto& c : cells)
      if (c.xi0 == xi0) best = std::min(best, c.rmse_xi);
    return best;
  };
  // near-zero shape: the moment estimator is among the best
  CHECK(rmse_of(GpdEstimator::mom, 0.0) <= 1.5 * min_rmse(0.0));
  // bounded shape: LME stays within 1.5x of the best method
  CHECK(rmse_of(GpdEstimator::lme, -0.4) <= 1.5 * min_rmse(-0.4));
}
