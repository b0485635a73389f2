#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "permtail/epsilon.hpp"
#include "permtail/rng.hpp"

using namespace permtail;
using Catch::Approx;

TEST_CASE("wendland kernel values", "[epsilon]") {
  CHECK(wendland(0.0) == 1.0);
  CHECK(wendland(1.0) == 0.0);
  CHECK(wendland(0.5) == Approx(0.0625 * 3.0).epsilon(1e-12));
  // clamped outside [0,1]
  CHECK(wendland(-0.3) == 1.0);
  CHECK(wendland(1.7) == 0.0);
}

TEST_CASE("margin endpoints", "[epsilon]") {
  SllsConfig cfg;  // defaults: kappa_factor 1000, tau 0.25, rho 0.025, n_ref 500
  cfg.n_eff = 500;
  CHECK(slls_epsilon_standardized(1.0, cfg) == Approx(0.25).epsilon(1e-14));
  CHECK(slls_epsilon_standardized(0.0, cfg) == Approx(std::max(0.025, 1e-6)).epsilon(1e-14));

  cfg.n_eff = 250;
  CHECK(slls_epsilon_standardized(1.0, cfg) == Approx(0.5).epsilon(1e-14));

  // floor binds when both components are tiny
  cfg.n_eff = 500;
  cfg.rho_lift = 0.0;
  CHECK(slls_epsilon_standardized(0.0, cfg) == cfg.eps_min);
}

TEST_CASE("margin scales linearly in the permutation sd", "[epsilon]") {
  SllsConfig cfg;
  cfg.n_eff = 500;
  const auto pos = StandardizedPosition::make(2.0, 4.0);
  const double base = slls_epsilon(pos, cfg, 1.0);
  CHECK(slls_epsilon(pos, cfg, 3.5) == Approx(3.5 * base).epsilon(1e-14));
  CHECK_THROWS_AS(slls_epsilon(pos, cfg, 0.0), DomainError);
}

TEST_CASE("plateau and curvature halve and double with n", "[epsilon]") {
  SllsConfig cfg;
  cfg.n_eff = 500;
  const double em_500 = cfg.eps_star_max();
  const double kp_500 = cfg.kappa();
  cfg.n_eff = 1000;
  CHECK(cfg.eps_star_max() == em_500 / 2.0);
  CHECK(cfg.kappa() == kp_500 / 2.0);
  cfg.n_eff = 250;
  CHECK(cfg.eps_star_max() == em_500 * 2.0);
  CHECK(cfg.kappa() == kp_500 * 2.0);
}

TEST_CASE("standardized position clamps at the cap", "[epsilon]") {
  const auto below = StandardizedPosition::make(2.0, 4.0);
  CHECK(below.l == 0.5);
  const auto above = StandardizedPosition::make(9.0, 4.0);
  CHECK(above.l == 1.0);
  CHECK_THROWS_AS(StandardizedPosition::make(1.0, 0.0), DomainError);
}

TEST_CASE("zcap policies", "[epsilon]") {
  const std::vector<double> z_obs{1.0, 4.0, 2.5};
  CHECK(compute_zcap(z_obs, {}, ZcapPolicy::max_over_tests) == 4.0);
  CHECK_THROWS_AS(compute_zcap({}, {}, ZcapPolicy::max_over_tests), ConfigError);
  CHECK_THROWS_AS(compute_zcap(z_obs, {}, ZcapPolicy::perm_quantile), ConfigError);
  CHECK_THROWS_AS(compute_zcap(z_obs, z_obs, ZcapPolicy::auto_select), ConfigError);

  // standard-normal-like permutation values: 0.999 quantile near 3.09
  Xoshiro256pp rng(4096);
  std::vector<double> z(100000);
  for (auto& v : z) v = rng.normal();
  const double cap = compute_zcap({}, z, ZcapPolicy::perm_quantile, 0.999);
  CHECK(cap == Approx(3.09).margin(0.2));
}

namespace {

// synthetic monotone underflow model: p(tau) crosses the underflow line
// exactly at tau = tau_edge
RefineCallback edge_callback(const std::vector<double>& tau_edges) {
  return [&tau_edges](double tau, std::span<const std::size_t> subset) {
    std::vector<double> out(subset.size());
    for (std::size_t i = 0; i < subset.size(); ++i)
      out[i] = tau >= tau_edges[subset[i]] ? 1e-200 : 0.0;
    return out;
  };
}

}  // namespace

TEST_CASE("refinement finds the underflow edge", "[epsilon]") {
  const std::vector<double> edges{12.3};
  const auto cb = edge_callback(edges);
  const auto res = refine_tau(cb, {0.0}, 0.25);
  CHECK_FALSE(res.expansion_capped);
  REQUIRE(res.pvalues.size() == 1);
  CHECK(res.pvalues[0] > kUnderflowMin);

  // grid-scan oracle at resolution 0.01
  double tau_grid = 0.25;
  while (cb(tau_grid, std::vector<std::size_t>{0})[0] <= kUnderflowMin) tau_grid += 0.01;
  CHECK(std::abs(res.tau_star - tau_grid) <= 0.1 + 0.01);
}

TEST_CASE("no underflow returns tau unchanged with no refits", "[epsilon]") {
  std::size_t calls = 0;
  RefineCallback cb = [&](double, std::span<const std::size_t> subset) {
    ++calls;
    return std::vector<double>(subset.size(), 0.5);
  };
  const auto res = refine_tau(cb, {0.5, 0.3}, 0.25);
  CHECK(res.tau_star == 0.25);
  CHECK(res.search_refits == 0);
  CHECK(calls == 0);
  CHECK(res.pvalues == std::vector<double>{0.5, 0.3});
}

TEST_CASE("search refit count respects the bound", "[epsilon]") {
  const std::vector<double> edges{3.0, 40.0, 200.0, 0.5};
  const auto cb = edge_callback(edges);
  const auto res = refine_tau(cb, {0.0, 0.0, 0.0, 1e-100}, 0.25);
  // initial underflow set has three members (the fourth starts clean)
  CHECK(res.search_refits <= (20 + 30) * 3);
  CHECK_FALSE(res.expansion_capped);
  for (double p : res.pvalues) CHECK(p > kUnderflowMin);
  CHECK(res.tau_star >= 200.0 - 0.11);
}

TEST_CASE("expansion cap is flagged", "[epsilon]") {
  RefineCallback cb = [](double, std::span<const std::size_t> subset) {
    return std::vector<double>(subset.size(), 0.0);  // never clears
  };
  RefineConfig cfg;
  cfg.max_expand = 5;
  const auto res = refine_tau(cb, {0.0}, 0.25, cfg);
  CHECK(res.expansion_capped);
  CHECK(res.search_refits == 5);
}

TEST_CASE("config validation", "[epsilon]") {
  SllsConfig cfg;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  SllsConfig cfg2;
  cfg2.zcap_quantile = 1.0;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
}

TEST_CASE("margin never drops below the floor", "[epsilon]") {
  Xoshiro256pp rng(222);
  for (int rep = 0; rep < 500; ++rep) {
    SllsConfig cfg;
    cfg.n_eff = 25.0 + rng.below(2000);
    cfg.rho_lift = rng.uniform() * 0.05;
    cfg.eps_min = 1e-6 + rng.uniform() * 1e-3;
    const double l = rng.uniform();
    CHECK(slls_epsilon_standardized(l, cfg) >= cfg.eps_min);
  }
}

TEST_CASE("callback failures carry the tau context", "[epsilon]") {
  RefineCallback cb = [](double, std::span<const std::size_t>) -> std::vector<double> {
    throw std::runtime_error("backend unavailable");
  };
  try {
    refine_tau(cb, {0.0}, 0.25);
    FAIL("expected EstimationError");
  } catch (const EstimationError& e) {
    CHECK(std::string(e.what()).find("tau=") != std::string::npos);
    CHECK(std::string(e.what()).find("backend unavailable") != std::string::npos);
  }
}
