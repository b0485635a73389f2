#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "permtail/errors.hpp"

namespace permtail {

enum class ZcapPolicy { auto_select, max_over_tests, perm_quantile };

inline const char* to_string(ZcapPolicy p) {
  switch (p) {
    case ZcapPolicy::auto_select: return "auto";
    case ZcapPolicy::max_over_tests: return "max";
    case ZcapPolicy::perm_quantile: return "quantile";
  }
  return "?";
}

/// Tuning constants of the standardized lifted log-saturation margin rule.
/// Curvature and plateau scale with the per-group sample size relative to
/// n_ref; when group sizes differ n_eff is min(n1, n2).
struct SllsConfig {
  double kappa_factor = 1000.0;
  double tau = 0.25;
  double rho_lift = 0.025;
  double eps_min = 1e-6;  // standardized units
  double n_ref = 500.0;
  double n_eff = 0.0;  // 0 -> n_ref (neutral scaling when group sizes are unknown)
  ZcapPolicy zcap_policy = ZcapPolicy::auto_select;
  double zcap_quantile = 0.999;

  double effective_n() const { return n_eff > 0.0 ? n_eff : n_ref; }
  double kappa() const { return kappa_factor * n_ref / effective_n(); }
  double eps_star_max() const { return tau * n_ref / effective_n(); }

  void validate() const {
    if (!(kappa_factor > 0.0) || !(tau > 0.0) || !(rho_lift >= 0.0) || !(eps_min > 0.0) ||
        !(n_ref > 0.0) || !(n_eff >= 0.0))
      throw ConfigError("SllsConfig: kappa_factor, tau, eps_min, n_ref must be positive");
    if (!(zcap_quantile > 0.0 && zcap_quantile < 1.0))
      throw ConfigError("SllsConfig: zcap quantile must be in (0,1)");
  }
};

/// Scale-free position of the observed statistic: l = min(z_obs/z_cap, 1).
struct StandardizedPosition {
  double z_obs = 0.0;
  double z_cap = 1.0;
  double l = 0.0;

  static StandardizedPosition make(double z_obs, double z_cap) {
    if (!(z_cap > 0.0)) throw DomainError("StandardizedPosition: z_cap must be positive");
    const double l = std::clamp(z_obs / z_cap, 0.0, 1.0);
    return {z_obs, z_cap, l};
  }
};

/// Compactly supported Wendland C2 kernel psi(l) = (1-l)^4 (1+4l); the
/// localized lift that raises the margin at small to moderate l and vanishes
/// smoothly at l = 1.
inline double wendland(double l) {
  l = std::clamp(l, 0.0, 1.0);
  const double a = 1.0 - l;
  const double a2 = a * a;
  return a2 * a2 * (1.0 + 4.0 * l);
}

/// Standardized margin: log-saturation toward eps_star_max plus the Wendland
/// lift, floored at eps_min.
inline double slls_epsilon_standardized(double l, const SllsConfig& cfg) {
  cfg.validate();
  l = std::clamp(l, 0.0, 1.0);
  const double kappa = cfg.kappa();
  const double sat = cfg.eps_star_max() * std::log1p(kappa * l) / std::log1p(kappa);
  return std::max(sat + cfg.rho_lift * wendland(l), cfg.eps_min);
}

/// Margin on the scale of the test statistic: eps = perm_sd * eps_star.
inline double slls_epsilon(const StandardizedPosition& pos, const SllsConfig& cfg,
                           double perm_sd) {
  if (!(perm_sd > 0.0))
    throw DomainError("slls_epsilon: degenerate permutation distribution (sd <= 0)");
  return perm_sd * slls_epsilon_standardized(pos.l, cfg);
}

/// Type-7 empirical quantile (linear interpolation between order statistics).
inline double empirical_quantile(std::span<const double> values, double q) {
  if (values.empty()) throw DomainError("empirical_quantile: empty input");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  const double f = h - static_cast<double>(lo);
  return v[lo] + f * (v[lo + 1] - v[lo]);
}

/// Standardized cap for the SLLS rule. max_over_tests uses the largest
/// standardized observed statistic; perm_quantile uses a high quantile of the
/// standardized permutation values (recommended for single or few tests).
inline double compute_zcap(std::span<const double> all_z_obs, std::span<const double> perm_z,
                           ZcapPolicy policy, double q = 0.999) {
  switch (policy) {
    case ZcapPolicy::max_over_tests: {
      if (all_z_obs.empty()) throw ConfigError("compute_zcap: no observed statistics");
      return *std::max_element(all_z_obs.begin(), all_z_obs.end());
    }
    case ZcapPolicy::perm_quantile: {
      if (perm_z.empty()) throw ConfigError("compute_zcap: no permutation values");
      return empirical_quantile(perm_z, q);
    }
    case ZcapPolicy::auto_select:
      throw ConfigError("compute_zcap: policy must be resolved before the call");
  }
  throw ConfigError("compute_zcap: unknown policy");
}

/// Underflow threshold: smallest positive normal double.
inline constexpr double kUnderflowMin = std::numeric_limits<double>::min();

struct RefineConfig {
  double step_init = 10.0;
  double grow = 1.6180339887498949;  // golden ratio
  int max_expand = 20;
  double bisect_tol = 0.1;
  int max_bisect = 30;
};

struct RefineResult {
  double tau_star = 0.0;
  bool expansion_capped = false;
  std::size_t search_refits = 0;  // per-test refits during the search phases
  std::vector<double> pvalues;    // aligned with the selected-test order
};

/// Callback contract: recompute p-values at plateau factor tau for the given
/// subset of selected-test positions, returned in the same order.
using RefineCallback =
    std::function<std::vector<double>(double tau, std::span<const std::size_t> subset)>;

/// Two-phase search for the smallest tau eliminating machine-underflow
/// p-values: additive expansion with geometric step growth brackets a
/// zero-underflow tau, then bisection narrows the bracket. Only tests that
/// still underflow are refit while searching; one full refit at tau_star
/// produces the final p-values.
inline RefineResult refine_tau(const RefineCallback& refit, std::vector<double> current_pvalues,
                               double tau0, const RefineConfig& cfg = {}) {
  const std::size_t n = current_pvalues.size();
  auto underflowing = [&](std::span<const std::size_t> among) {
    std::vector<std::size_t> out;
    for (std::size_t i : among)
      if (current_pvalues[i] <= kUnderflowMin) out.push_back(i);
    return out;
  };
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;

  RefineResult res;
  std::vector<std::size_t> zset = underflowing(all);
  if (zset.empty()) {
    res.tau_star = tau0;
    res.pvalues = std::move(current_pvalues);
    return res;
  }

  auto run_callback = [&refit](double tau, std::span<const std::size_t> subset) {
    try {
      return refit(tau, subset);
    } catch (const std::exception& e) {
      throw EstimationError("refine_tau",
                            "refit failed at tau=" + std::to_string(tau) + ": " + e.what());
    }
  };
  auto refit_subset = [&](double tau, const std::vector<std::size_t>& subset) {
    const std::vector<double> ps = run_callback(tau, subset);
    res.search_refits += subset.size();
    for (std::size_t i = 0; i < subset.size(); ++i) current_pvalues[subset[i]] = ps[i];
  };

  // Phase 1: expand until no test underflows.
  double tau_lo = tau0;
  double tau = tau0;
  double step = cfg.step_init;
  bool bracketed = false;
  for (int it = 0; it < cfg.max_expand; ++it) {
    tau += step;
    step *= cfg.grow;
    refit_subset(tau, zset);
    const std::vector<std::size_t> still = underflowing(zset);
    if (still.empty()) {
      bracketed = true;
      break;
    }
    tau_lo = tau;
    zset = still;
  }
  if (!bracketed) {
    res.tau_star = tau;
    res.expansion_capped = true;
    res.pvalues = run_callback(tau, all);
    return res;
  }

  // Phase 2: bisect [tau_lo, tau_hi]; tests clean at a larger tau can
  // underflow again at the midpoint, so the refit set is the underflow set
  // of the current lower edge.
  double tau_hi = tau;
  for (int it = 0; it < cfg.max_bisect && (tau_hi - tau_lo) > cfg.bisect_tol; ++it) {
    const double mid = 0.5 * (tau_lo + tau_hi);
    refit_subset(mid, zset);
    const std::vector<std::size_t> still = underflowing(zset);
    if (still.empty()) {
      tau_hi = mid;
    } else {
      tau_lo = mid;
      zset = still;
    }
  }
  res.tau_star = tau_hi;
  res.pvalues = run_callback(tau_hi, all);
  return res;
}

}  // namespace permtail
