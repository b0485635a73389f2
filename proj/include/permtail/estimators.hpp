#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "permtail/errors.hpp"
#include "permtail/gpd.hpp"

namespace permtail {

enum class GpdEstimator { mom, mle2d, mle1d, lme, zse };

inline const char* to_string(GpdEstimator m) {
  switch (m) {
    case GpdEstimator::mom: return "mom";
    case GpdEstimator::mle2d: return "mle2d";
    case GpdEstimator::mle1d: return "mle1d";
    case GpdEstimator::lme: return "lme";
    case GpdEstimator::zse: return "zse";
  }
  return "?";
}

/// Support constraint on the fitted upper boundary: when active, any fit with
/// xi < 0 must satisfy -sigma/xi > bound. bound is the evaluation point plus
/// the safety margin, in units of the statistic.
struct FitConstraint {
  bool active = false;
  double bound = 0.0;
};

struct EstimatorConfig {
  GpdEstimator method = GpdEstimator::lme;
  double tol = 0.0;     // 0 -> per-method default
  double lme_r = -0.5;  // LME tuning exponent

  static double default_tol(GpdEstimator m) {
    switch (m) {
      case GpdEstimator::lme: return 1e-7;
      case GpdEstimator::mle1d: return 1e-10;
      case GpdEstimator::mle2d: return 1e-10;
      default: return 0.0;  // MOM and ZSE do not optimize
    }
  }
  double resolved_tol() const { return tol > 0.0 ? tol : default_tol(method); }
};

struct FitReport {
  bool degenerate = false;
  int evaluations = 0;
};

struct ProfileEval {
  double loglik;
  double xi_hat;
  double sigma_hat;
};

namespace detail {

// Caps for the reparametrized search variable theta = -xi/sigma. The fitted
// boundary is s = 1/theta for theta > 0, so theta < 1/bound keeps s strictly
// above the constraint bound.
inline constexpr double kThetaEdge = 1e-10;
inline constexpr double kBoundEdge = 1e-9;
inline constexpr int kMaxEval1d = 200;
inline constexpr int kMaxEval2d = 500;

struct ThetaInterval {
  double lo;
  double hi;
};

/// Search interval for theta. The lower edge scales with the median excess
/// rather than the maximum: heavy-tailed samples can have y_max far beyond
/// the bulk, which would otherwise shrink the bracket until the optimum for
/// shapes as mild as xi ~ 0.4 falls outside it.
inline ThetaInterval theta_interval(double y_max, double y_med, const FitConstraint& c) {
  double hi = (1.0 - kThetaEdge) / y_max;
  if (c.active) hi = std::min(hi, (1.0 - kBoundEdge) / c.bound);
  return {-20.0 / y_med, hi};
}

/// k_hat(theta) = -(1/n) sum ln(1 - theta*y_i); the profile estimate of -xi
/// at fixed theta. The sum runs through a blocked product (one multiply per
/// element, a log per block), except near theta = 0 where the product's
/// rounding noise would swamp the O(theta) signal and per-point log1p is
/// exact.
inline double profile_k_hat(double theta, std::span<const double> ys, double y_max) {
  if (theta == 0.0) return 0.0;
  if (std::abs(theta) * y_max < 1e-6) {
    double acc = 0.0;
    for (double y : ys) acc += std::log1p(-theta * y);
    return -acc / static_cast<double>(ys.size());
  }
  double acc = 0.0;
  double prod = 1.0;
  for (double y : ys) {
    const double w = 1.0 - theta * y;
    prod *= w;
    if (prod < 1e-280 || prod > 1e280) {
      acc += std::log(prod);
      prod = 1.0;
    }
  }
  return -(acc + std::log(prod)) / static_cast<double>(ys.size());
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline GpdParams params_from_theta(double theta, double k_hat, double mean) {
  if (theta == 0.0 || k_hat == 0.0) return {mean, 0.0};
  return {k_hat / theta, -k_hat};
}

}  // namespace detail

/// Profile log-likelihood of the reparametrized GPD at theta = -xi/sigma.
/// The shape/scale that maximize the likelihood at fixed theta are
/// xi = -k_hat(theta) and sigma = k_hat(theta)/theta, with the exponential
/// limit at theta = 0.
inline ProfileEval profile_loglik_theta(double theta, std::span<const double> excesses) {
  if (excesses.empty()) throw DomainError("profile_loglik_theta: empty excess list");
  const double y_max = *std::max_element(excesses.begin(), excesses.end());
  if (!(theta * y_max < 1.0))
    throw DomainError("profile_loglik_theta: theta must be below 1/max(excesses)");
  const double n = static_cast<double>(excesses.size());
  const double mean = detail::mean_of(excesses);
  const double k = detail::profile_k_hat(theta, excesses, y_max);
  const GpdParams p = detail::params_from_theta(theta, k, mean);
  const double ll = -n * std::log(p.sigma) + n * k - n;
  return {ll, p.xi, p.sigma};
}

namespace detail {

struct Prepared {
  std::vector<double> ys;  // ascending
  double y_max;
  double y_med;
  double mean;
};

inline Prepared prepare(std::span<const double> excesses) {
  if (excesses.size() < 5) throw DomainError("fit_gpd: need at least 5 excesses");
  Prepared out;
  out.ys.assign(excesses.begin(), excesses.end());
  std::sort(out.ys.begin(), out.ys.end());
  if (!(out.ys.front() > 0.0)) throw DomainError("fit_gpd: excesses must be positive");
  out.y_max = out.ys.back();
  out.y_med = out.ys[out.ys.size() / 2];
  out.mean = mean_of(out.ys);
  return out;
}

struct ProfilePoint {
  double theta;
  double loglik;
  double k_hat;
};

inline ProfilePoint eval_profile(double theta, const Prepared& d, FitReport* rep) {
  if (rep) ++rep->evaluations;
  const double n = static_cast<double>(d.ys.size());
  const double k = profile_k_hat(theta, d.ys, d.y_max);
  double ll;
  if (theta == 0.0 || k == 0.0) {
    ll = -n * std::log(d.mean) - n;
  } else {
    ll = -n * std::log(k / theta) + n * k - n;
  }
  return {theta, ll, k};
}

/// Candidate thetas covering the search interval: geometric on the
/// heavy-tail side (so brackets exist at every scale down to theta ~ 0),
/// uniform plus a geometric cluster toward the upper cap where the profile
/// varies fastest.
inline std::vector<double> theta_grid(const ThetaInterval& iv) {
  std::vector<double> g;
  g.reserve(48);
  for (double t = iv.lo; t < -1e-2 * std::abs(iv.hi); t *= 0.5) g.push_back(t);
  g.push_back(0.0);
  if (iv.hi > 0.0) {
    const int n_pos = 12;
    for (int i = 1; i <= n_pos; ++i)
      g.push_back(iv.hi * static_cast<double>(i) / n_pos);
    for (int t = 1; t <= 8; ++t)
      g.push_back(iv.hi * (1.0 - std::pow(10.0, -static_cast<double>(t))));
  }
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

/// Golden-section maximization of the profile log-likelihood on [lo, hi].
inline ProfilePoint golden_max(double lo, double hi, const Prepared& d, double tol,
                               int max_evals, FitReport* rep) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - invphi * (hi - lo);
  double x2 = lo + invphi * (hi - lo);
  ProfilePoint f1 = eval_profile(x1, d, rep);
  ProfilePoint f2 = eval_profile(x2, d, rep);
  ProfilePoint best = f1.loglik >= f2.loglik ? f1 : f2;
  int evals = 2;
  while (evals < max_evals && (hi - lo) > tol * (std::abs(x1) + tol)) {
    if (f1.loglik < f2.loglik) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + invphi * (hi - lo);
      f2 = eval_profile(x2, d, rep);
      if (f2.loglik > best.loglik) best = f2;
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - invphi * (hi - lo);
      f1 = eval_profile(x1, d, rep);
      if (f1.loglik > best.loglik) best = f1;
    }
    ++evals;
  }
  return best;
}

inline GpdParams fit_mom(const Prepared& d) {
  const double n = static_cast<double>(d.ys.size());
  double ss = 0.0;
  for (double y : d.ys) {
    const double c = y - d.mean;
    ss += c * c;
  }
  const double var = ss / (n - 1.0);
  const double r = d.mean * d.mean / var;
  return {d.mean * (1.0 + r) / 2.0, (1.0 - r) / 2.0};
}

inline GpdParams fit_mle1d(const Prepared& d, const FitConstraint& c, double tol,
                           FitReport* rep) {
  const ThetaInterval iv = theta_interval(d.y_max, d.y_med, c);
  const std::vector<double> grid = theta_grid(iv);
  ProfilePoint best{0.0, -std::numeric_limits<double>::infinity(), 0.0};
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const ProfilePoint p = eval_profile(grid[i], d, rep);
    if (p.loglik > best.loglik) {
      best = p;
      best_i = i;
    }
  }
  const double lo = best_i > 0 ? grid[best_i - 1] : iv.lo;
  const double hi = best_i + 1 < grid.size() ? grid[best_i + 1] : iv.hi;
  const int budget = kMaxEval1d - static_cast<int>(grid.size());
  const ProfilePoint refined = golden_max(lo, hi, d, tol, budget, rep);
  const ProfilePoint& sel = refined.loglik >= best.loglik ? refined : best;
  return params_from_theta(sel.theta, sel.k_hat, d.mean);
}

/// LME estimating equation g(theta) = mean((1-theta*y)^r) - 1/(1+r*k_hat).
/// Under the GPD, E[(1-theta*Y)^r] = 1/(1+r*k) exactly, which makes the
/// residual at the root directly testable.
inline double lme_g(double theta, double r, const Prepared& d, double* k_out, FitReport* rep) {
  if (rep) ++rep->evaluations;
  const double k = profile_k_hat(theta, d.ys, d.y_max);
  if (k_out) *k_out = k;
  double s;
  if (r == -0.5) {
    double acc = 0.0;
    for (double y : d.ys) acc += 1.0 / std::sqrt(1.0 - theta * y);
    s = acc / static_cast<double>(d.ys.size());
  } else {
    double acc = 0.0;
    for (double y : d.ys) acc += std::pow(1.0 - theta * y, r);
    s = acc / static_cast<double>(d.ys.size());
  }
  const double denom = 1.0 + r * k;
  if (denom == 0.0) return std::numeric_limits<double>::infinity();
  return s - 1.0 / denom;
}

inline GpdParams fit_lme(const Prepared& d, const FitConstraint& c, double tol, double r,
                         FitReport* rep) {
  const ThetaInterval iv = theta_interval(d.y_max, d.y_med, c);
  const std::vector<double> grid = theta_grid(iv);
  std::vector<double> gv(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) gv[i] = lme_g(grid[i], r, d, nullptr, rep);

  // theta = 0 solves g trivially (exponential limit); keep it as the base
  // candidate and add every bracketed sign-change root.
  std::vector<double> candidates{0.0};
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    double a = grid[i], b = grid[i + 1];
    double fa = gv[i], fb = gv[i + 1];
    if (!std::isfinite(fa) || !std::isfinite(fb)) continue;
    if (fa == 0.0 && a != 0.0) {
      candidates.push_back(a);
      continue;
    }
    if (fa * fb >= 0.0) continue;
    // bisection with a secant step when it stays inside the bracket
    double root = a, froot = fa;
    for (int it = 0; it < kMaxEval1d; ++it) {
      double mid = 0.5 * (a + b);
      const double denom = fb - fa;
      if (denom != 0.0) {
        const double sec = b - fb * (b - a) / denom;
        if (sec > a && sec < b) mid = sec;
      }
      const double fm = lme_g(mid, r, d, nullptr, rep);
      if (std::abs(fm) < std::abs(froot)) {
        root = mid;
        froot = fm;
      }
      if (!std::isfinite(fm)) break;
      if (std::abs(fm) <= tol || (b - a) <= 1e-14 * (std::abs(mid) + 1e-14)) break;
      if ((fa < 0.0) == (fm < 0.0)) {
        a = mid;
        fa = fm;
      } else {
        b = mid;
        fb = fm;
      }
    }
    if (std::isfinite(froot) && std::abs(froot) < 10.0 * tol) candidates.push_back(root);
  }
  if (c.active) candidates.push_back(iv.hi);

  ProfilePoint best{0.0, -std::numeric_limits<double>::infinity(), 0.0};
  for (double theta : candidates) {
    const ProfilePoint p = eval_profile(theta, d, rep);
    if (p.loglik > best.loglik) best = p;
  }
  return params_from_theta(best.theta, best.k_hat, d.mean);
}

/// Grid-weighted estimator: candidate thetas spread from 1/y_(n) downward
/// with spacing tied to a lower-quartile order statistic, weighted by the
/// profile likelihood. No optimization, hence no tolerance.
inline GpdParams fit_zse(const Prepared& d, const FitConstraint& c, FitReport* rep) {
  const std::size_t n = d.ys.size();
  const std::size_t m = 20 + static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  std::size_t q_idx = static_cast<std::size_t>(std::floor(static_cast<double>(n) / 4.0 + 0.5));
  if (q_idx == 0) q_idx = 1;
  const double y_star = d.ys[q_idx - 1];
  const double base = 1.0 / d.y_max;
  const double md = static_cast<double>(m);

  std::vector<double> thetas;
  thetas.reserve(m);
  for (std::size_t j = 1; j <= m; ++j) {
    const double theta =
        base + (1.0 - std::sqrt(md / (static_cast<double>(j) - 0.5))) / (3.0 * y_star);
    if (c.active && theta >= 1.0 / c.bound) continue;
    thetas.push_back(theta);
  }
  if (thetas.empty()) throw EstimationError("zse", "no admissible grid candidates under constraint");

  std::vector<double> ll(thetas.size());
  for (std::size_t j = 0; j < thetas.size(); ++j) ll[j] = eval_profile(thetas[j], d, rep).loglik;

  double theta_hat = 0.0;
  for (std::size_t j = 0; j < thetas.size(); ++j) {
    double denom = 0.0;
    for (std::size_t i = 0; i < thetas.size(); ++i) denom += std::exp(ll[i] - ll[j]);
    theta_hat += thetas[j] / denom;
  }
  const double k = profile_k_hat(theta_hat, d.ys, d.y_max);
  return params_from_theta(theta_hat, k, d.mean);
}

struct NmOutcome {
  std::array<double, 2> x;
  double f;
};

/// Nelder-Mead on two variables (minimization); returns the best point ever
/// evaluated. The objective is responsible for clamping into its box.
template <typename F>
inline NmOutcome nelder_mead2(F&& f, std::array<double, 2> x0, double h0, double h1,
                              double tol, int max_evals, int* evals_used) {
  struct Vertex {
    std::array<double, 2> x;
    double f;
  };
  int evals = 0;
  auto eval = [&](std::array<double, 2> x) {
    ++evals;
    return Vertex{x, f(x)};
  };
  std::array<Vertex, 3> v{eval(x0), eval({x0[0] + h0, x0[1]}), eval({x0[0], x0[1] + h1})};
  Vertex best = v[0];
  for (const auto& w : v)
    if (w.f < best.f) best = w;

  while (evals + 2 < max_evals) {
    std::sort(v.begin(), v.end(), [](const Vertex& a, const Vertex& b) { return a.f < b.f; });
    if (v[0].f < best.f) best = v[0];
    if (std::abs(v[2].f - v[0].f) <= tol * (std::abs(v[0].f) + tol)) break;
    const std::array<double, 2> c{(v[0].x[0] + v[1].x[0]) / 2.0, (v[0].x[1] + v[1].x[1]) / 2.0};
    auto blend = [&](double t) {
      return std::array<double, 2>{c[0] + t * (c[0] - v[2].x[0]), c[1] + t * (c[1] - v[2].x[1])};
    };
    Vertex refl = eval(blend(1.0));
    if (refl.f < v[0].f) {
      Vertex exp_ = eval(blend(2.0));
      v[2] = exp_.f < refl.f ? exp_ : refl;
    } else if (refl.f < v[1].f) {
      v[2] = refl;
    } else {
      Vertex ctr = eval(blend(refl.f < v[2].f ? 0.5 : -0.5));
      if (ctr.f < std::min(refl.f, v[2].f)) {
        v[2] = ctr;
      } else {
        // shrink toward the best vertex
        for (int i = 1; i < 3; ++i) {
          v[i] = eval({v[0].x[0] + 0.5 * (v[i].x[0] - v[0].x[0]),
                       v[0].x[1] + 0.5 * (v[i].x[1] - v[0].x[1])});
        }
      }
    }
    for (const auto& w : v)
      if (w.f < best.f) best = w;
  }
  if (evals_used) *evals_used += evals;
  return {best.x, best.f};
}

inline GpdParams fit_mle2d(const Prepared& d, const FitConstraint& c, double tol,
                           FitReport* rep) {
  const double inf = std::numeric_limits<double>::infinity();
  int evals = 0;
  double best_ll = -inf;
  GpdParams best{d.mean, 0.0};

  auto consider = [&](const GpdParams& p) {
    const double ll = gpd_loglik(d.ys, p);
    if (ll > best_ll) {
      best_ll = ll;
      best = p;
    }
  };

  GpdParams start_mom = fit_mom(d);
  if (start_mom.xi < 0.0 && start_mom.support_bound() <= d.y_max)
    start_mom.sigma = -start_mom.xi * d.y_max * 1.0001;
  const GpdParams start_1d = fit_mle1d(d, c, EstimatorConfig::default_tol(GpdEstimator::mle1d), rep);

  if (!c.active) {
    auto objective = [&](std::array<double, 2> x) {
      const double sigma = std::exp(std::clamp(x[0], -300.0, 300.0));
      const double xi = std::clamp(x[1], -5.0, 10.0);
      const double ll = gpd_loglik(d.ys, {sigma, xi});
      return std::isfinite(ll) ? -ll : 1e300;
    };
    for (const GpdParams& s : {start_mom, start_1d}) {
      const double xi0 = std::clamp(s.xi, -5.0, 10.0);
      auto r = nelder_mead2(objective, {std::log(s.sigma), xi0}, 0.1, 0.05, tol,
                            kMaxEval2d / 2 - 10, &evals);
      if (r.f < 1e300)
        consider({std::exp(std::clamp(r.x[0], -300.0, 300.0)), std::clamp(r.x[1], -5.0, 10.0)});
      consider(s);
    }
  } else {
    // bounded branch: boundary s in (bound, 64*bound] on a log scale, xi < 0
    const double lb = c.bound;
    auto obj_bounded = [&](std::array<double, 2> x) {
      const double u = std::clamp(x[0], 1e-9, std::log(64.0));
      const double w = std::clamp(x[1], -30.0, std::log(8.0));
      const double s = lb * std::exp(u);
      const double xi = -std::exp(w);
      const double sigma = -xi * s;
      const double ll = gpd_loglik(d.ys, {sigma, xi});
      return std::isfinite(ll) ? -ll : 1e300;
    };
    auto decode_bounded = [&](std::array<double, 2> x) {
      const double u = std::clamp(x[0], 1e-9, std::log(64.0));
      const double w = std::clamp(x[1], -30.0, std::log(8.0));
      const double s = lb * std::exp(u);
      const double xi = -std::exp(w);
      return GpdParams{-xi * s, xi};
    };
    std::vector<std::array<double, 2>> starts;
    if (start_1d.xi < 0.0 && start_1d.support_bound() > lb) {
      starts.push_back({std::log(start_1d.support_bound() / lb), std::log(-start_1d.xi)});
    }
    starts.push_back({std::log(2.0), std::log(0.1)});
    for (const auto& s0 : starts) {
      auto r = nelder_mead2(obj_bounded, s0, 0.2, 0.2, tol, kMaxEval2d / 4, &evals);
      if (r.f < 1e300) consider(decode_bounded(r.x));
    }
    // unconstrained half-space xi >= 0
    auto obj_heavy = [&](std::array<double, 2> x) {
      const double sigma = std::exp(std::clamp(x[0], -300.0, 300.0));
      const double xi = std::clamp(x[1], 0.0, 10.0);
      const double ll = gpd_loglik(d.ys, {sigma, xi});
      return std::isfinite(ll) ? -ll : 1e300;
    };
    for (const auto& s0 : {std::array<double, 2>{std::log(d.mean), 0.05},
                           std::array<double, 2>{std::log(start_mom.sigma),
                                                 std::max(start_mom.xi, 0.0)}}) {
      auto r = nelder_mead2(obj_heavy, s0, 0.1, 0.05, tol, kMaxEval2d / 4, &evals);
      if (r.f < 1e300)
        consider({std::exp(std::clamp(r.x[0], -300.0, 300.0)), std::clamp(r.x[1], 0.0, 10.0)});
    }
  }
  if (rep) rep->evaluations += evals;
  if (!std::isfinite(best_ll))
    throw EstimationError("mle2d", "no admissible optimum found");
  return best;
}

}  // namespace detail

/// Fits GPD parameters to threshold excesses. All optimizer-based methods
/// honor an active support constraint by restricting theta = -xi/sigma to
/// theta < 1/bound, so that a bounded fit always satisfies -sigma/xi > bound.
/// MOM cannot incorporate the constraint and rejects it.
inline GpdParams fit_gpd(std::span<const double> excesses, const EstimatorConfig& cfg,
                         const FitConstraint& constraint = {}, FitReport* report = nullptr) {
  if (constraint.active && !(constraint.bound > 0.0 && std::isfinite(constraint.bound)))
    throw ParameterError("fit_gpd: constraint bound must be positive and finite");
  if (constraint.active && cfg.method == GpdEstimator::mom)
    throw UnsupportedCombination("fit_gpd: MOM cannot enforce a support constraint");

  const detail::Prepared d = detail::prepare(excesses);
  if (d.ys.front() == d.ys.back()) {
    // zero variance: point-mass adjacent fit
    if (report) report->degenerate = true;
    return {d.ys.back(), -1.0};
  }

  const double tol = cfg.resolved_tol();
  switch (cfg.method) {
    case GpdEstimator::mom: return detail::fit_mom(d);
    case GpdEstimator::mle1d: return detail::fit_mle1d(d, constraint, tol, report);
    case GpdEstimator::lme: return detail::fit_lme(d, constraint, tol, cfg.lme_r, report);
    case GpdEstimator::zse: return detail::fit_zse(d, constraint, report);
    case GpdEstimator::mle2d: return detail::fit_mle2d(d, constraint, tol, report);
  }
  throw ConfigError("fit_gpd: unknown estimator");
}

}  // namespace permtail
