#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "permtail/errors.hpp"
#include "permtail/rng.hpp"

namespace permtail {

/// Below this |xi| the exponential branch is used, with a first-order xi
/// correction in log space. Avoids catastrophic cancellation in
/// (1 + xi*y/sigma)^(-1/xi).
inline constexpr double kXiSwitch = 1e-8;

/// Generalized Pareto parameters: scale sigma > 0 (units of the test
/// statistic) and shape xi (dimensionless). For xi < 0 the support is
/// [0, -sigma/xi]; otherwise [0, inf).
struct GpdParams {
  double sigma = 1.0;
  double xi = 0.0;

  /// Upper support boundary; finite iff xi < 0.
  double support_bound() const {
    return xi < 0.0 ? -sigma / xi : std::numeric_limits<double>::infinity();
  }
};

namespace detail {

inline void check_params(const GpdParams& p) {
  if (!(p.sigma > 0.0) || !std::isfinite(p.sigma) || !std::isfinite(p.xi))
    throw ParameterError("GpdParams: sigma must be positive and finite");
}

inline void check_nonneg(double y) {
  if (!(y >= 0.0)) throw DomainError("gpd: y must be nonnegative");
}

}  // namespace detail

/// log of the upper tail probability log F-bar(y). Computed directly in log
/// space so that tail values far below 1e-300 keep resolution before the
/// final exp. Returns -inf exactly when xi < 0 and y >= -sigma/xi.
inline double gpd_log_survival(double y, const GpdParams& p) {
  detail::check_params(p);
  detail::check_nonneg(y);
  const double z = y / p.sigma;
  if (std::abs(p.xi) < kXiSwitch) {
    return -z + p.xi * z * z / 2.0;
  }
  const double t = p.xi * z;
  if (p.xi < 0.0 && t <= -1.0) return -std::numeric_limits<double>::infinity();
  return -std::log1p(t) / p.xi;
}

/// Upper tail probability F-bar(y) = (1 + xi*y/sigma)^(-1/xi).
inline double gpd_survival(double y, const GpdParams& p) {
  return std::exp(gpd_log_survival(y, p));
}

/// GPD distribution function; clamps to 1 at and beyond the support boundary.
inline double gpd_cdf(double y, const GpdParams& p) {
  return -std::expm1(gpd_log_survival(y, p));
}

/// Inverse of gpd_cdf on [0, 1).
inline double gpd_quantile(double prob, const GpdParams& p) {
  detail::check_params(p);
  if (!(prob >= 0.0 && prob < 1.0)) throw DomainError("gpd_quantile: p must be in [0,1)");
  const double a = -std::log1p(-prob);
  if (std::abs(p.xi) < kXiSwitch) {
    return p.sigma * a * (1.0 + p.xi * a / 2.0);
  }
  return p.sigma / p.xi * std::expm1(p.xi * a);
}

/// n i.i.d. draws by inverse transform; deterministic for a fixed seed.
inline std::vector<double> gpd_sample(std::size_t n, const GpdParams& p, std::uint64_t seed) {
  detail::check_params(p);
  if (n == 0) throw DomainError("gpd_sample: n must be >= 1");
  Xoshiro256pp rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = gpd_quantile(rng.uniform(), p);
  return out;
}

/// Draws n values into a caller-provided buffer using a caller-owned
/// generator (used by bootstrap loops to avoid reseeding cost).
inline void gpd_sample_into(std::span<double> out, const GpdParams& p, Xoshiro256pp& rng) {
  for (auto& v : out) v = gpd_quantile(rng.uniform(), p);
}

/// Log-likelihood of excesses under the GPD. Returns a -inf sentinel when any
/// observation lies outside the support of the given parameters.
inline double gpd_loglik(std::span<const double> excesses, const GpdParams& p) {
  detail::check_params(p);
  if (excesses.empty()) throw DomainError("gpd_loglik: empty excess list");
  const double k = static_cast<double>(excesses.size());
  if (std::abs(p.xi) < kXiSwitch) {
    double acc = 0.0;
    for (double y : excesses) {
      if (!(y > 0.0)) throw DomainError("gpd_loglik: excesses must be positive");
      const double z = y / p.sigma;
      acc += -z + p.xi * (z * z / 2.0 - z);
    }
    return -k * std::log(p.sigma) + acc;
  }
  double prod_acc = 0.0;
  double prod = 1.0;
  for (double y : excesses) {
    if (!(y > 0.0)) throw DomainError("gpd_loglik: excesses must be positive");
    const double w = 1.0 + p.xi * y / p.sigma;
    if (!(w > 0.0)) return -std::numeric_limits<double>::infinity();
    prod *= w;
    if (prod < 1e-280 || prod > 1e280) {
      prod_acc += std::log(prod);
      prod = 1.0;
    }
  }
  const double sum_log = prod_acc + std::log(prod);
  return -k * std::log(p.sigma) - (1.0 + 1.0 / p.xi) * sum_log;
}

}  // namespace permtail
