#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "permtail/errors.hpp"
#include "permtail/estimators.hpp"
#include "permtail/gpd.hpp"

namespace permtail {

enum class AdMode { bootstrap, table };

/// Anderson-Darling result for a fitted GPD on excesses.
struct AdResult {
  double a2 = 0.0;
  double p_value = 1.0;
  AdMode mode = AdMode::bootstrap;
};

namespace detail {
inline constexpr double kPitClamp = 1e-12;  // log-of-zero guard on PIT values
}

/// A2 statistic of the probability integral transform of the excesses under
/// the fitted GPD. Excesses outside the fitted support are clamped into
/// (0, 1); when that happens *clamped is set.
inline double ad_statistic(std::span<const double> excesses, const GpdParams& params,
                           bool* clamped = nullptr) {
  if (excesses.size() < 5) throw DomainError("ad_statistic: need at least 5 excesses");
  std::vector<double> ys(excesses.begin(), excesses.end());
  std::sort(ys.begin(), ys.end());
  const std::size_t k = ys.size();

  // For each order statistic keep ln(z) and ln(1-z); ln(1-z) is the log
  // survival directly, so the deep tail keeps resolution.
  std::vector<double> log_z(k), log_1mz(k);
  bool any_clamped = false;
  for (std::size_t i = 0; i < k; ++i) {
    double ls = gpd_log_survival(ys[i], params);
    const double lo = std::log(detail::kPitClamp);
    // clamp z into [1e-12, 1-1e-12]  <=>  ls into [log(1e-12), log(1-1e-12)]
    const double hi = std::log1p(-detail::kPitClamp);
    if (ls < lo || ls > hi) {
      any_clamped = true;
      ls = std::clamp(ls, lo, hi);
    }
    log_1mz[i] = ls;
    log_z[i] = std::log1p(-std::exp(ls));
  }
  if (clamped) *clamped = any_clamped;

  double acc = 0.0;
  for (std::size_t i = 1; i <= k; ++i) {
    acc += (2.0 * static_cast<double>(i) - 1.0) * (log_z[i - 1] + log_1mz[k - i]);
  }
  const double kd = static_cast<double>(k);
  return -kd - acc / kd;
}

/// Critical values of the A2 statistic tabulated against -xi. TSV format:
/// header `neg_xi q50 q75 q90 q95 q975 q99`, rows ascending in neg_xi.
/// Lookup interpolates linearly in -xi, clamped at the table edges.
class AdCriticalTable {
 public:
  static AdCriticalTable parse_tsv(std::istream& in) {
    AdCriticalTable t;
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw DataError("critical-value table: empty file", 1);
    ++lineno;
    if (trimmed(line) != "neg_xi\tq50\tq75\tq90\tq95\tq975\tq99")
      throw DataError("critical-value table: unexpected header", 1);
    while (std::getline(in, line)) {
      ++lineno;
      if (trimmed(line).empty()) continue;
      std::istringstream ss(line);
      double v[7];
      for (int i = 0; i < 7; ++i) {
        if (!(ss >> v[i]))
          throw DataError("critical-value table: expected 7 numeric fields", lineno,
                          static_cast<std::size_t>(i) + 1);
      }
      if (!t.neg_xi_.empty() && v[0] <= t.neg_xi_.back())
        throw DataError("critical-value table: neg_xi must be strictly increasing", lineno);
      t.neg_xi_.push_back(v[0]);
      for (int i = 0; i < 6; ++i) t.quantiles_[i].push_back(v[i + 1]);
    }
    if (t.neg_xi_.empty()) throw DataError("critical-value table: no rows");
    return t;
  }

  bool empty() const { return neg_xi_.empty(); }

  /// Upper-tail p-value of a2 at shape -xi, log-linear between the tabulated
  /// survival levels and clamped to [1e-3, 1].
  double pvalue(double a2, double neg_xi) const {
    static constexpr std::array<double, 6> levels{0.50, 0.25, 0.10, 0.05, 0.025, 0.01};
    std::array<double, 6> crit{};
    for (int i = 0; i < 6; ++i) crit[i] = interpolate(quantiles_[i], neg_xi);
    if (a2 <= crit[0]) return 1.0;
    for (int i = 0; i < 5; ++i) {
      if (a2 <= crit[i + 1]) {
        const double f = (a2 - crit[i]) / (crit[i + 1] - crit[i]);
        return std::exp(std::log(levels[i]) + f * (std::log(levels[i + 1]) - std::log(levels[i])));
      }
    }
    return std::max(1e-3, levels[5] * std::exp(-(a2 - crit[5]) / std::max(crit[5], 1e-6)));
  }

 private:
  static std::string trimmed(const std::string& s) {
    const auto a = s.find_first_not_of(" \r\n");
    const auto b = s.find_last_not_of(" \r\n");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }
  double interpolate(const std::vector<double>& col, double x) const {
    if (x <= neg_xi_.front()) return col.front();
    if (x >= neg_xi_.back()) return col.back();
    const auto it = std::upper_bound(neg_xi_.begin(), neg_xi_.end(), x);
    const std::size_t j = static_cast<std::size_t>(it - neg_xi_.begin());
    const double f = (x - neg_xi_[j - 1]) / (neg_xi_[j] - neg_xi_[j - 1]);
    return col[j - 1] + f * (col[j] - col[j - 1]);
  }

  std::vector<double> neg_xi_;
  std::array<std::vector<double>, 6> quantiles_;
};

struct AdPvalueOptions {
  AdMode mode = AdMode::bootstrap;
  int n_boot = 999;
  std::uint64_t seed = 0;
  EstimatorConfig refit{};  // same estimator as the outer fit
  const AdCriticalTable* table = nullptr;
};

/// Goodness-of-fit p-value for an observed A2. The default parametric
/// bootstrap simulates n_boot samples of size k at the fitted parameters,
/// refits each with the same estimator, and uses the plus-one counting form
/// so the p-value is never exactly zero. Table mode is a fast path that
/// interpolates user-supplied critical values.
inline double ad_pvalue(double a2, const GpdParams& params, std::size_t k,
                        const AdPvalueOptions& opt) {
  if (k < 5) throw DomainError("ad_pvalue: k must be >= 5");
  if (opt.mode == AdMode::table) {
    if (opt.table == nullptr || opt.table->empty())
      throw ConfigError("ad_pvalue: table mode requires a loaded critical-value table");
    return opt.table->pvalue(a2, -params.xi);
  }
  if (opt.n_boot < 100) throw DomainError("ad_pvalue: bootstrap needs n_boot >= 100");

  std::vector<double> sample(k);
  int count_ge = 0;
  for (int b = 0; b < opt.n_boot; ++b) {
    Xoshiro256pp rng(opt.seed, static_cast<std::uint64_t>(b));
    gpd_sample_into(sample, params, rng);
    GpdParams refit = params;
    try {
      refit = fit_gpd(sample, opt.refit);
    } catch (const EstimationError&) {
      // keep outer params for this replicate
    }
    const double a2_b = ad_statistic(sample, refit);
    if (a2_b >= a2) ++count_ge;
  }
  return (1.0 + static_cast<double>(count_ge)) / (1.0 + static_cast<double>(opt.n_boot));
}

}  // namespace permtail
