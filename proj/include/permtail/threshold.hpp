#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "permtail/errors.hpp"
#include "permtail/gpd.hpp"

namespace permtail {

enum class ThresholdMethod { ftr, rob_ftr, forward_stop, gof_changepoint, shape_variation };

inline const char* to_string(ThresholdMethod m) {
  switch (m) {
    case ThresholdMethod::ftr: return "ftr";
    case ThresholdMethod::rob_ftr: return "robftr";
    case ThresholdMethod::forward_stop: return "forwardstop";
    case ThresholdMethod::gof_changepoint: return "changepoint";
    case ThresholdMethod::shape_variation: return "shapevar";
  }
  return "?";
}

/// Starting exceedance count: max(ceil(fraction*B), floor_count), capped at B.
struct K0Rule {
  double fraction = 0.25;
  std::size_t floor_count = 250;

  std::size_t k0(std::size_t B) const {
    const auto frac = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(B)));
    return std::min(B, std::max(frac, floor_count));
  }
};

struct ThresholdConfig {
  ThresholdMethod method = ThresholdMethod::rob_ftr;
  K0Rule k0_rule{};
  std::size_t step = 0;  // 0 -> per-method default: 10 for ftr/robftr, 1 otherwise
  std::size_t min_exceedances = 30;
  double gof_alpha = 0.05;
  std::size_t shape_window = 5;       // rolling-variance window over accepted candidates
  std::size_t changepoint_prepend = 5;
  double changepoint_prepend_value = 1e-6;

  std::size_t resolved_step() const {
    if (step != 0) return step;
    return (method == ThresholdMethod::ftr || method == ThresholdMethod::rob_ftr) ? 10 : 1;
  }
};

/// One candidate threshold: nominal exceedance count and the implied u (the
/// (B-k)-th order statistic). Ties at u are resolved downstream by counting
/// strictly greater values as exceedances.
struct Candidate {
  std::size_t k_nominal;
  double u;
};

/// Candidate exceedance counts k0, k0-step, ..., >= min_exceedances, scanning
/// from the lowest threshold upward, restricted to thresholds below the
/// observed statistic. Input permutation values must be sorted ascending.
inline std::vector<Candidate> candidate_grid(std::span<const double> sorted_perms, double t_obs,
                                             const ThresholdConfig& cfg) {
  const std::size_t B = sorted_perms.size();
  if (B < cfg.min_exceedances) throw DomainError("candidate_grid: B below min_exceedances");
  const std::size_t k0 = cfg.k0_rule.k0(B);
  const std::size_t step = cfg.resolved_step();

  std::vector<Candidate> out;
  for (std::size_t k = k0; k >= cfg.min_exceedances; k -= step) {
    const double u = (k == B) ? sorted_perms.front() : sorted_perms[B - k - 1];
    if (u < t_obs) {
      // effective exceedances are the strictly greater values
      const auto it = std::upper_bound(sorted_perms.begin(), sorted_perms.end(), u);
      const std::size_t k_eff = static_cast<std::size_t>(sorted_perms.end() - it);
      if (k_eff >= cfg.min_exceedances) out.push_back({k, u});
    }
    if (k < cfg.min_exceedances + step) break;
  }
  return out;
}

/// Per-candidate evaluation supplied by the caller: unconstrained fit plus
/// its goodness-of-fit p-value on the excesses above candidate.u.
struct CandidateEval {
  bool ok = false;
  GpdParams params{1.0, 0.0};
  double ad_a2 = 0.0;
  double ad_p = 0.0;
  std::size_t k_exc = 0;
};

struct ThresholdSelection {
  std::size_t index;  // position in the candidate grid
  Candidate candidate;
  CandidateEval eval;
};

/// Smallest 1-based k whose running mean of -log(1 - p_i) exceeds alpha.
inline std::optional<std::size_t> forward_stop_index(std::span<const double> pvals, double alpha) {
  if (pvals.empty()) throw DomainError("forward_stop_index: empty p-value list");
  double acc = 0.0;
  for (std::size_t i = 0; i < pvals.size(); ++i) {
    const double p = std::min(pvals[i], 1.0 - 1e-12);
    acc += -std::log1p(-p);
    if (acc / static_cast<double>(i + 1) > alpha) return i + 1;
  }
  return std::nullopt;
}

/// Optimal mean-shift segmentation under a squared-error cost with the given
/// penalty, via the PELT pruning recursion. Returns the start indices of new
/// segments (ascending, excluding 0). Segments are at least min_seg long.
inline std::vector<std::size_t> pelt_mean_changepoints(std::span<const double> seq, double penalty,
                                                       std::size_t min_seg = 2) {
  const std::size_t T = seq.size();
  if (T < 2) throw DomainError("pelt_mean_changepoints: need at least 2 points");
  std::vector<double> s1(T + 1, 0.0), s2(T + 1, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    s1[i + 1] = s1[i] + seq[i];
    s2[i + 1] = s2[i] + seq[i] * seq[i];
  }
  if (*std::min_element(seq.begin(), seq.end()) == *std::max_element(seq.begin(), seq.end()))
    return {};
  auto cost = [&](std::size_t a, std::size_t b) {
    const double len = static_cast<double>(b - a);
    const double sum = s1[b] - s1[a];
    return std::max((s2[b] - s2[a]) - sum * sum / len, 0.0);
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> F(T + 1, inf);
  std::vector<std::size_t> prev(T + 1, 0);
  F[0] = -penalty;
  std::vector<std::size_t> cands{0};
  for (std::size_t t = min_seg; t <= T; ++t) {
    double best = inf;
    std::size_t best_s = 0;
    for (std::size_t s : cands) {
      if (t - s < min_seg) continue;
      const double val = F[s] + cost(s, t) + penalty;
      if (val < best) {
        best = val;
        best_s = s;
      }
    }
    F[t] = best;
    prev[t] = best_s;
    std::vector<std::size_t> kept;
    kept.reserve(cands.size() + 1);
    for (std::size_t s : cands) {
      if (t - s < min_seg || F[s] + cost(s, t) <= F[t]) kept.push_back(s);
    }
    kept.push_back(t);
    cands.swap(kept);
  }

  std::vector<std::size_t> cps;
  for (std::size_t t = T; prev[t] != 0; t = prev[t]) cps.push_back(prev[t]);
  std::reverse(cps.begin(), cps.end());
  return cps;
}

namespace detail {

/// Memoizing wrapper so the scan rules can share candidate evaluations.
template <typename Evaluator>
class ScanCache {
 public:
  ScanCache(std::span<const Candidate> grid, Evaluator& eval)
      : grid_(grid), eval_(eval), cache_(grid.size()) {}

  const CandidateEval& at(std::size_t i) {
    if (!cache_[i]) cache_[i] = eval_(i, grid_[i]);
    return *cache_[i];
  }
  std::size_t size() const { return grid_.size(); }

 private:
  std::span<const Candidate> grid_;
  Evaluator& eval_;
  std::vector<std::optional<CandidateEval>> cache_;
};

}  // namespace detail

/// Applies the configured selection rule to the candidate grid. `evaluator`
/// is called lazily as `CandidateEval(index, candidate)`; FTR-style rules
/// stop as soon as they accept. Returns nothing when no candidate satisfies
/// the rule (callers fall back to the empirical p-value).
template <typename Evaluator>
inline std::optional<ThresholdSelection> select_threshold(std::span<const Candidate> grid,
                                                          Evaluator&& evaluator,
                                                          const ThresholdConfig& cfg) {
  if (grid.empty()) return std::nullopt;
  detail::ScanCache<Evaluator> cache(grid, evaluator);
  const double alpha = cfg.gof_alpha;
  auto accepted = [&](std::size_t i) {
    const CandidateEval& e = cache.at(i);
    return e.ok && e.ad_p >= alpha;
  };
  auto make = [&](std::size_t i) {
    return ThresholdSelection{i, grid[i], cache.at(i)};
  };

  switch (cfg.method) {
    case ThresholdMethod::ftr: {
      for (std::size_t i = 0; i < grid.size(); ++i)
        if (accepted(i)) return make(i);
      return std::nullopt;
    }
    case ThresholdMethod::rob_ftr: {
      if (grid.size() < 3) return std::nullopt;
      for (std::size_t i = 0; i + 2 < grid.size(); ++i)
        if (accepted(i) && accepted(i + 1) && accepted(i + 2)) return make(i);
      return std::nullopt;
    }
    case ThresholdMethod::forward_stop: {
      std::vector<double> ps;
      ps.reserve(grid.size());
      double acc = 0.0;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const CandidateEval& e = cache.at(i);
        const double p = std::min(e.ok ? e.ad_p : 0.0, 1.0 - 1e-12);
        acc += -std::log1p(-p);
        if (acc / static_cast<double>(i + 1) > alpha) return make(i);
      }
      return std::nullopt;
    }
    case ThresholdMethod::gof_changepoint: {
      // detection runs on log p so the synthetic block stays far from any
      // accepted candidate, whatever the p-value draws look like
      auto logp = [](double p) { return std::log(std::max(p, 1e-12)); };
      std::vector<double> seq(cfg.changepoint_prepend, logp(cfg.changepoint_prepend_value));
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const CandidateEval& e = cache.at(i);
        seq.push_back(logp(e.ok ? e.ad_p : 0.0));
      }
      double mean = 0.0, var = 0.0;
      for (double v : seq) mean += v;
      mean /= static_cast<double>(seq.size());
      for (double v : seq) var += (v - mean) * (v - mean);
      var /= static_cast<double>(seq.size());
      const double penalty = 2.0 * std::log(static_cast<double>(seq.size())) * var;
      const auto cps = pelt_mean_changepoints(seq, penalty);
      std::size_t start = 0;
      if (!cps.empty() && cps.front() > cfg.changepoint_prepend)
        start = cps.front() - cfg.changepoint_prepend;
      for (std::size_t i = start; i < grid.size(); ++i)
        if (accepted(i)) return make(i);
      return std::nullopt;
    }
    case ThresholdMethod::shape_variation: {
      std::vector<std::size_t> acc_idx;
      for (std::size_t i = 0; i < grid.size(); ++i)
        if (accepted(i)) acc_idx.push_back(i);
      if (acc_idx.empty()) return std::nullopt;
      const std::size_t w = std::min<std::size_t>(cfg.shape_window, acc_idx.size());
      double best_var = std::numeric_limits<double>::infinity();
      std::size_t best_center = acc_idx[acc_idx.size() / 2];
      for (std::size_t start = 0; start + w <= acc_idx.size(); ++start) {
        double m = 0.0;
        for (std::size_t j = 0; j < w; ++j) m += cache.at(acc_idx[start + j]).params.xi;
        m /= static_cast<double>(w);
        double v = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          const double d = cache.at(acc_idx[start + j]).params.xi - m;
          v += d * d;
        }
        if (v < best_var) {
          best_var = v;
          best_center = acc_idx[start + w / 2];
        }
      }
      return make(best_center);
    }
  }
  return std::nullopt;
}

}  // namespace permtail
