#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "permtail/epsilon.hpp"
#include "permtail/errors.hpp"
#include "permtail/estimators.hpp"
#include "permtail/gof.hpp"
#include "permtail/gpd.hpp"
#include "permtail/rng.hpp"
#include "permtail/threshold.hpp"

namespace permtail {

enum class Tail { right, left, two_sided };

inline const char* to_string(Tail t) {
  switch (t) {
    case Tail::right: return "right";
    case Tail::left: return "left";
    case Tail::two_sided: return "two_sided";
  }
  return "?";
}

enum class Source { empirical, gpd_constrained, gpd_unconstrained, gamma, fallback_empirical };

inline const char* to_string(Source s) {
  switch (s) {
    case Source::empirical: return "empirical";
    case Source::gpd_constrained: return "gpd_constrained";
    case Source::gpd_unconstrained: return "gpd_unconstrained";
    case Source::gamma: return "gamma";
    case Source::fallback_empirical: return "fallback_empirical";
  }
  return "?";
}

enum class ApproxMethod { gpd, gamma };

/// Observed statistics plus the per-test permutation values. Permutation
/// moments and the standardized observed positions are computed once at
/// construction, on the scale the statistics arrive in; tail transforms leave
/// them untouched so the margin rule always standardizes against the
/// ingested permutation distribution.
struct PermutationTestData {
  std::vector<double> t_obs;
  std::vector<std::vector<double>> perms;
  std::vector<double> perm_mean;
  std::vector<double> perm_sd;
  std::vector<double> z_obs;
  std::vector<char> force_fallback;  // tests that must keep their empirical p
  Tail tail = Tail::right;

  std::size_t num_tests() const { return t_obs.size(); }

  static PermutationTestData make(std::vector<double> t_obs,
                                  std::vector<std::vector<double>> perms, Tail tail) {
    if (t_obs.empty() || t_obs.size() != perms.size())
      throw DomainError("PermutationTestData: observed/permutation dimensions disagree");
    PermutationTestData d;
    d.t_obs = std::move(t_obs);
    d.perms = std::move(perms);
    d.tail = tail;
    const std::size_t m = d.t_obs.size();
    d.perm_mean.resize(m);
    d.perm_sd.resize(m);
    d.z_obs.resize(m);
    d.force_fallback.assign(m, 0);
    std::vector<double> sorted;
    for (std::size_t j = 0; j < m; ++j) {
      if (d.perms[j].empty()) throw DomainError("PermutationTestData: test has no permutations");
      // moments accumulated in sorted order: bit-identical under row shuffles
      sorted = d.perms[j];
      std::sort(sorted.begin(), sorted.end());
      double s = 0.0;
      for (double v : sorted) s += v;
      const double n = static_cast<double>(sorted.size());
      const double mean = s / n;
      double ss = 0.0;
      for (double v : sorted) ss += (v - mean) * (v - mean);
      const double sd = n > 1.0 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      d.perm_mean[j] = mean;
      d.perm_sd[j] = sd;
      d.z_obs[j] = sd > 0.0 ? std::abs(d.t_obs[j] - mean) / sd : 0.0;
    }
    return d;
  }
};

/// Maps left-tailed or two-sided statistics onto a right tail (sign flip or
/// absolute value); the returned data is always right-tailed.
inline PermutationTestData transform_tail(PermutationTestData data, Tail tail) {
  switch (tail) {
    case Tail::right: break;
    case Tail::left:
      for (auto& t : data.t_obs) t = -t;
      for (auto& col : data.perms)
        for (auto& v : col) v = -v;
      break;
    case Tail::two_sided:
      for (auto& t : data.t_obs) t = std::abs(t);
      for (auto& col : data.perms)
        for (auto& v : col) v = std::abs(v);
      break;
  }
  data.tail = Tail::right;
  return data;
}

/// Cubes all statistics (rank-preserving on a right tail).
inline PermutationTestData pow3_transform(PermutationTestData data) {
  for (auto& t : data.t_obs) t = t * t * t;
  for (auto& col : data.perms)
    for (auto& v : col) v = v * v * v;
  return data;
}

/// p_emp = (1 + #{T*_b >= T_obs}) / (1 + B), per test.
inline std::vector<double> empirical_pvalues(const PermutationTestData& data) {
  std::vector<double> out(data.num_tests());
  for (std::size_t j = 0; j < data.num_tests(); ++j) {
    std::size_t count = 0;
    for (double v : data.perms[j])
      if (v >= data.t_obs[j]) ++count;
    out[j] = (1.0 + static_cast<double>(count)) /
             (1.0 + static_cast<double>(data.perms[j].size()));
  }
  return out;
}

/// Benjamini-Hochberg step-up adjustment; monotone, clamped at 1, original
/// order restored.
inline std::vector<double> bh_adjust(std::span<const double> pvals) {
  const std::size_t m = pvals.size();
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  std::vector<double> out(m);
  double running = 1.0;
  for (std::size_t r = m; r >= 1; --r) {
    const std::size_t i = order[r - 1];
    const double adj = pvals[i] * static_cast<double>(m) / static_cast<double>(r);
    running = std::min(running, std::min(adj, 1.0));
    out[i] = running;
  }
  return out;
}

/// Gamma approximation of the full permutation distribution: MLE fit (Newton
/// on the shape equation) after shifting nonpositive values, upper tail at
/// the observed statistic. Returns nothing when the fit does not converge.
inline std::optional<double> gamma_approx(std::span<const double> perm_stats, double t_obs) {
  if (perm_stats.size() < 10) throw DomainError("gamma_approx: need at least 10 values");
  const double lo = *std::min_element(perm_stats.begin(), perm_stats.end());
  const double shift = lo <= 0.0 ? -lo + 1e-8 : 0.0;

  double sum = 0.0, sum_log = 0.0;
  for (double v : perm_stats) {
    const double x = v + shift;
    sum += x;
    sum_log += std::log(x);
  }
  const double n = static_cast<double>(perm_stats.size());
  const double mean = sum / n;
  const double s = std::log(mean) - sum_log / n;
  if (!(s > 0.0) || !std::isfinite(s)) return std::nullopt;

  double k = (3.0 - s + std::sqrt((s - 3.0) * (s - 3.0) + 24.0 * s)) / (12.0 * s);
  bool converged = false;
  for (int it = 0; it < 100; ++it) {
    const double f = std::log(k) - boost::math::digamma(k) - s;
    const double fp = 1.0 / k - boost::math::trigamma(k);
    double next = k - f / fp;
    if (!(next > 0.0)) next = k / 2.0;
    const bool done = std::abs(next - k) <= 1e-12 * k;
    k = next;
    if (done) {
      converged = true;
      break;
    }
  }
  if (!converged || !(k > 0.0) || !std::isfinite(k)) return std::nullopt;
  const double rate = k / mean;
  const double x = std::max(t_obs + shift, 0.0);
  return boost::math::gamma_q(k, rate * x);
}

/// Per-test tail model at the selected threshold.
struct TailFit {
  double u = 0.0;
  std::size_t k = 0;
  double p_exc = 0.0;
  double y_obs = 0.0;
  std::optional<double> epsilon;
  GpdParams params{};
  AdResult ad{};
  bool constrained = false;
  double p_tail = 0.0;
};

struct PValueRecord {
  std::size_t test_id = 0;  // input position
  double t_obs = 0.0;       // as ingested
  double p_emp = 1.0;
  std::optional<double> p_tail;
  double p_hybrid = 1.0;
  double p_bh = 1.0;
  Source source = Source::empirical;
  std::optional<TailFit> fit;
};

struct WorkflowConfig {
  double alpha = 0.05;
  double p_thr = 0.0;  // 0 -> 2*alpha
  ApproxMethod method = ApproxMethod::gpd;
  bool constrained = true;
  bool include_obs = false;
  bool pow3 = false;
  bool refine = false;
  EstimatorConfig estimator{};
  ThresholdConfig threshold{};
  SllsConfig slls{};
  AdMode gof_mode = AdMode::bootstrap;
  int gof_n_boot = 999;
  const AdCriticalTable* gof_table = nullptr;
  RefineConfig refine_cfg{};
  std::uint64_t seed = 1;
  int threads = 1;  // 0 -> hardware concurrency

  double resolved_p_thr() const { return p_thr > 0.0 ? p_thr : 2.0 * alpha; }
  int resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
  }

  void validate() const {
    if (!(alpha > 0.0 && alpha < 0.5)) throw ConfigError("workflow: alpha must be in (0, 0.5)");
    const double pt = resolved_p_thr();
    if (!(pt > 0.0 && pt <= 1.0)) throw ConfigError("workflow: p_thr must be in (0, 1]");
    if (!(threshold.gof_alpha > 0.0 && threshold.gof_alpha < 1.0))
      throw ConfigError("workflow: gof_alpha must be in (0, 1)");
    if (threshold.min_exceedances < 5)
      throw ConfigError("workflow: min_exceedances must be at least 5");
    if (gof_mode == AdMode::bootstrap && gof_n_boot < 100)
      throw ConfigError("workflow: bootstrap needs gof_n_boot >= 100");
    if (gof_mode == AdMode::table && (gof_table == nullptr || gof_table->empty()))
      throw ConfigError("workflow: table mode requires a loaded critical-value table");
    slls.validate();
    if (constrained && estimator.method == GpdEstimator::mom)
      throw ConfigError("workflow: MOM cannot be used with constrained fitting");
  }
};

/// One screened test as seen by the tail approximation stage: transformed
/// statistic, ascending permutation values (with the observed statistic
/// appended in +obs mode), and the raw-scale standardization inputs.
struct TailInput {
  double t_obs = 0.0;
  std::span<const double> sorted_perms;
  double z_obs = 0.0;
  double perm_sd = 0.0;
  std::size_t b_emp = 0;  // denominator of p_exc
};

namespace detail {

struct TailSelection {
  Candidate cand{};
  CandidateEval eval{};
  std::vector<double> excesses;  // ascending
  double p_exc = 0.0;
  double y_obs = 0.0;
};

inline std::vector<double> excesses_above(std::span<const double> sorted, double u) {
  const auto it = std::upper_bound(sorted.begin(), sorted.end(), u);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(sorted.end() - it));
  for (auto p = it; p != sorted.end(); ++p) out.push_back(*p - u);
  return out;
}

inline std::optional<TailSelection> select_tail(const TailInput& in, const WorkflowConfig& cfg,
                                                std::uint64_t test_key) {
  std::vector<Candidate> grid;
  try {
    grid = candidate_grid(in.sorted_perms, in.t_obs, cfg.threshold);
  } catch (const DomainError&) {
    return std::nullopt;
  }
  if (grid.empty()) return std::nullopt;

  auto evaluate = [&](std::size_t index, const Candidate& cand) {
    CandidateEval e;
    std::vector<double> ys = excesses_above(in.sorted_perms, cand.u);
    if (ys.size() < cfg.threshold.min_exceedances) return e;
    e.k_exc = ys.size();
    try {
      e.params = fit_gpd(ys, cfg.estimator);
    } catch (const EstimationError&) {
      return e;  // unfit candidate counts as rejected
    }
    e.ad_a2 = ad_statistic(ys, e.params);
    AdPvalueOptions opt;
    opt.mode = cfg.gof_mode;
    opt.n_boot = cfg.gof_n_boot;
    opt.seed = derive_stream(test_key, index + 1);
    opt.refit = cfg.estimator;
    opt.table = cfg.gof_table;
    e.ad_p = ad_pvalue(e.ad_a2, e.params, ys.size(), opt);
    e.ok = true;
    return e;
  };

  const auto sel = select_threshold(grid, evaluate, cfg.threshold);
  if (!sel) return std::nullopt;

  TailSelection out;
  out.cand = sel->candidate;
  out.eval = sel->eval;
  out.excesses = excesses_above(in.sorted_perms, sel->candidate.u);
  out.p_exc = static_cast<double>(out.excesses.size()) / static_cast<double>(in.b_emp);
  out.y_obs = in.t_obs - sel->candidate.u;
  return out;
}

inline std::optional<TailFit> finalize_tail(const TailSelection& sel, const TailInput& in,
                                            double z_cap, const WorkflowConfig& cfg, double tau) {
  TailFit fit;
  fit.u = sel.cand.u;
  fit.k = sel.excesses.size();
  fit.p_exc = sel.p_exc;
  fit.y_obs = sel.y_obs;
  fit.ad = {sel.eval.ad_a2, sel.eval.ad_p, cfg.gof_mode};
  fit.constrained = cfg.constrained;

  if (cfg.constrained) {
    double eps;
    try {
      SllsConfig slls = cfg.slls;
      slls.tau = tau;
      const auto pos = StandardizedPosition::make(in.z_obs, z_cap);
      eps = slls_epsilon(pos, slls, in.perm_sd);
    } catch (const DomainError&) {
      return std::nullopt;  // degenerate permutation distribution
    }
    fit.epsilon = eps;
    try {
      fit.params = fit_gpd(sel.excesses, cfg.estimator, {true, sel.y_obs + eps});
    } catch (const EstimationError&) {
      return std::nullopt;
    } catch (const UnsupportedCombination&) {
      return std::nullopt;
    }
  } else {
    fit.params = sel.eval.params;  // unconstrained scan fit at the selected threshold
  }
  fit.p_tail = std::exp(std::log(fit.p_exc) + gpd_log_survival(fit.y_obs, fit.params));
  return fit;
}

template <typename Fn>
inline void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  const int nt = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nt));
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Runs threshold selection, margin computation, and the (constrained) GPD
/// fit for one screened test; empty result means the empirical p-value is
/// retained.
inline std::optional<TailFit> approximate_tail(const TailInput& in, double z_cap,
                                               const WorkflowConfig& cfg,
                                               std::uint64_t test_key) {
  const auto sel = detail::select_tail(in, cfg, test_key);
  if (!sel) return std::nullopt;
  return detail::finalize_tail(*sel, in, z_cap, cfg, cfg.slls.tau);
}

/// Full workflow: empirical p-values, screening at p_thr, per-test tail
/// approximation, optional tau refinement of persistent underflow, hybrid
/// assembly, and BH adjustment. Per-test failures degrade to the empirical
/// fallback; the batch never aborts. Output order matches input order and is
/// bit-identical across thread counts.
inline std::vector<PValueRecord> run_workflow(PermutationTestData data,
                                              const WorkflowConfig& cfg) {
  cfg.validate();
  const std::size_t m = data.num_tests();
  if (m == 0 || data.perms.size() != m || data.perm_mean.size() != m ||
      data.perm_sd.size() != m || data.z_obs.size() != m || data.force_fallback.size() != m)
    throw DomainError("run_workflow: data must come from PermutationTestData::make");
  const std::vector<double> t_obs_raw = data.t_obs;

  // Standardization cap, resolved before any transform so that it refers to
  // the ingested permutation scale.
  ZcapPolicy policy = cfg.slls.zcap_policy;
  if (policy == ZcapPolicy::auto_select)
    policy = m == 1 ? ZcapPolicy::perm_quantile : ZcapPolicy::max_over_tests;
  double z_cap = 1.0;
  if (cfg.method == ApproxMethod::gpd && cfg.constrained) {
    if (policy == ZcapPolicy::perm_quantile) {
      std::vector<double> pooled;
      for (std::size_t j = 0; j < m; ++j) {
        if (!(data.perm_sd[j] > 0.0)) continue;
        for (double v : data.perms[j])
          pooled.push_back(std::abs(v - data.perm_mean[j]) / data.perm_sd[j]);
      }
      if (!pooled.empty()) z_cap = empirical_quantile(pooled, cfg.slls.zcap_quantile);
    } else {
      z_cap = compute_zcap(data.z_obs, {}, ZcapPolicy::max_over_tests);
    }
    if (!(z_cap > 0.0)) z_cap = 1.0;
  }

  const Tail tail_mode = data.tail;
  data = transform_tail(std::move(data), tail_mode);
  if (cfg.pow3) data = pow3_transform(std::move(data));
  for (auto& col : data.perms) std::sort(col.begin(), col.end());

  const std::vector<double> p_emp = empirical_pvalues(data);
  const double p_thr = cfg.resolved_p_thr();

  std::vector<PValueRecord> records(m);
  std::vector<std::size_t> screened;
  for (std::size_t j = 0; j < m; ++j) {
    records[j].test_id = j;
    records[j].t_obs = t_obs_raw[j];
    records[j].p_emp = p_emp[j];
    records[j].p_hybrid = p_emp[j];
    records[j].source = Source::empirical;
    if (p_emp[j] < p_thr) {
      if (data.force_fallback[j]) {
        records[j].source = Source::fallback_empirical;
      } else {
        screened.push_back(j);
      }
    }
  }

  const int threads = cfg.resolved_threads();
  std::vector<std::optional<detail::TailSelection>> selections(screened.size());
  std::vector<std::vector<double>> augmented(screened.size());

  auto view_of = [&](std::size_t si) {
    const std::size_t j = screened[si];
    TailInput in;
    in.t_obs = data.t_obs[j];
    in.sorted_perms = cfg.include_obs ? std::span<const double>(augmented[si])
                                      : std::span<const double>(data.perms[j]);
    in.z_obs = data.z_obs[j];
    in.perm_sd = data.perm_sd[j];
    in.b_emp = data.perms[j].size();
    return in;
  };

  detail::parallel_for(screened.size(), threads, [&](std::size_t si) {
    const std::size_t j = screened[si];
    if (cfg.method == ApproxMethod::gamma) {
      std::optional<double> p;
      try {
        p = gamma_approx(data.perms[j], data.t_obs[j]);
      } catch (const DomainError&) {
        p = std::nullopt;
      }
      if (p) {
        records[j].p_tail = *p;
        records[j].p_hybrid = *p;
        records[j].source = Source::gamma;
      } else {
        records[j].source = Source::fallback_empirical;
      }
      return;
    }
    if (cfg.include_obs) {
      auto& aug = augmented[si];
      aug = data.perms[j];
      aug.insert(std::upper_bound(aug.begin(), aug.end(), data.t_obs[j]), data.t_obs[j]);
    }
    const TailInput in = view_of(si);
    const std::uint64_t test_key = derive_stream(cfg.seed, j);
    selections[si] = detail::select_tail(in, cfg, test_key);
    std::optional<TailFit> fit;
    if (selections[si])
      fit = detail::finalize_tail(*selections[si], in, z_cap, cfg, cfg.slls.tau);
    if (fit) {
      records[j].p_tail = fit->p_tail;
      records[j].p_hybrid = fit->p_tail;
      records[j].source = cfg.constrained ? Source::gpd_constrained : Source::gpd_unconstrained;
      records[j].fit = std::move(fit);
    } else {
      records[j].source = Source::fallback_empirical;
    }
  });

  // Optional refinement pass: raise tau until no approximated p-value
  // underflows, then refit every approximated test at the refined tau.
  if (cfg.refine && cfg.constrained && cfg.method == ApproxMethod::gpd) {
    std::vector<std::size_t> tail_idx;  // positions into `screened`
    std::vector<double> current;
    for (std::size_t si = 0; si < screened.size(); ++si) {
      const std::size_t j = screened[si];
      if (records[j].fit) {
        tail_idx.push_back(si);
        current.push_back(records[j].fit->p_tail);
      }
    }
    bool any_underflow = false;
    for (double p : current) any_underflow |= p <= kUnderflowMin;
    if (any_underflow) {
      auto refit_cb = [&](double tau, std::span<const std::size_t> subset) {
        std::vector<double> out(subset.size());
        detail::parallel_for(subset.size(), threads, [&](std::size_t a) {
          const std::size_t si = tail_idx[subset[a]];
          const std::size_t j = screened[si];
          const TailInput in = view_of(si);
          const auto fit = detail::finalize_tail(*selections[si], in, z_cap, cfg, tau);
          if (fit) {
            out[a] = fit->p_tail;
            records[j].p_tail = fit->p_tail;
            records[j].p_hybrid = fit->p_tail;
            records[j].source = Source::gpd_constrained;
            records[j].fit = *fit;
          } else {
            out[a] = records[j].p_emp;
            records[j].p_tail.reset();
            records[j].p_hybrid = records[j].p_emp;
            records[j].source = Source::fallback_empirical;
            records[j].fit.reset();
          }
        });
        return out;
      };
      refine_tau(refit_cb, std::move(current), cfg.slls.tau, cfg.refine_cfg);
    }
  }

  std::vector<double> hybrid(m);
  for (std::size_t j = 0; j < m; ++j) hybrid[j] = records[j].p_hybrid;
  const std::vector<double> adjusted = bh_adjust(hybrid);
  for (std::size_t j = 0; j < m; ++j) records[j].p_bh = adjusted[j];
  return records;
}

}  // namespace permtail
