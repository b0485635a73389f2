#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "permtail/pipeline.hpp"
#include "permtail/rng.hpp"

namespace permtail {

enum class ScenarioFamily { gaussian_ttest, exponential_wilcoxon, gpd_recovery };

inline const char* to_string(ScenarioFamily f) {
  switch (f) {
    case ScenarioFamily::gaussian_ttest: return "gaussian_ttest";
    case ScenarioFamily::exponential_wilcoxon: return "exponential_wilcoxon";
    case ScenarioFamily::gpd_recovery: return "gpd_recovery";
  }
  return "?";
}

/// One simulation setting: per-group size n, effect size d, permutation
/// count B, replicate count, base seed.
struct ScenarioSpec {
  ScenarioFamily family = ScenarioFamily::gaussian_ttest;
  std::size_t n = 100;
  double d = 1.0;
  std::size_t B = 1000;
  std::size_t reps = 200;
  std::uint64_t seed = 1;
};

/// One simulated test: the statistic handed to the workflow (already on the
/// scale whose two-sided transform is meaningful), its permutation
/// distribution, and the parametric reference p-value.
struct ReplicateData {
  double stat_obs = 0.0;
  std::vector<double> perms;
  double reference_p = 1.0;
  double raw_stat = 0.0;
};

namespace detail {

inline double pooled_t(std::span<const double> values, std::size_t n, double total_sum,
                       double total_sumsq) {
  double s1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) s1 += values[i];
  const double nd = static_cast<double>(n);
  const double m1 = s1 / nd;
  const double m2 = (total_sum - s1) / nd;
  const double ss_within = total_sumsq - nd * m1 * m1 - nd * m2 * m2;
  const double sp2 = ss_within / (2.0 * nd - 2.0);
  return (m2 - m1) / std::sqrt(sp2 * 2.0 / nd);
}

/// Midranks of the combined sample (ties get the average rank).
inline std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Exact two-sided Mann-Whitney p by dynamic programming over rank sums of
/// all C(2n, n) label splits (untied integer ranks).
inline double wilcoxon_exact_two_sided(std::size_t n, double u_obs) {
  const std::size_t N = 2 * n;
  const std::size_t max_sum = N * (N + 1) / 2;
  // count[k][s] -> number of k-subsets of {1..N} with rank sum s
  std::vector<std::vector<double>> count(n + 1, std::vector<double>(max_sum + 1, 0.0));
  count[0][0] = 1.0;
  for (std::size_t v = 1; v <= N; ++v) {
    for (std::size_t k = std::min(v, n); k >= 1; --k) {
      for (std::size_t s = max_sum; s >= v; --s) {
        if (count[k - 1][s - v] != 0.0) count[k][s] += count[k - 1][s - v];
      }
    }
  }
  const double mu = static_cast<double>(n * n) / 2.0;
  const double dev = std::abs(u_obs - mu);
  const double offset = static_cast<double>(n * (n + 1)) / 2.0;
  double total = 0.0, extreme = 0.0;
  for (std::size_t s = 0; s <= max_sum; ++s) {
    const double c = count[n][s];
    if (c == 0.0) continue;
    total += c;
    const double u = static_cast<double>(s) - offset;
    if (std::abs(u - mu) >= dev - 1e-9) extreme += c;
  }
  return extreme / total;
}

/// Normal approximation with continuity and tie corrections.
inline double wilcoxon_normal_two_sided(std::size_t n1, std::size_t n2, double u_obs,
                                        std::span<const double> ranks) {
  const double N = static_cast<double>(n1 + n2);
  const double mu = static_cast<double>(n1) * static_cast<double>(n2) / 2.0;
  // tie correction from the multiplicities of equal ranks
  std::vector<double> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
                     ((N + 1.0) - tie_term / (N * (N - 1.0)));
  const double z = std::max(std::abs(u_obs - mu) - 0.5, 0.0) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace detail

/// Two Gaussian groups N(0,1) and N(d,1); pooled two-sample t statistic,
/// label permutations, and the two-sided Student t reference with 2n-2
/// degrees of freedom.
inline ReplicateData simulate_ttest_replicate(const ScenarioSpec& spec, std::size_t rep) {
  Xoshiro256pp rng(spec.seed, rep);
  const std::size_t n = spec.n;
  std::vector<double> values(2 * n);
  for (std::size_t i = 0; i < n; ++i) values[i] = rng.normal();
  for (std::size_t i = n; i < 2 * n; ++i) values[i] = rng.normal() + spec.d;

  double total_sum = 0.0, total_sumsq = 0.0;
  for (double v : values) {
    total_sum += v;
    total_sumsq += v * v;
  }
  ReplicateData out;
  out.raw_stat = detail::pooled_t(values, n, total_sum, total_sumsq);
  out.stat_obs = out.raw_stat;

  out.perms.resize(spec.B);
  std::vector<double> work = values;
  for (std::size_t b = 0; b < spec.B; ++b) {
    rng.shuffle(work);
    out.perms[b] = detail::pooled_t(work, n, total_sum, total_sumsq);
  }

  const boost::math::students_t tdist(2.0 * static_cast<double>(n) - 2.0);
  out.reference_p = 2.0 * boost::math::cdf(boost::math::complement(tdist, std::abs(out.raw_stat)));
  return out;
}

/// Two exponential groups with means 1 and 1+d; Mann-Whitney U statistic
/// (centered at n^2/2 so the two-sided transform applies), label
/// permutations over the fixed midranks, and the classical Wilcoxon
/// reference (exact enumeration for n <= 10, normal approximation with
/// continuity correction otherwise).
inline ReplicateData simulate_wilcoxon_replicate(const ScenarioSpec& spec, std::size_t rep) {
  Xoshiro256pp rng(spec.seed, rep);
  const std::size_t n = spec.n;
  std::vector<double> values(2 * n);
  for (std::size_t i = 0; i < n; ++i) values[i] = rng.exponential(1.0);
  for (std::size_t i = n; i < 2 * n; ++i) values[i] = rng.exponential(1.0 + spec.d);

  const std::vector<double> ranks = detail::midranks(values);
  const double offset = static_cast<double>(n) * (static_cast<double>(n) + 1.0) / 2.0;
  const double center = static_cast<double>(n) * static_cast<double>(n) / 2.0;
  auto u_of = [&](std::span<const double> r) {
    double s2 = 0.0;
    for (std::size_t i = n; i < 2 * n; ++i) s2 += r[i];
    return s2 - offset;
  };

  ReplicateData out;
  out.raw_stat = u_of(ranks);
  out.stat_obs = out.raw_stat - center;

  out.perms.resize(spec.B);
  std::vector<double> work = ranks;
  for (std::size_t b = 0; b < spec.B; ++b) {
    rng.shuffle(work);
    out.perms[b] = u_of(work) - center;
  }

  out.reference_p = n <= 10 ? detail::wilcoxon_exact_two_sided(n, out.raw_stat)
                            : detail::wilcoxon_normal_two_sided(n, n, out.raw_stat, ranks);
  return out;
}

inline ReplicateData simulate_replicate(const ScenarioSpec& spec, std::size_t rep) {
  switch (spec.family) {
    case ScenarioFamily::gaussian_ttest: return simulate_ttest_replicate(spec, rep);
    case ScenarioFamily::exponential_wilcoxon: return simulate_wilcoxon_replicate(spec, rep);
    case ScenarioFamily::gpd_recovery: break;
  }
  throw ConfigError("simulate_replicate: family has no single-test replicates");
}

/// The p-value approximation methods compared in the harness.
enum class Comparator {
  constrained_default,  // constrained LME + robFTR + SLLS margin
  gpd_classic,          // unconstrained MLE1D + FTR, top 250 exceedances
  gpd_pow3,             // gpd_classic on cubed statistics
  gpd_plus_obs,         // unconstrained MLE1D + FTR, upper quartile, observed included
  gamma_full            // Gamma fit to the entire permutation distribution
};

inline const char* to_string(Comparator c) {
  switch (c) {
    case Comparator::constrained_default: return "gpd_constrained";
    case Comparator::gpd_classic: return "gpd_classic";
    case Comparator::gpd_pow3: return "gpd_pow3";
    case Comparator::gpd_plus_obs: return "gpd_plus_obs";
    case Comparator::gamma_full: return "gamma";
  }
  return "?";
}

inline constexpr std::array<Comparator, 5> kAllComparators{
    Comparator::constrained_default, Comparator::gpd_classic, Comparator::gpd_pow3,
    Comparator::gpd_plus_obs, Comparator::gamma_full};

inline WorkflowConfig comparator_config(Comparator c, std::uint64_t seed, double n_eff) {
  WorkflowConfig cfg;
  cfg.seed = seed;
  cfg.slls.n_eff = n_eff;
  switch (c) {
    case Comparator::constrained_default:
      break;  // package defaults
    case Comparator::gpd_classic:
      cfg.constrained = false;
      cfg.estimator.method = GpdEstimator::mle1d;
      cfg.threshold.method = ThresholdMethod::ftr;
      cfg.threshold.k0_rule = {0.0, 250};
      break;
    case Comparator::gpd_pow3:
      cfg.constrained = false;
      cfg.estimator.method = GpdEstimator::mle1d;
      cfg.threshold.method = ThresholdMethod::ftr;
      cfg.threshold.k0_rule = {0.0, 250};
      cfg.pow3 = true;
      break;
    case Comparator::gpd_plus_obs:
      cfg.constrained = false;
      cfg.estimator.method = GpdEstimator::mle1d;
      cfg.threshold.method = ThresholdMethod::ftr;
      cfg.threshold.k0_rule = {0.25, 0};
      cfg.include_obs = true;
      break;
    case Comparator::gamma_full:
      cfg.method = ApproxMethod::gamma;
      break;
  }
  return cfg;
}

struct ComparisonRow {
  ScenarioFamily family;
  std::size_t n;
  double d;
  std::size_t B;
  std::size_t rep;
  Comparator method;
  double raw_stat;
  double p_method;
  double p_reference;
  double ratio;  // p_method / p_reference
  bool zero;
  Source source;
  double xi_hat;  // NaN when no tail fit was made
};

/// Runs every comparator on each simulated replicate (one test per
/// replicate, as in the per-replicate simulation studies). Replicates run in
/// parallel; output order and content are independent of the thread count.
inline std::vector<ComparisonRow> run_comparison(const ScenarioSpec& spec,
                                                 std::span<const Comparator> methods,
                                                 int threads) {
  const std::size_t nm = methods.size();
  std::vector<ComparisonRow> rows(spec.reps * nm);
  detail::parallel_for(spec.reps, threads, [&](std::size_t rep) {
    const ReplicateData r = simulate_replicate(spec, rep);
    for (std::size_t mi = 0; mi < nm; ++mi) {
      WorkflowConfig cfg =
          comparator_config(methods[mi], derive_stream(spec.seed, 1000003 + rep),
                            static_cast<double>(spec.n));
      cfg.threads = 1;
      auto data = PermutationTestData::make({r.stat_obs}, {r.perms}, Tail::two_sided);
      const auto recs = run_workflow(std::move(data), cfg);
      ComparisonRow& row = rows[rep * nm + mi];
      row = {spec.family, spec.n,    spec.d,
             spec.B,      rep,       methods[mi],
             r.raw_stat,  recs[0].p_hybrid, r.reference_p,
             0.0,         false,     recs[0].source,
             std::numeric_limits<double>::quiet_NaN()};
      row.ratio = r.reference_p > 0.0 ? row.p_method / r.reference_p
                                      : std::numeric_limits<double>::infinity();
      row.zero = row.p_method == 0.0;
      if (recs[0].fit) row.xi_hat = recs[0].fit->params.xi;
    }
  });
  return rows;
}

/// A battery of independent tests assembled into one multi-test dataset
/// (tests_per_d tests for every effect size), with the matching reference
/// p-values. Used for the multi-test zero-count studies.
struct TestBattery {
  PermutationTestData data;
  std::vector<double> reference_p;
  std::vector<double> effect_sizes;
};

inline TestBattery make_battery(ScenarioFamily family, std::span<const double> ds,
                                std::size_t tests_per_d, std::size_t n, std::size_t B,
                                std::uint64_t seed, int threads) {
  const std::size_t m = ds.size() * tests_per_d;
  std::vector<double> t_obs(m);
  std::vector<std::vector<double>> perms(m);
  std::vector<double> refs(m);
  std::vector<double> effs(m);
  detail::parallel_for(m, threads, [&](std::size_t j) {
    ScenarioSpec spec;
    spec.family = family;
    spec.n = n;
    spec.d = ds[j / tests_per_d];
    spec.B = B;
    spec.seed = seed;
    const ReplicateData r = simulate_replicate(spec, j);
    t_obs[j] = r.stat_obs;
    perms[j] = std::move(r.perms);
    refs[j] = r.reference_p;
    effs[j] = spec.d;
  });
  TestBattery out{PermutationTestData::make(std::move(t_obs), std::move(perms), Tail::two_sided),
                  std::move(refs), std::move(effs)};
  return out;
}

/// GPD parameter recovery benchmark: RMSE of (xi_hat, sigma_hat) over
/// replicates, per (method, xi0, n) cell. Samples are shared across methods
/// within a cell so the comparison is paired.
struct BenchSpec {
  std::vector<double> xi0{-0.4, -0.2, 0.0, 0.2, 0.4};
  std::vector<std::size_t> ns{100, 250, 1000};
  std::vector<GpdEstimator> methods{GpdEstimator::mom, GpdEstimator::mle1d, GpdEstimator::mle2d,
                                    GpdEstimator::lme, GpdEstimator::zse};
  std::size_t reps = 500;
  double sigma0 = 1.0;
  std::uint64_t seed = 1;
};

struct BenchCell {
  GpdEstimator method;
  double xi0;
  std::size_t n;
  double rmse_xi;
  double rmse_sigma;
  std::size_t failures;
};

inline std::vector<BenchCell> estimator_benchmark(const BenchSpec& spec, int threads) {
  struct RepResult {
    double dxi2 = 0.0;
    double dsig2 = 0.0;
    bool failed = false;
  };
  const std::size_t n_cells = spec.xi0.size() * spec.ns.size();
  const std::size_t nm = spec.methods.size();
  std::vector<RepResult> results(n_cells * spec.reps * nm);

  detail::parallel_for(n_cells * spec.reps, threads, [&](std::size_t idx) {
    const std::size_t cell = idx / spec.reps;
    const std::size_t rep = idx % spec.reps;
    const double xi0 = spec.xi0[cell / spec.ns.size()];
    const std::size_t n = spec.ns[cell % spec.ns.size()];
    const GpdParams truth{spec.sigma0, xi0};
    const auto sample = gpd_sample(n, truth, derive_stream(spec.seed, idx));
    for (std::size_t mi = 0; mi < nm; ++mi) {
      RepResult& r = results[(cell * spec.reps + rep) * nm + mi];
      try {
        const GpdParams fit = fit_gpd(sample, {spec.methods[mi]});
        r.dxi2 = (fit.xi - xi0) * (fit.xi - xi0);
        r.dsig2 = (fit.sigma - spec.sigma0) * (fit.sigma - spec.sigma0);
      } catch (const EstimationError&) {
        r.failed = true;
      }
    }
  });

  std::vector<BenchCell> cells;
  cells.reserve(n_cells * nm);
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    for (std::size_t mi = 0; mi < nm; ++mi) {
      double sx = 0.0, ss = 0.0;
      std::size_t fails = 0, okc = 0;
      for (std::size_t rep = 0; rep < spec.reps; ++rep) {
        const RepResult& r = results[(cell * spec.reps + rep) * nm + mi];
        if (r.failed) {
          ++fails;
        } else {
          sx += r.dxi2;
          ss += r.dsig2;
          ++okc;
        }
      }
      const double denom = okc > 0 ? static_cast<double>(okc) : 1.0;
      cells.push_back({spec.methods[mi], spec.xi0[cell / spec.ns.size()],
                       spec.ns[cell % spec.ns.size()], std::sqrt(sx / denom),
                       std::sqrt(ss / denom), fails});
    }
  }
  return cells;
}

}  // namespace permtail
