// Batch front end: refine empirical permutation p-values with
// support-constrained GPD tail modeling, run the simulation scenarios, or
// benchmark the GPD estimators. TSV/CSV in, TSV out.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "permtail/permtail.hpp"

namespace {

using namespace permtail;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

char delimiter_for(const std::string& path, const std::string& format) {
  if (format == "csv") return ',';
  if (format == "tsv") return '\t';
  const auto dot = path.rfind('.');
  if (dot != std::string::npos && path.substr(dot) == ".csv") return ',';
  return '\t';
}

int env_threads() {
  const char* v = std::getenv("PERMTAIL_THREADS");
  if (v == nullptr) return 0;
  const int n = std::atoi(v);
  return n > 0 ? n : 0;
}

std::ostream& open_output(std::ofstream& file, const std::string& path) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw DataError("cannot open output file: " + path);
  return file;
}

struct ApproxOptions {
  std::string input;
  std::string obs_path;
  std::string perms_path;
  std::string output;
  std::string format = "auto";
  bool header = false;
  double alpha = 0.05;
  double p_thr = 0.0;
  std::string estimator = "lme";
  double estimator_tol = 0.0;
  double lme_r = -0.5;
  std::string threshold = "robftr";
  double k0_fraction = 0.25;
  std::size_t k0_floor = 250;
  std::size_t k0_fixed = 0;
  std::size_t step = 0;
  std::size_t min_exceedances = 30;
  double gof_alpha = 0.05;
  std::string gof_mode = "bootstrap";
  std::string gof_table_path;
  int n_boot = 999;
  bool unconstrained = false;
  std::string method = "gpd";
  bool pow3 = false;
  bool include_obs = false;
  double kappa_factor = 1000.0;
  double tau = 0.25;
  double rho_lift = 0.025;
  double eps_min = 1e-6;
  double n_ref = 500.0;
  double n_eff = 0.0;
  std::string zcap = "auto";
  double zcap_q = 0.999;
  bool no_refine = false;
  std::string tail = "right";
  std::uint64_t seed = 1;
  int threads = 0;
  std::size_t min_valid = 50;
};

GpdEstimator parse_estimator(const std::string& s) {
  static const std::map<std::string, GpdEstimator> table{{"mom", GpdEstimator::mom},
                                                         {"mle2d", GpdEstimator::mle2d},
                                                         {"mle1d", GpdEstimator::mle1d},
                                                         {"lme", GpdEstimator::lme},
                                                         {"zse", GpdEstimator::zse}};
  const auto it = table.find(s);
  if (it == table.end()) throw ConfigError("unknown estimator: " + s);
  return it->second;
}

ThresholdMethod parse_threshold(const std::string& s) {
  static const std::map<std::string, ThresholdMethod> table{
      {"ftr", ThresholdMethod::ftr},
      {"robftr", ThresholdMethod::rob_ftr},
      {"forwardstop", ThresholdMethod::forward_stop},
      {"changepoint", ThresholdMethod::gof_changepoint},
      {"shapevar", ThresholdMethod::shape_variation}};
  const auto it = table.find(s);
  if (it == table.end()) throw ConfigError("unknown threshold method: " + s);
  return it->second;
}

Tail parse_tail(const std::string& s) {
  if (s == "right") return Tail::right;
  if (s == "left") return Tail::left;
  if (s == "two-sided" || s == "two_sided") return Tail::two_sided;
  throw ConfigError("unknown tail: " + s);
}

int run_approx(const ApproxOptions& opt) {
  const Tail tail = parse_tail(opt.tail);

  io::LoadedData loaded;
  if (!opt.input.empty()) {
    std::ifstream in(opt.input);
    if (!in) throw DataError("cannot open input file: " + opt.input);
    loaded = io::load_wide(in, delimiter_for(opt.input, opt.format), opt.header, tail,
                           opt.min_valid);
  } else {
    std::ifstream obs_in(opt.obs_path);
    if (!obs_in) throw DataError("cannot open observed-statistics file: " + opt.obs_path);
    std::ifstream perm_in(opt.perms_path);
    if (!perm_in) throw DataError("cannot open permutation-matrix file: " + opt.perms_path);
    loaded = io::load_split(obs_in, perm_in, delimiter_for(opt.perms_path, opt.format),
                            opt.header, tail, opt.min_valid);
  }

  WorkflowConfig cfg;
  cfg.alpha = opt.alpha;
  cfg.p_thr = opt.p_thr;
  cfg.method = opt.method == "gamma" ? ApproxMethod::gamma : ApproxMethod::gpd;
  cfg.constrained = !opt.unconstrained;
  cfg.include_obs = opt.include_obs;
  cfg.pow3 = opt.pow3;
  cfg.refine = !opt.no_refine && cfg.constrained;  // refinement is the CLI default
  cfg.estimator.method = parse_estimator(opt.estimator);
  cfg.estimator.tol = opt.estimator_tol;
  cfg.estimator.lme_r = opt.lme_r;
  cfg.threshold.method = parse_threshold(opt.threshold);
  cfg.threshold.k0_rule =
      opt.k0_fixed > 0 ? K0Rule{0.0, opt.k0_fixed} : K0Rule{opt.k0_fraction, opt.k0_floor};
  cfg.threshold.step = opt.step;
  cfg.threshold.min_exceedances = opt.min_exceedances;
  cfg.threshold.gof_alpha = opt.gof_alpha;
  cfg.gof_n_boot = opt.n_boot;
  cfg.slls.kappa_factor = opt.kappa_factor;
  cfg.slls.tau = opt.tau;
  cfg.slls.rho_lift = opt.rho_lift;
  cfg.slls.eps_min = opt.eps_min;
  cfg.slls.n_ref = opt.n_ref;
  cfg.slls.n_eff = opt.n_eff;
  cfg.slls.zcap_quantile = opt.zcap_q;
  if (opt.zcap == "max") cfg.slls.zcap_policy = ZcapPolicy::max_over_tests;
  else if (opt.zcap == "quantile") cfg.slls.zcap_policy = ZcapPolicy::perm_quantile;
  else if (opt.zcap == "auto") cfg.slls.zcap_policy = ZcapPolicy::auto_select;
  else throw ConfigError("unknown zcap policy: " + opt.zcap);
  cfg.seed = opt.seed;
  cfg.threads = opt.threads > 0 ? opt.threads : env_threads();

  AdCriticalTable table;
  if (opt.gof_mode == "table") {
    if (opt.gof_table_path.empty())
      throw ConfigError("--gof-mode table requires --gof-table FILE");
    std::ifstream tin(opt.gof_table_path);
    if (!tin) throw DataError("cannot open critical-value table: " + opt.gof_table_path);
    table = AdCriticalTable::parse_tsv(tin);
    cfg.gof_mode = AdMode::table;
    cfg.gof_table = &table;
  } else if (opt.gof_mode != "bootstrap") {
    throw ConfigError("unknown gof mode: " + opt.gof_mode);
  }

  const auto records = run_workflow(loaded.data, cfg);

  std::ofstream file;
  std::ostream& os = open_output(file, opt.output);
  io::write_records_tsv(os, loaded, records);
  return kExitOk;
}

struct SimulateOptions {
  std::string family = "gaussian_ttest";
  std::size_t n = 100;
  double d = 1.0;
  std::size_t B = 1000;
  std::size_t reps = 200;
  std::vector<std::string> methods;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string output;
};

int run_simulate(const SimulateOptions& opt) {
  const int threads = opt.threads > 0 ? opt.threads : env_threads();
  std::ofstream file;
  std::ostream& os = open_output(file, opt.output);

  if (opt.family == "gpd_recovery") {
    BenchSpec spec;
    spec.seed = opt.seed;
    spec.reps = opt.reps;
    spec.ns = {opt.n};
    const auto cells = estimator_benchmark(spec, threads);
    io::write_bench_tsv(os, cells);
    return kExitOk;
  }

  ScenarioSpec spec;
  if (opt.family == "gaussian_ttest") spec.family = ScenarioFamily::gaussian_ttest;
  else if (opt.family == "exponential_wilcoxon") spec.family = ScenarioFamily::exponential_wilcoxon;
  else throw ConfigError("unknown family: " + opt.family);
  spec.n = opt.n;
  spec.d = opt.d;
  spec.B = opt.B;
  spec.reps = opt.reps;
  spec.seed = opt.seed;

  std::vector<Comparator> methods;
  if (opt.methods.empty() || (opt.methods.size() == 1 && opt.methods[0] == "all")) {
    methods.assign(kAllComparators.begin(), kAllComparators.end());
  } else {
    for (const auto& name : opt.methods) {
      bool found = false;
      for (Comparator c : kAllComparators) {
        if (name == to_string(c)) {
          methods.push_back(c);
          found = true;
        }
      }
      if (!found) throw ConfigError("unknown method: " + name);
    }
  }
  const auto rows = run_comparison(spec, methods, threads);
  io::write_comparison_tsv(os, rows);
  return kExitOk;
}

struct BenchOptions {
  std::vector<double> xi0{-0.4, -0.2, 0.0, 0.2, 0.4};
  std::vector<std::size_t> ns{100, 250, 1000};
  std::vector<std::string> methods;
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  int threads = 0;
  std::string output;
};

int run_bench(const BenchOptions& opt) {
  BenchSpec spec;
  spec.xi0 = opt.xi0;
  spec.ns = opt.ns;
  spec.reps = opt.reps;
  spec.seed = opt.seed;
  if (!opt.methods.empty()) {
    spec.methods.clear();
    for (const auto& name : opt.methods) spec.methods.push_back(parse_estimator(name));
  }
  const auto cells = estimator_benchmark(spec, opt.threads > 0 ? opt.threads : env_threads());
  std::ofstream file;
  std::ostream& os = open_output(file, opt.output);
  io::write_bench_tsv(os, cells);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"permtail: zero-free permutation p-value refinement via "
               "support-constrained GPD tail modeling"};
  app.require_subcommand(1);

  ApproxOptions ao;
  CLI::App* approx = app.add_subcommand("approx", "refine permutation p-values");
  approx->add_option("-i,--input", ao.input,
                     "wide matrix: first data row observed, then B permutation rows");
  approx->add_option("--obs", ao.obs_path, "observed statistics (two-file mode)");
  approx->add_option("--perms", ao.perms_path, "permutation matrix (two-file mode)");
  approx->add_option("-o,--output", ao.output, "output TSV ('-' = stdout)");
  approx->add_option("--format", ao.format, "input format: auto|tsv|csv")
      ->check(CLI::IsMember({"auto", "tsv", "csv"}));
  approx->add_flag("--header", ao.header, "first input row is a header with test ids");
  approx->add_option("--alpha", ao.alpha, "significance level (default 0.05)");
  approx->add_option("--p-thr", ao.p_thr, "screening threshold (default 2*alpha)");
  approx->add_option("--estimator", ao.estimator, "mom|mle2d|mle1d|lme|zse (default lme)");
  approx->add_option("--tol", ao.estimator_tol, "optimizer tolerance (default per method)");
  approx->add_option("--lme-r", ao.lme_r, "LME tuning exponent (default -0.5)");
  approx->add_option("--threshold", ao.threshold,
                     "ftr|robftr|forwardstop|changepoint|shapevar (default robftr)");
  approx->add_option("--k0-fraction", ao.k0_fraction, "k0 as a fraction of B (default 0.25)");
  approx->add_option("--k0-floor", ao.k0_floor, "minimum k0 (default 250)");
  approx->add_option("--k0", ao.k0_fixed, "fixed k0 override");
  approx->add_option("--step", ao.step, "scan step (default 10 for ftr/robftr, else 1)");
  approx->add_option("--min-exceedances", ao.min_exceedances, "smallest candidate k (default 30)");
  approx->add_option("--gof-alpha", ao.gof_alpha, "GoF level inside threshold selection");
  approx->add_option("--gof-mode", ao.gof_mode, "bootstrap|table");
  approx->add_option("--gof-table", ao.gof_table_path, "critical-value table for table mode");
  approx->add_option("--n-boot", ao.n_boot, "bootstrap replicates (default 999)");
  approx->add_flag("--unconstrained", ao.unconstrained, "disable the support constraint");
  approx->add_option("--method", ao.method, "gpd|gamma (default gpd)")
      ->check(CLI::IsMember({"gpd", "gamma"}));
  approx->add_flag("--pow3", ao.pow3, "cube all statistics before tail fitting");
  approx->add_flag("--include-obs", ao.include_obs,
                   "append the observed statistic to the permutation set for tail fitting");
  approx->add_option("--kappa-factor", ao.kappa_factor, "SLLS curvature constant");
  approx->add_option("--tau", ao.tau, "SLLS plateau constant (default 0.25)");
  approx->add_option("--rho-lift", ao.rho_lift, "SLLS lift magnitude (default 0.025)");
  approx->add_option("--eps-min", ao.eps_min, "SLLS margin floor (default 1e-6)");
  approx->add_option("--n-ref", ao.n_ref, "SLLS reference sample size (default 500)");
  approx->add_option("--n-eff", ao.n_eff, "per-group sample size min(n1,n2); 0 = neutral");
  approx->add_option("--zcap", ao.zcap, "auto|max|quantile");
  approx->add_option("--zcap-q", ao.zcap_q, "quantile for the permutation-based cap");
  approx->add_flag("--no-refine", ao.no_refine, "disable the tau refinement pass");
  approx->add_option("--tail", ao.tail, "right|left|two-sided (default right)");
  approx->add_option("--seed", ao.seed, "RNG seed (default 1)");
  approx->add_option("--threads", ao.threads, "worker threads (default $PERMTAIL_THREADS or all)");
  approx->add_option("--min-valid", ao.min_valid,
                     "minimum usable permutation rows per test (default 50)");

  SimulateOptions so;
  CLI::App* simulate = app.add_subcommand("simulate", "run a simulation scenario");
  simulate->add_option("--family", so.family, "gaussian_ttest|exponential_wilcoxon|gpd_recovery")
      ->required();
  simulate->add_option("--n", so.n, "per-group sample size");
  simulate->add_option("--d", so.d, "effect size");
  simulate->add_option("--B", so.B, "permutation count");
  simulate->add_option("--reps", so.reps, "replicates");
  simulate->add_option("--methods", so.methods, "comparators (default all)");
  simulate->add_option("--seed", so.seed, "RNG seed");
  simulate->add_option("--threads", so.threads, "worker threads");
  simulate->add_option("-o,--output", so.output, "output TSV ('-' = stdout)");

  BenchOptions bo;
  CLI::App* bench = app.add_subcommand("bench-estimators", "GPD estimator accuracy benchmark");
  bench->add_option("--xi0", bo.xi0, "true shape values");
  bench->add_option("--n", bo.ns, "sample sizes");
  bench->add_option("--methods", bo.methods, "estimators (default all five)");
  bench->add_option("--reps", bo.reps, "replicates per cell (default 500)");
  bench->add_option("--seed", bo.seed, "RNG seed");
  bench->add_option("--threads", bo.threads, "worker threads");
  bench->add_option("-o,--output", bo.output, "output TSV ('-' = stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (approx->parsed()) {
      if (ao.input.empty() == (ao.obs_path.empty() || ao.perms_path.empty()))
        throw ConfigError("provide either --input or both --obs and --perms");
      return run_approx(ao);
    }
    if (simulate->parsed()) return run_simulate(so);
    if (bench->parsed()) return run_bench(bo);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
