// Acceptance suite: reproduces the simulation studies end to end and runs
// the property checks, printing one PASS/FAIL line per criterion. Exits
// with the number of failed criteria.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bamm/ecm.hpp"
#include "bamm/inference.hpp"
#include "bamm/io.hpp"
#include "bamm/mechanism.hpp"
#include "bamm/parallel.hpp"
#include "bamm/rng.hpp"
#include "bamm/simulation.hpp"
#include "mc_oracle.hpp"
#include "test_util.hpp"

using namespace bamm;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string cli_path;
  std::string work_dir = "acceptance_work";
  int threads = 0;
  bool quick = false;  // reduced replicate counts for development only
};

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL",
              criterion, name.c_str(), detail.empty() ? "" : " -- ",
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

bool in_band(double v, double lo, double hi) {
  return std::isfinite(v) && v >= lo && v <= hi;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// ---- criteria 1 and 2: estimation-accuracy study ----

void criterion_1_2(const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  MseStudyConfig config;
  config.n_replicates = opt.quick ? 100 : 1000;
  config.n_replicates_logit = opt.quick ? 40 : 200;
  config.threads = opt.threads;
  config.seed = 2024;
  const auto rows = run_mse_study(config);

  bool pass1 = true;
  std::ostringstream d1;
  for (const auto& r : rows) {
    if (r.logit_analysis) continue;
    const double lo = r.q == 40 ? 0.75 : 0.40;
    const double hi = r.q == 40 ? 0.95 : 0.60;
    const bool alpha_ok = in_band(r.alpha, lo, hi);
    const bool vc_ok = in_band(r.sigma0_sq, 0.90, 1.25) &&
                       in_band(r.sigma_sq, 0.90, 1.25) &&
                       in_band(r.d, 0.90, 1.25);
    pass1 = pass1 && alpha_ok && vc_ok;
    d1 << "Q=" << r.q << " alpha=" << fmt(r.alpha) << " s0=" << fmt(r.sigma0_sq)
       << " s2=" << fmt(r.sigma_sq) << " D=" << fmt(r.d) << "; ";
  }
  d1 << "elapsed " << fmt(elapsed_since(t0)) << "s";
  report(1, "relative MSEs, exponential mechanism", pass1, d1.str());

  bool pass2 = true;
  std::ostringstream d2;
  for (const auto& r : rows) {
    if (!r.logit_analysis || r.q != 40) continue;
    pass2 = in_band(r.alpha, 0.75, 0.95);
    d2 << "Q=40 alpha=" << fmt(r.alpha) << " (logit gamma="
       << fmt(r.logit_gamma) << ")";
  }
  report(2, "relative MSE, logit analysis of exponential data", pass2, d2.str());
}

// ---- criteria 3 and 4: type-I error and power study ----

void criterion_3_4(const Options& opt) {
  PowerStudyConfig config;
  config.n_replicates = opt.quick ? 100 : 1000;
  config.n_permutations = opt.quick ? 199 : 999;
  config.threads = opt.threads;
  config.seed = 42;

  const auto t0 = std::chrono::steady_clock::now();
  PowerStudyConfig type1 = config;
  type1.include_power = false;
  const auto rows_t1 = run_power_study(type1);

  bool pass3 = true;
  std::ostringstream d3;
  for (const auto& r : rows_t1) {
    const double lo = r.cutoff == 0.05 ? 0.03 : 0.004;
    const double hi = r.cutoff == 0.05 ? 0.07 : 0.02;
    const bool ok = in_band(r.rate_badmm, lo, hi) &&
                    in_band(r.rate_mar, lo, hi) &&
                    in_band(r.rate_baseline, lo, hi);
    pass3 = pass3 && ok;
    d3 << "Q" << r.q << (r.large_variance ? "L" : "S") << "@" << r.cutoff
       << "=" << fmt(r.rate_badmm) << "/" << fmt(r.rate_mar) << "/"
       << fmt(r.rate_baseline) << " ";
  }
  d3 << "elapsed " << fmt(elapsed_since(t0)) << "s";
  report(3, "type-I error control (all three methods)", pass3, d3.str());

  const auto t1 = std::chrono::steady_clock::now();
  PowerStudyConfig power = config;
  power.include_type1 = false;
  power.q_values = {40};
  const auto rows_pow = run_power_study(power);

  bool pass4 = true;
  std::ostringstream d4;
  for (const auto& r : rows_pow) {
    if (r.cutoff != 0.05) continue;
    if (r.large_variance) {
      const bool ok = in_band(r.rate_badmm, 0.38, 0.50) &&
                      r.rate_badmm >= 2.0 * r.rate_baseline;
      pass4 = pass4 && ok;
      d4 << "large: mixemm=" << fmt(r.rate_badmm)
         << " baseline=" << fmt(r.rate_baseline) << "; ";
    } else {
      const bool ok = in_band(r.rate_badmm, 0.93, 0.98);
      pass4 = pass4 && ok;
      d4 << "small: mixemm=" << fmt(r.rate_badmm) << "; ";
    }
  }
  d4 << "elapsed " << fmt(elapsed_since(t1)) << "s";
  report(4, "power ordering and magnitude", pass4, d4.str());
}

// ---- criterion 5: mechanism estimation study ----

void criterion_5(const Options& opt) {
  MechanismStudyConfig config;
  config.q_values = {40};
  config.n_repetitions = opt.quick ? 20 : 100;
  config.threads = opt.threads;
  const auto rows = run_mechanism_study(config);
  double gamma_mean = 0.0, gamma0_mean = 1.0;
  for (const auto& r : rows) {
    if (r.parameter == "gamma") gamma_mean = r.mean;
    if (r.parameter == "gamma0") gamma0_mean = r.mean;
  }
  const bool pass = in_band(gamma_mean, 0.095, 0.107) && gamma0_mean < 0.0;
  std::ostringstream d;
  d << "mean gamma=" << fmt(gamma_mean) << " mean gamma0=" << fmt(gamma0_mean);
  report(5, "available-case mechanism estimates", pass, d.str());
}

// ---- criterion 6: property suite ----

void criterion_6(const Options& opt) {
  const int n_instances = opt.quick ? 20 : 100;
  bool monotone_ok = true, psd_ok = true;
  double worst_drop = 0.0;
  {
    std::vector<int> bad_mono(n_instances, 0), bad_psd(n_instances, 0);
    std::vector<double> drops(n_instances, 0.0);
    parallel_for(n_instances, opt.threads, [&](std::size_t i) {
      Rng rng(9000 + i);
      auto inst = test::random_instance(rng, i % 3 == 2, 20, true);
      FitConfig config;
      config.max_iter = 200;
      try {
        const FitResult f = fit(inst.data, inst.designs, inst.mech, config);
        for (std::size_t t = 1; t < f.loglik_trace.size(); ++t) {
          const double drop = f.loglik_trace[t - 1] - f.loglik_trace[t];
          drops[i] = std::max(drops[i], drop);
          if (drop > 1e-8) bad_mono[i] = 1;
        }
        if (f.psd_violations != 0) bad_psd[i] = 1;
      } catch (const std::exception&) {
        bad_mono[i] = 1;
      }
    });
    for (int i = 0; i < n_instances; ++i) {
      monotone_ok = monotone_ok && bad_mono[i] == 0;
      psd_ok = psd_ok && bad_psd[i] == 0;
      worst_drop = std::max(worst_drop, drops[i]);
    }
  }
  report(6, "(a) monotone observed-data log-likelihood", monotone_ok,
         "worst decrease " + fmt(worst_drop) + " over " +
             std::to_string(n_instances) + " instances");

  // (b) tilted moments against rejection-sampling oracles
  {
    const int n_settings = opt.quick ? 6 : 20;
    const int n_accept = opt.quick ? 30000 : 100000;
    std::vector<test::OracleDeviation> devs(n_settings);
    parallel_for(n_settings, opt.threads, [&](std::size_t i) {
      Rng rng(7100 + i);
      const bool logit = i % 2 == 1;
      auto inst = test::random_instance(rng, logit, 3, false);
      const ModelParameters& p = inst.truth;
      const BatchDesign& d = inst.designs[0];
      Rng mc_rng(5200 + i);
      if (!logit) {
        double s_mean = 0.0, s_var = 0.0;
        batch_mean_law(p, d, &s_mean, &s_var);
        const MissingMechanism& m = inst.mech;
        const double bound = std::exp(
            -m.gamma0 - m.gamma * (s_mean - 8.0 * std::sqrt(s_var)));
        const auto mc = test::rejection_oracle(
            p, d,
            [&](double s) { return std::exp(-m.gamma0 - m.gamma * s); },
            bound, n_accept, mc_rng);
        devs[i] = test::oracle_discrepancy(
            tilted_moments_exponential(p, d, m), mc);
      } else {
        const MissingMechanism& m = inst.mech;
        const auto mc = test::rejection_oracle(
            p, d,
            [&](double s) {
              const double eta = m.gamma0 + m.gamma * s;
              return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta))
                              : std::exp(eta) / (1.0 + std::exp(eta));
            },
            1.0, n_accept, mc_rng);
        devs[i] =
            test::oracle_discrepancy(tilted_moments_logit(p, d, m), mc);
      }
    });
    double w = 0.0;
    int m = 0;
    for (const auto& d : devs) {
      w = std::max(w, d.worst);
      m += d.n_entries;
    }
    const double limit = test::three_se_threshold(m);
    report(6, "(b) tilted moments within 3 MC standard errors", w <= limit,
           "worst |err|/se = " + fmt(w) + " (familywise 3-se limit " +
               fmt(limit) + ", " + std::to_string(n_settings) + " settings)");
  }

  // (c) gamma0 invariance of the fitted parameters
  {
    Rng rng(333);
    auto inst = test::random_instance(rng, false, 30, true);
    FitConfig config;
    config.monitor_likelihood = false;
    MissingMechanism m = inst.mech;
    double worst = 0.0;
    FitResult base;
    for (double g0 : {0.0, 0.5, 3.0}) {
      m.gamma0 = g0;
      const FitResult f = fit(inst.data, inst.designs, m, config);
      if (g0 == 0.0) {
        base = f;
        continue;
      }
      worst = std::max(
          worst, (f.params.alpha - base.params.alpha).cwiseAbs().maxCoeff());
      worst = std::max(worst,
                       std::abs(f.params.sigma0_sq - base.params.sigma0_sq));
      worst =
          std::max(worst, std::abs(f.params.sigma_sq - base.params.sigma_sq));
      worst = std::max(worst,
                       (f.params.d - base.params.d).cwiseAbs().maxCoeff());
    }
    report(6, "(c) gamma0 invariance of the estimates", worst <= 1e-10,
           "max difference " + fmt(worst));
  }

  // (d) complete data, gamma = 0: independent GLS oracle
  {
    Rng rng(999);
    auto inst = test::random_instance(rng, false, 40, false);
    for (std::size_t i = 0; i < inst.data.batches.size(); ++i) {
      if (!inst.data.batch_missing[i]) continue;
      inst.data.batch_missing[i] = false;
      const Index p = inst.designs[i].batch_size();
      inst.data.observed[i].assign(static_cast<std::size_t>(p), true);
      Vector y = inst.designs[i].x * inst.truth.alpha;
      for (Index r = 0; r < p; ++r) y[r] += rng.normal();
      inst.data.batches[i] = y;
    }
    MissingMechanism mar;
    mar.gamma = 0.0;
    FitConfig config;
    config.tol = 1e-11;
    config.max_iter = 8000;
    config.monitor_likelihood = false;
    const FitResult f = fit(inst.data, inst.designs, mar, config);
    const Index k = inst.designs[0].n_fixed();
    Matrix a = Matrix::Zero(k, k);
    Vector rhs = Vector::Zero(k);
    for (std::size_t i = 0; i < inst.designs.size(); ++i) {
      const Matrix w =
          marginal_covariance(f.params, inst.designs[i]).inverse();
      a += inst.designs[i].x.transpose() * w * inst.designs[i].x;
      rhs += inst.designs[i].x.transpose() * w * inst.data.batches[i];
    }
    const Vector alpha_gls = a.ldlt().solve(rhs);
    const double err = (f.params.alpha - alpha_gls).cwiseAbs().maxCoeff();
    report(6, "(d) complete-data fit matches the GLS oracle", err <= 1e-6,
           "max |alpha - alpha_gls| = " + fmt(err) +
               (f.converged ? "" : " (fit not converged)"));
  }

  // (e) covered by the audits of (a)
  report(6, "(e) CM updates stay in the parameter space", psd_ok,
         psd_ok ? "no PSD/non-negativity violations" : "violations found");

  // (f) quadrature node-doubling convergence
  {
    Rng rng(777);
    bool ok = true;
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const double mu = 20.0 * rng.uniform() - 5.0;
      const double v = 0.1 + 4.0 * rng.uniform();
      const double g0 = 2.0 * rng.normal();
      const double g1 = 0.5 * rng.normal();
      const WeightedMoments a =
          logistic_weighted_moments(mu, v, g0, g1, 16);
      const WeightedMoments b =
          logistic_weighted_moments(mu, v, g0, g1, 32);
      const double rel = std::max(
          {std::abs(a.prob - b.prob) / std::abs(b.prob),
           std::abs(a.mean - b.mean) / std::abs(b.mean),
           std::abs(a.var - b.var) / std::abs(b.var)});
      worst = std::max(worst, rel);
      ok = ok && rel <= 1e-8;
    }
    report(6, "(f) quadrature node-doubling convergence", ok,
           "worst relative change " + fmt(worst));
  }
}

// ---- criterion 7: CLI round trip ----

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void criterion_7(const Options& opt) {
  if (opt.cli_path.empty()) {
    report(7, "CLI round trip", false, "no --cli path given");
    return;
  }
  const fs::path work = fs::path(opt.work_dir) / "cli_roundtrip";
  fs::remove_all(work);
  fs::create_directories(work);

  Scenario sc;
  sc.q = 24;
  sc.a = 0.7;
  sc.seed = 77;
  const int n_features = 40;
  const Study study = generate_study(sc, n_features);
  write_study_inputs(study, work.string());

  // in-memory harness: same study object, no file round trip
  StudyConfig config;
  config.gamma_source = StudyConfig::GammaSource::fixed;
  config.gamma = 0.1;
  config.gamma0 = 0.0;
  config.n_permutations = 199;
  config.seed = 11;
  config.threads = opt.threads;
  config.min_ref_obs_frac = 0.0;
  const StudyResult mem = run_study(study, config);
  write_study_outputs(study, mem, (work / "mem").string());

  auto run_cli = [&](const std::string& out) {
    std::ostringstream cmd;
    cmd << opt.cli_path << " run --abundance " << (work / "abundance.tsv")
        << " --batch-map " << (work / "batch_map.tsv") << " --covariates "
        << (work / "covariates.tsv")
        << " --mechanism exp --gamma0 0 --gamma 0.1 --permutations 199"
        << " --seed 11 --threads " << (opt.threads > 0 ? opt.threads : 0)
        << " --min-ref-obs-frac 0 --out " << (work / out) << " > "
        << (work / (out + ".log")) << " 2>&1";
    return std::system(cmd.str().c_str());
  };
  const int rc1 = run_cli("cli1");
  const int rc2 = run_cli("cli2");

  bool pass = rc1 == 0 && rc2 == 0;
  std::string detail;
  if (!pass) {
    detail = "CLI exited with " + std::to_string(rc1) + "/" +
             std::to_string(rc2);
  } else {
    for (const char* name : {"results.tsv", "diagnostic.tsv",
                             "diagnostic_binned.tsv", "errors.tsv"}) {
      const std::string mem_bytes = slurp((work / "mem" / name).string());
      const std::string cli_bytes = slurp((work / "cli1" / name).string());
      const std::string cli_bytes2 = slurp((work / "cli2" / name).string());
      if (mem_bytes.empty() || cli_bytes != cli_bytes2) {
        pass = false;
        detail = std::string(name) + " differs between repeated CLI runs";
        break;
      }
      if (cli_bytes != mem_bytes) {
        pass = false;
        detail = std::string(name) + " differs from the in-memory harness";
        break;
      }
    }
    if (pass)
      detail = "CLI output byte-identical to the in-memory run (" +
               std::to_string(n_features) + " features)";
  }
  report(7, "CLI round trip", pass, detail);
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    auto next = [&]() -> std::string {
      return i + 1 < argc ? argv[++i] : "";
    };
    if (arg == "--cli") opt.cli_path = next();
    else if (arg == "--work-dir") opt.work_dir = next();
    else if (arg == "--threads") opt.threads = std::atoi(next().c_str());
    else if (arg == "--quick") opt.quick = true;
  }
  fs::create_directories(opt.work_dir);
  if (opt.quick)
    std::printf("note: --quick run with reduced replicate counts; not the "
                "acceptance configuration\n");

  const auto t0 = std::chrono::steady_clock::now();
  criterion_1_2(opt);
  criterion_5(opt);
  criterion_6(opt);
  criterion_7(opt);
  criterion_3_4(opt);

  std::printf("%d criterion failure(s); total %.1fs\n", g_failures,
              elapsed_since(t0));
  return g_failures == 0 ? 0 : 1;
}
