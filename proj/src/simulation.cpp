#include "bamm/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>

#include "bamm/ecm.hpp"
#include "bamm/parallel.hpp"
#include "bamm/rng.hpp"

namespace bamm {

void Scenario::validate() const {
  if (q < 2) throw_error(ErrorCode::invalid_argument, "q must be >= 2");
  if (p < 2) throw_error(ErrorCode::invalid_argument, "p must be >= 2");
  if (!(sigma0_sq > 0.0) || !(sigma_sq > 0.0) || !(d > 0.0))
    throw_error(ErrorCode::invalid_argument, "variances must be positive");
  if (sporadic_rate < 0.0 || sporadic_rate >= 1.0)
    throw_error(ErrorCode::invalid_argument, "sporadic_rate must be in [0,1)");
  if (n_replicates < 1)
    throw_error(ErrorCode::invalid_argument, "n_replicates must be >= 1");
}

namespace {

std::vector<double> group_labels(const Scenario& sc, Rng& rng) {
  const std::size_t n_targets =
      static_cast<std::size_t>(sc.q) * static_cast<std::size_t>(sc.p - 1);
  std::vector<double> g(n_targets, 0.0);
  switch (sc.group) {
    case Scenario::GroupAssignment::balanced: {
      for (std::size_t i = 0; i < n_targets / 2; ++i) g[i] = 1.0;
      rng.shuffle(g.data(), g.size());
      break;
    }
    case Scenario::GroupAssignment::bernoulli: {
      for (auto& v : g) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      break;
    }
    case Scenario::GroupAssignment::batch: {
      std::vector<double> per_batch(static_cast<std::size_t>(sc.q), 0.0);
      for (std::size_t i = 0; i < per_batch.size() / 2; ++i)
        per_batch[i] = 1.0;
      rng.shuffle(per_batch.data(), per_batch.size());
      for (int i = 0; i < sc.q; ++i)
        for (int j = 0; j < sc.p - 1; ++j)
          g[static_cast<std::size_t>(i * (sc.p - 1) + j)] =
              per_batch[static_cast<std::size_t>(i)];
      break;
    }
  }
  return g;
}

}  // namespace

Replicate generate_replicate(const Scenario& sc, int replicate_index) {
  sc.validate();
  Rng rng(Rng::mix(sc.seed, 0x5eedULL + static_cast<std::uint64_t>(
                                            replicate_index)));
  Replicate rep;
  rep.truth.alpha = Vector::Zero(3);
  rep.truth.alpha << sc.alpha0, -sc.a, sc.a;
  rep.truth.sigma0_sq = sc.sigma0_sq;
  rep.truth.sigma_sq = sc.sigma_sq;
  rep.truth.d = sc.d;

  const std::vector<double> groups = group_labels(sc, rng);

  MissingMechanism mech;
  mech.gamma0 = sc.gamma0;
  mech.gamma = sc.gamma;

  bool any_observed = false;
  for (int i = 0; i < sc.q; ++i) {
    BatchDesign d;
    d.x = Matrix::Zero(sc.p, 3);
    d.x.col(0).setOnes();
    d.x(0, 1) = 1.0;  // reference indicator, reference on row 0
    for (int j = 1; j < sc.p; ++j)
      d.x(j, 2) = groups[static_cast<std::size_t>(i * (sc.p - 1) + (j - 1))];
    d.z = Matrix::Ones(sc.p, 1);
    d.reference_channel = 0;

    const double b = std::sqrt(sc.d) * rng.normal();
    Vector y = d.x * rep.truth.alpha;
    for (int j = 0; j < sc.p; ++j) {
      const double sd =
          j == 0 ? std::sqrt(sc.sigma0_sq) : std::sqrt(sc.sigma_sq);
      y[j] += b + sd * rng.normal();
    }

    // Batch-level missingness from the realized batch mean over all
    // channels (reference included).
    const double pr = miss_prob(mech, y.mean());
    bool missing = rng.uniform() < pr;
    std::vector<bool> obs(static_cast<std::size_t>(sc.p), !missing);
    if (!missing && sc.sporadic_rate > 0.0) {
      for (int j = 0; j < sc.p; ++j)
        if (rng.uniform() < sc.sporadic_rate)
          obs[static_cast<std::size_t>(j)] = false;
      bool any = false;
      for (bool o : obs) any = any || o;
      if (!any) {  // sporadic losses emptied the batch
        missing = true;
      }
    }
    if (missing) obs.assign(static_cast<std::size_t>(sc.p), false);
    Vector stored = y;
    for (int j = 0; j < sc.p; ++j)
      if (!obs[static_cast<std::size_t>(j)])
        stored[j] = std::numeric_limits<double>::quiet_NaN();

    any_observed = any_observed || !missing;
    rep.designs.push_back(std::move(d));
    rep.data.batches.push_back(std::move(stored));
    rep.data.batch_missing.push_back(missing);
    rep.data.observed.push_back(std::move(obs));
  }
  if (!any_observed)
    throw_error(ErrorCode::estimation_error,
                "degenerate replicate: every batch is missing");
  return rep;
}

// ---- power study ----

namespace {

struct VarianceSetting {
  bool large = true;
  double sigma0_sq = 2.0, sigma_sq = 4.0, d = 3.0;
};

const VarianceSetting kLarge{true, 2.0, 4.0, 3.0};
const VarianceSetting kSmall{false, 1.0, 2.0, 1.0};

struct RejectionCounts {
  long badmm_05 = 0, badmm_01 = 0;
  long mar_05 = 0, mar_01 = 0;
  long base_05 = 0, base_01 = 0;
  long n_tests = 0;
  int n_ok = 0;
  int n_failed = 0;
};

}  // namespace

std::vector<PowerStudyRow> run_power_study(const PowerStudyConfig& config) {
  std::vector<PowerStudyRow> rows;
  for (int q : config.q_values) {
    for (const VarianceSetting* vs : {&kLarge, &kSmall}) {
      if (vs->large && !config.include_large) continue;
      if (!vs->large && !config.include_small) continue;
      std::vector<double> a_values;
      if (config.include_type1) a_values.push_back(0.0);
      if (config.include_power) a_values.push_back(q == 40 ? 0.7 : 0.3);
      for (double a : a_values) {
        Scenario sc;
        sc.q = q;
        sc.a = a;
        sc.sigma0_sq = vs->sigma0_sq;
        sc.sigma_sq = vs->sigma_sq;
        sc.d = vs->d;
        sc.n_permutations = config.n_permutations;
        sc.group = config.group;
        sc.seed = Rng::mix(config.seed,
                           Rng::hash_string(std::to_string(q) +
                                            (vs->large ? "L" : "S") +
                                            std::to_string(a)));

        MissingMechanism badmm;
        badmm.gamma = 0.1;
        MissingMechanism mar;
        mar.gamma = 0.0;
        FitConfig fc;
        fc.monitor_likelihood = false;
        fc.tol = config.fit_tol;
        fc.max_iter = config.fit_max_iter;

        std::vector<RejectionCounts> partial(
            static_cast<std::size_t>(config.n_replicates));
        parallel_for(
            static_cast<std::size_t>(config.n_replicates), config.threads,
            [&](std::size_t r) {
              RejectionCounts& c = partial[r];
              try {
                const Replicate rep =
                    generate_replicate(sc, static_cast<int>(r));
                const std::uint64_t perm_seed =
                    Rng::mix(sc.seed, 0xabcdULL + r);
                const TestResult t_badmm = permutation_test(
                    rep.data, rep.designs, badmm, fc, config.tested_columns,
                    config.n_permutations, perm_seed);
                const TestResult t_mar = permutation_test(
                    rep.data, rep.designs, mar, fc, config.tested_columns,
                    config.n_permutations, perm_seed);
                const TestResult t_base = relative_abundance_baseline(
                    rep.data, rep.designs, {2}, {2}, config.n_permutations,
                    perm_seed);
                for (const auto& coef : t_badmm.coefficients) {
                  c.badmm_05 += coef.p_perm <= 0.05;
                  c.badmm_01 += coef.p_perm <= 0.01;
                }
                for (const auto& coef : t_mar.coefficients) {
                  c.mar_05 += coef.p_perm <= 0.05;
                  c.mar_01 += coef.p_perm <= 0.01;
                }
                for (const auto& coef : t_base.coefficients) {
                  c.base_05 += coef.p_perm <= 0.05;
                  c.base_01 += coef.p_perm <= 0.01;
                }
                c.n_tests +=
                    static_cast<long>(config.tested_columns.size());
                c.n_ok = 1;
              } catch (const std::exception&) {
                c.n_failed = 1;
              }
            });

        RejectionCounts total;
        for (const auto& c : partial) {
          total.badmm_05 += c.badmm_05;
          total.badmm_01 += c.badmm_01;
          total.mar_05 += c.mar_05;
          total.mar_01 += c.mar_01;
          total.base_05 += c.base_05;
          total.base_01 += c.base_01;
          total.n_tests += c.n_tests;
          total.n_ok += c.n_ok;
          total.n_failed += c.n_failed;
        }
        const double denom_badmm =
            std::max<long>(total.n_tests, 1);
        // the baseline tests a single column regardless of tested set
        const double denom_base = std::max(total.n_ok, 1);
        for (double cutoff : {0.05, 0.01}) {
          PowerStudyRow row;
          row.q = q;
          row.large_variance = vs->large;
          row.a = a;
          row.cutoff = cutoff;
          row.n_effective = total.n_ok;
          row.n_failed = total.n_failed;
          if (cutoff == 0.05) {
            row.rate_badmm = total.badmm_05 / denom_badmm;
            row.rate_mar = total.mar_05 / denom_badmm;
            row.rate_baseline = total.base_05 / denom_base;
          } else {
            row.rate_badmm = total.badmm_01 / denom_badmm;
            row.rate_mar = total.mar_01 / denom_badmm;
            row.rate_baseline = total.base_01 / denom_base;
          }
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

// ---- MSE study ----

namespace {

struct SquaredErrors {
  Vector alpha_sq;
  double s0 = 0.0, s2 = 0.0, d = 0.0;
  double seconds = 0.0;
  bool ok = false;

  void accumulate(const FitResult& f, const Truth& truth, double secs) {
    alpha_sq = (f.params.alpha - truth.alpha).array().square();
    const double dd = f.params.d(0, 0) - truth.d;
    s0 = (f.params.sigma0_sq - truth.sigma0_sq) *
         (f.params.sigma0_sq - truth.sigma0_sq);
    s2 = (f.params.sigma_sq - truth.sigma_sq) *
         (f.params.sigma_sq - truth.sigma_sq);
    d = dd * dd;
    seconds = secs;
    ok = true;
  }
};

struct MseAccumulator {
  Vector alpha_sum = Vector::Zero(3);
  double s0 = 0.0, s2 = 0.0, d = 0.0, seconds = 0.0;
  long n = 0;

  void add(const SquaredErrors& e) {
    if (!e.ok) return;
    alpha_sum += e.alpha_sq;
    s0 += e.s0;
    s2 += e.s2;
    d += e.d;
    seconds += e.seconds;
    ++n;
  }
};

double timed_seconds(const std::function<void()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  fn();
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(stop - start).count();
}

}  // namespace

std::vector<MseStudyRow> run_mse_study(const MseStudyConfig& config) {
  std::vector<MseStudyRow> rows;
  for (int q : config.q_values) {
    Scenario sc;
    sc.q = q;
    sc.a = 1.0;
    sc.group = config.group;
    sc.seed = Rng::mix(config.seed, static_cast<std::uint64_t>(q));

    // Logit mechanism matched to the observed missing pattern of a feature
    // ensemble generated under the same law.
    GammaEstimate logit_fit{};
    if (config.run_logit) {
      const auto ensemble = mechanism_ensemble(
          sc, 1000, 10.0, 2.0, Rng::mix(sc.seed, 0x70617474ULL));
      logit_fit = estimate_gamma_logit(ensemble);
    }

    MissingMechanism badmm;
    badmm.gamma = 0.1;
    MissingMechanism mar;
    mar.gamma = 0.0;
    MissingMechanism logit;
    logit.form = MissingMechanism::Form::logit;
    logit.gamma0 = logit_fit.gamma0;
    logit.gamma = logit_fit.gamma;

    FitConfig fc;
    fc.monitor_likelihood = false;

    const int n_exp = config.n_replicates;
    const int n_logit = config.run_logit ? config.n_replicates_logit : 0;
    const int n_all = std::max(n_exp, n_logit);

    std::vector<SquaredErrors> e_badmm(static_cast<std::size_t>(n_all));
    std::vector<SquaredErrors> e_mar(static_cast<std::size_t>(n_all));
    std::vector<SquaredErrors> e_mar_logit(static_cast<std::size_t>(n_all));
    std::vector<SquaredErrors> e_logit(static_cast<std::size_t>(n_all));

    parallel_for(
        static_cast<std::size_t>(n_all), config.threads, [&](std::size_t r) {
          Replicate rep;
          try {
            rep = generate_replicate(sc, static_cast<int>(r));
          } catch (const std::exception&) {
            return;
          }
          if (static_cast<int>(r) < n_exp) {
            try {
              FitResult f;
              const double secs =
                  timed_seconds([&] { f = fit(rep.data, rep.designs, badmm, fc); });
              e_badmm[r].accumulate(f, rep.truth, secs);
              FitResult g;
              const double secs_mar =
                  timed_seconds([&] { g = fit(rep.data, rep.designs, mar, fc); });
              e_mar[r].accumulate(g, rep.truth, secs_mar);
            } catch (const std::exception&) {
            }
          }
          if (static_cast<int>(r) < n_logit) {
            try {
              FitResult f;
              const double secs = timed_seconds(
                  [&] { f = fit(rep.data, rep.designs, logit, fc); });
              e_logit[r].accumulate(f, rep.truth, secs);
              FitResult g;
              const double secs_mar =
                  timed_seconds([&] { g = fit(rep.data, rep.designs, mar, fc); });
              e_mar_logit[r].accumulate(g, rep.truth, secs_mar);
            } catch (const std::exception&) {
            }
          }
        });

    auto make_row = [&](const std::vector<SquaredErrors>& num,
                        const std::vector<SquaredErrors>& den, int n_used,
                        bool is_logit) {
      MseAccumulator acc_n, acc_d;
      for (int r = 0; r < n_used; ++r) {
        const std::size_t i = static_cast<std::size_t>(r);
        if (num[i].ok && den[i].ok) {
          acc_n.add(num[i]);
          acc_d.add(den[i]);
        }
      }
      MseStudyRow row;
      row.q = q;
      row.logit_analysis = is_logit;
      row.n_effective = static_cast<int>(acc_n.n);
      if (acc_n.n > 0) {
        row.alpha = acc_n.alpha_sum[0] / acc_d.alpha_sum[0];
        row.alpha_full = acc_n.alpha_sum.sum() / acc_d.alpha_sum.sum();
        row.sigma0_sq = acc_n.s0 / acc_d.s0;
        row.sigma_sq = acc_n.s2 / acc_d.s2;
        row.d = acc_n.d / acc_d.d;
        row.seconds_numerator = acc_n.seconds;
        row.seconds_mar = acc_d.seconds;
      }
      if (is_logit) {
        row.logit_gamma0 = logit_fit.gamma0;
        row.logit_gamma = logit_fit.gamma;
      }
      return row;
    };

    rows.push_back(make_row(e_badmm, e_mar, n_exp, false));
    if (config.run_logit)
      rows.push_back(make_row(e_logit, e_mar_logit, n_logit, true));
  }
  return rows;
}

// ---- mechanism study ----

std::vector<MechanismFitInput> mechanism_ensemble(const Scenario& sc,
                                                  int n_features,
                                                  double mean_location,
                                                  double mean_sd,
                                                  std::uint64_t seed) {
  MissingMechanism mech;
  mech.gamma0 = sc.gamma0;
  mech.gamma = sc.gamma;
  std::vector<MechanismFitInput> out;
  out.reserve(static_cast<std::size_t>(n_features));
  Rng rng(seed);
  for (int f = 0; f < n_features; ++f) {
    const double mu = mean_location + mean_sd * rng.normal();
    long n_obs_values = 0;
    double sum = 0.0;
    int q_obs = 0;
    for (int i = 0; i < sc.q; ++i) {
      const double b = std::sqrt(sc.d) * rng.normal();
      Vector y(sc.p);
      for (int j = 0; j < sc.p; ++j) {
        const double sd =
            j == 0 ? std::sqrt(sc.sigma0_sq) : std::sqrt(sc.sigma_sq);
        y[j] = mu + b + sd * rng.normal();
      }
      if (rng.uniform() < miss_prob(mech, y.mean())) continue;
      bool any = false;
      for (int j = 0; j < sc.p; ++j) {
        if (sc.sporadic_rate > 0.0 && rng.uniform() < sc.sporadic_rate)
          continue;
        sum += y[j];
        ++n_obs_values;
        any = true;
      }
      if (any) ++q_obs;
    }
    MechanismFitInput in;
    in.id = "f" + std::to_string(f);
    in.pi = 1.0 - static_cast<double>(q_obs) / static_cast<double>(sc.q);
    in.t = n_obs_values > 0 ? sum / static_cast<double>(n_obs_values) : mu;
    out.push_back(std::move(in));
  }
  return out;
}

namespace {

MechanismStudyRow summarize(int q, const std::string& name, double truth,
                    std::vector<double> values) {
  std::sort(values.begin(), values.end());
  MechanismStudyRow row;
  row.q = q;
  row.parameter = name;
  row.true_value = truth;
  row.min = values.front();
  row.max = values.back();
  const std::size_t n = values.size();
  row.median = n % 2 == 1 ? values[n / 2]
                          : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  double mean = 0.0;
  for (double v : values) mean += v;
  row.mean = mean / static_cast<double>(n);
  return row;
}

}  // namespace

std::vector<MechanismStudyRow> run_mechanism_study(const MechanismStudyConfig& config) {
  std::vector<MechanismStudyRow> rows;
  for (int q : config.q_values) {
    Scenario sc;
    sc.q = q;
    std::vector<double> gammas(static_cast<std::size_t>(config.n_repetitions));
    std::vector<double> gamma0s(
        static_cast<std::size_t>(config.n_repetitions));
    parallel_for(
        static_cast<std::size_t>(config.n_repetitions), config.threads,
        [&](std::size_t r) {
          const auto ensemble = mechanism_ensemble(
              sc, config.n_features, config.mean_location, config.mean_sd,
              Rng::mix(config.seed,
                       Rng::mix(static_cast<std::uint64_t>(q), r)));
          const GammaEstimate est = estimate_gamma(ensemble);
          gammas[r] = est.gamma;
          gamma0s[r] = est.gamma0;
        });
    rows.push_back(summarize(q, "gamma", sc.gamma, gammas));
    rows.push_back(summarize(q, "gamma0", sc.gamma0, gamma0s));
  }
  return rows;
}

}  // namespace bamm
