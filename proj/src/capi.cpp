#include "bamm.h"

#include <cstring>
#include <new>
#include <string>

#include "bamm/io.hpp"

namespace {

thread_local std::string g_last_error;

bamm_status status_of(const bamm::Error& e) {
  using bamm::ErrorCode;
  switch (e.code()) {
    case ErrorCode::invalid_argument: return BAMM_E_INVALID;
    case ErrorCode::parse_error: return BAMM_E_PARSE;
    case ErrorCode::estimation_error: return BAMM_E_ESTIMATION;
    case ErrorCode::singular_design: return BAMM_E_SINGULAR;
    case ErrorCode::numeric_error: return BAMM_E_NUMERIC;
    case ErrorCode::io_error: return BAMM_E_IO;
    case ErrorCode::inconsistent_mechanism: return BAMM_E_MECHANISM;
  }
  return BAMM_E_UNKNOWN;
}

template <typename Fn>
bamm_status guarded(Fn&& fn) {
  try {
    fn();
    return BAMM_OK;
  } catch (const bamm::Error& e) {
    g_last_error = e.what();
    return status_of(e);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return BAMM_E_UNKNOWN;
  } catch (...) {
    g_last_error = "unknown failure";
    return BAMM_E_UNKNOWN;
  }
}

bamm::Scenario to_scenario(const bamm_scenario& c) {
  bamm::Scenario sc;
  sc.q = c.q;
  sc.p = c.p;
  sc.a = c.a;
  sc.alpha0 = c.alpha0;
  sc.alpha0_sd = c.alpha0_sd;
  sc.sigma0_sq = c.sigma0_sq;
  sc.sigma_sq = c.sigma_sq;
  sc.d = c.d;
  sc.gamma0 = c.gamma0;
  sc.gamma = c.gamma;
  sc.sporadic_rate = c.sporadic_rate;
  sc.n_replicates = c.n_replicates;
  sc.n_permutations = c.n_permutations;
  sc.seed = c.seed;
  sc.threads = c.threads;
  switch (c.group) {
    case 1: sc.group = bamm::Scenario::GroupAssignment::bernoulli; break;
    case 2: sc.group = bamm::Scenario::GroupAssignment::batch; break;
    default: sc.group = bamm::Scenario::GroupAssignment::balanced; break;
  }
  return sc;
}

void from_scenario(const bamm::Scenario& sc, bamm_scenario* c) {
  c->q = sc.q;
  c->p = sc.p;
  c->a = sc.a;
  c->alpha0 = sc.alpha0;
  c->alpha0_sd = sc.alpha0_sd;
  c->sigma0_sq = sc.sigma0_sq;
  c->sigma_sq = sc.sigma_sq;
  c->d = sc.d;
  c->gamma0 = sc.gamma0;
  c->gamma = sc.gamma;
  c->sporadic_rate = sc.sporadic_rate;
  c->n_replicates = sc.n_replicates;
  c->n_permutations = sc.n_permutations;
  c->seed = sc.seed;
  c->threads = sc.threads;
  switch (sc.group) {
    case bamm::Scenario::GroupAssignment::bernoulli: c->group = 1; break;
    case bamm::Scenario::GroupAssignment::batch: c->group = 2; break;
    default: c->group = 0; break;
  }
}

}  // namespace

struct bamm_study {
  bamm::Study study;
};

struct bamm_fit_result {
  bamm::FitResult fit;
};

extern "C" {

const char* bamm_version(void) { return "0.1.0"; }

const char* bamm_last_error(void) { return g_last_error.c_str(); }

bamm_status bamm_study_open(const char* abundance_tsv,
                            const char* batch_map_tsv,
                            const char* covariates_tsv,
                            double min_ref_obs_frac, bamm_study** out) {
  if (!abundance_tsv || !batch_map_tsv || !out) {
    g_last_error = "null argument";
    return BAMM_E_INVALID;
  }
  *out = nullptr;
  return guarded([&] {
    bamm::StudyInput input;
    input.abundance_path = abundance_tsv;
    input.batch_map_path = batch_map_tsv;
    input.covariates_path = covariates_tsv ? covariates_tsv : "";
    input.config.min_ref_obs_frac = min_ref_obs_frac;
    auto* handle = new bamm_study{bamm::ingest(input)};
    *out = handle;
  });
}

void bamm_study_free(bamm_study* study) { delete study; }

int64_t bamm_study_n_features(const bamm_study* study) {
  return study ? static_cast<int64_t>(study->study.features.size()) : -1;
}

int64_t bamm_study_n_batches(const bamm_study* study) {
  return study ? static_cast<int64_t>(study->study.designs.size()) : -1;
}

int64_t bamm_study_n_filtered(const bamm_study* study) {
  return study ? static_cast<int64_t>(study->study.filtered_ids.size()) : -1;
}

void bamm_run_options_init(bamm_run_options* options) {
  if (!options) return;
  options->mechanism = 0;
  options->gamma_source = 1;
  options->gamma0 = 0.0;
  options->gamma = 0.0;
  options->profile_lo = 0.0;
  options->profile_hi = 0.0;
  options->profile_step = 0.0;
  options->permutations = 999;
  options->seed = 1;
  options->max_iter = 500;
  options->tol = 1e-8;
  options->threads = 0;
}

bamm_status bamm_study_run(const bamm_study* study,
                           const bamm_run_options* options,
                           const char* out_dir) {
  if (!study || !options || !out_dir) {
    g_last_error = "null argument";
    return BAMM_E_INVALID;
  }
  return guarded([&] {
    bamm::StudyConfig config;
    config.mechanism_form = options->mechanism == 1
                                ? bamm::MissingMechanism::Form::logit
                                : bamm::MissingMechanism::Form::exponential;
    config.gamma_source =
        options->gamma_source == 0
            ? bamm::StudyConfig::GammaSource::fixed
            : options->gamma_source == 2
                  ? bamm::StudyConfig::GammaSource::profiled
                  : bamm::StudyConfig::GammaSource::estimated;
    config.gamma0 = options->gamma0;
    config.gamma = options->gamma;
    config.profile_lo = options->profile_lo;
    config.profile_hi = options->profile_hi;
    config.profile_step = options->profile_step;
    config.n_permutations = options->permutations;
    config.seed = options->seed;
    config.max_iter = options->max_iter;
    config.tol = options->tol;
    config.threads = options->threads;
    const bamm::StudyResult result = bamm::run_study(study->study, config);
    bamm::write_study_outputs(study->study, result, out_dir);
  });
}

bamm_status bamm_fit_feature(int n_batches, const int32_t* batch_sizes,
                             const double* y, const double* x, int k,
                             const double* z, int h,
                             const int32_t* ref_channel,
                             const uint8_t* batch_missing, int mechanism,
                             double gamma0, double gamma, int max_iter,
                             double tol, bamm_fit_result** out) {
  if (!batch_sizes || !y || !x || !z || !batch_missing || !out ||
      n_batches < 1 || k < 1 || h < 1) {
    g_last_error = "null or invalid argument";
    return BAMM_E_INVALID;
  }
  *out = nullptr;
  return guarded([&] {
    bamm::FeatureBatchData data;
    std::vector<bamm::BatchDesign> designs;
    std::size_t y_at = 0, x_at = 0, z_at = 0;
    for (int i = 0; i < n_batches; ++i) {
      const int p = batch_sizes[i];
      if (p < 1)
        bamm::throw_error(bamm::ErrorCode::invalid_argument,
                          "batch sizes must be positive");
      bamm::BatchDesign d;
      d.x.resize(p, k);
      d.z.resize(p, h);
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < k; ++c)
          d.x(r, c) = x[x_at + static_cast<std::size_t>(r) * k + c];
        for (int c = 0; c < h; ++c)
          d.z(r, c) = z[z_at + static_cast<std::size_t>(r) * h + c];
      }
      if (ref_channel && ref_channel[i] >= 0) d.reference_channel = ref_channel[i];
      x_at += static_cast<std::size_t>(p) * k;
      z_at += static_cast<std::size_t>(p) * h;

      bamm::Vector yy(p);
      std::vector<bool> obs(static_cast<std::size_t>(p));
      const bool missing = batch_missing[i] != 0;
      for (int r = 0; r < p; ++r) {
        yy[r] = y[y_at + static_cast<std::size_t>(r)];
        obs[static_cast<std::size_t>(r)] = !missing && !std::isnan(yy[r]);
      }
      y_at += static_cast<std::size_t>(p);
      data.batches.push_back(std::move(yy));
      data.batch_missing.push_back(missing);
      data.observed.push_back(std::move(obs));
      designs.push_back(std::move(d));
    }
    bamm::MissingMechanism mech;
    mech.form = mechanism == 1 ? bamm::MissingMechanism::Form::logit
                               : bamm::MissingMechanism::Form::exponential;
    mech.gamma0 = gamma0;
    mech.gamma = gamma;
    bamm::FitConfig config;
    if (max_iter > 0) config.max_iter = max_iter;
    if (tol > 0.0) config.tol = tol;
    auto* handle = new bamm_fit_result{bamm::fit(data, designs, mech, config)};
    *out = handle;
  });
}

void bamm_fit_result_free(bamm_fit_result* result) { delete result; }

int bamm_fit_converged(const bamm_fit_result* r) {
  return r && r->fit.converged ? 1 : 0;
}

int bamm_fit_iterations(const bamm_fit_result* r) {
  return r ? r->fit.n_iter : -1;
}

int bamm_fit_n_fixed(const bamm_fit_result* r) {
  return r ? static_cast<int>(r->fit.params.alpha.size()) : -1;
}

int bamm_fit_n_random(const bamm_fit_result* r) {
  return r ? static_cast<int>(r->fit.params.d.rows()) : -1;
}

bamm_status bamm_fit_alpha(const bamm_fit_result* r, double* alpha) {
  if (!r || !alpha) return BAMM_E_INVALID;
  for (bamm::Index i = 0; i < r->fit.params.alpha.size(); ++i)
    alpha[i] = r->fit.params.alpha[i];
  return BAMM_OK;
}

bamm_status bamm_fit_alpha_cov(const bamm_fit_result* r, double* cov) {
  if (!r || !cov) return BAMM_E_INVALID;
  const bamm::Matrix& m = r->fit.alpha_cov;
  for (bamm::Index i = 0; i < m.rows(); ++i)
    for (bamm::Index j = 0; j < m.cols(); ++j)
      cov[i * m.cols() + j] = m(i, j);
  return BAMM_OK;
}

bamm_status bamm_fit_variances(const bamm_fit_result* r, double* sigma0_sq,
                               double* sigma_sq) {
  if (!r || !sigma0_sq || !sigma_sq) return BAMM_E_INVALID;
  *sigma0_sq = r->fit.params.sigma0_sq;
  *sigma_sq = r->fit.params.sigma_sq;
  return BAMM_OK;
}

bamm_status bamm_fit_d(const bamm_fit_result* r, double* d) {
  if (!r || !d) return BAMM_E_INVALID;
  const bamm::Matrix& m = r->fit.params.d;
  for (bamm::Index i = 0; i < m.rows(); ++i)
    for (bamm::Index j = 0; j < m.cols(); ++j) d[i * m.cols() + j] = m(i, j);
  return BAMM_OK;
}

double bamm_fit_loglik(const bamm_fit_result* r) {
  return r ? r->fit.final_loglik() : std::numeric_limits<double>::quiet_NaN();
}

bamm_status bamm_estimate_gamma(const double* t, const double* pi, int n,
                                int logit_form, double* gamma0, double* gamma,
                                int* n_used, int* n_excluded) {
  if (!t || !pi || !gamma0 || !gamma || n < 1) {
    g_last_error = "null or invalid argument";
    return BAMM_E_INVALID;
  }
  return guarded([&] {
    std::vector<bamm::MechanismFitInput> inputs;
    inputs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      inputs.push_back({std::to_string(i), t[i], pi[i]});
    const bamm::GammaEstimate est = logit_form
                                        ? bamm::estimate_gamma_logit(inputs)
                                        : bamm::estimate_gamma(inputs);
    *gamma0 = est.gamma0;
    *gamma = est.gamma;
    if (n_used) *n_used = est.n_used;
    if (n_excluded) *n_excluded = est.n_excluded;
  });
}

void bamm_scenario_init(bamm_scenario* scenario) {
  if (!scenario) return;
  from_scenario(bamm::Scenario{}, scenario);
}

bamm_status bamm_scenario_load(const char* path, bamm_scenario* scenario) {
  if (!path || !scenario) return BAMM_E_INVALID;
  return guarded([&] { from_scenario(bamm::load_scenario(path), scenario); });
}

bamm_status bamm_simulate_study(const bamm_scenario* scenario, int n_features,
                                const char* out_dir) {
  if (!scenario || !out_dir || n_features < 1) return BAMM_E_INVALID;
  return guarded([&] {
    const bamm::Scenario sc = to_scenario(*scenario);
    const bamm::Study study = bamm::generate_study(sc, n_features);
    bamm::write_study_inputs(study, out_dir);
    bamm::save_scenario(sc, std::string(out_dir) + "/scenario.txt");
  });
}

bamm_status bamm_run_power_study(const bamm_scenario* scenario, const char* subset,
                            const char* out_dir) {
  if (!scenario || !out_dir) return BAMM_E_INVALID;
  return guarded([&] {
    const bamm::Scenario sc = to_scenario(*scenario);
    bamm::PowerStudyConfig config;
    config.n_replicates = sc.n_replicates;
    config.n_permutations = sc.n_permutations;
    config.seed = sc.seed;
    config.threads = sc.threads;
    config.group = sc.group;
    if (subset && *subset) {
      const std::string s = subset;
      auto has = [&](const char* token) {
        return s.find(token) != std::string::npos;
      };
      if (has("q40") || has("q200"))
        config.q_values.clear();
      if (has("q40")) config.q_values.push_back(40);
      if (has("q200")) config.q_values.push_back(200);
      if (has("large") != has("small")) {
        config.include_large = has("large");
        config.include_small = has("small");
      }
      if (has("type1") != has("power")) {
        config.include_type1 = has("type1");
        config.include_power = has("power");
      }
    }
    bamm::write_power_study(bamm::run_power_study(config),
                       std::string(out_dir) + "/power_study.tsv");
  });
}

bamm_status bamm_run_mse_study(const bamm_scenario* scenario, int logit_replicates,
                            const char* out_dir) {
  if (!scenario || !out_dir) return BAMM_E_INVALID;
  return guarded([&] {
    const bamm::Scenario sc = to_scenario(*scenario);
    bamm::MseStudyConfig config;
    config.n_replicates = sc.n_replicates;
    config.n_replicates_logit = logit_replicates > 0 ? logit_replicates : 0;
    config.run_logit = logit_replicates > 0;
    config.seed = sc.seed;
    config.threads = sc.threads;
    config.group = sc.group;
    bamm::write_mse_study(bamm::run_mse_study(config),
                       std::string(out_dir) + "/mse_study.tsv");
  });
}

bamm_status bamm_run_mechanism_study(const bamm_scenario* scenario, int n_features,
                            int repetitions, const char* out_dir) {
  if (!scenario || !out_dir) return BAMM_E_INVALID;
  return guarded([&] {
    bamm::MechanismStudyConfig config;
    config.n_features = n_features > 0 ? n_features : 1000;
    config.n_repetitions = repetitions > 0 ? repetitions : 100;
    const bamm::Scenario sc = to_scenario(*scenario);
    config.seed = sc.seed;
    config.threads = sc.threads;
    bamm::write_mechanism_study(bamm::run_mechanism_study(config),
                       std::string(out_dir) + "/mechanism_study.tsv");
  });
}

}  // extern "C"
