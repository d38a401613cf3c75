/* C interface to the bamm library: linear mixed-effects models for
 * batch-structured abundance data with batch-level abundance-dependent
 * missingness. All functions return bamm_status; details about the last
 * failure on the calling thread come from bamm_last_error(). */
#ifndef BAMM_H
#define BAMM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bamm_status {
  BAMM_OK = 0,
  BAMM_E_INVALID = 1,    /* invalid argument or dataset */
  BAMM_E_PARSE = 2,      /* malformed input file */
  BAMM_E_ESTIMATION = 3, /* estimator cannot be computed */
  BAMM_E_SINGULAR = 4,   /* rank-deficient design */
  BAMM_E_NUMERIC = 5,    /* numeric failure (factorization, quadrature) */
  BAMM_E_IO = 6,         /* file system failure */
  BAMM_E_MECHANISM = 7,  /* mechanism inconsistent with observed data */
  BAMM_E_UNKNOWN = 8
} bamm_status;

const char* bamm_version(void);

/* Thread-local message for the most recent error on this thread. */
const char* bamm_last_error(void);

/* ---- whole-study pipeline ------------------------------------------- */

typedef struct bamm_study bamm_study;

/* Loads abundance/batch-map/covariates TSVs. covariates_tsv may be NULL.
 * min_ref_obs_frac filters features by the fraction of batches with an
 * observed reference channel (0 disables the filter). */
bamm_status bamm_study_open(const char* abundance_tsv,
                            const char* batch_map_tsv,
                            const char* covariates_tsv,
                            double min_ref_obs_frac, bamm_study** out);
void bamm_study_free(bamm_study* study);

int64_t bamm_study_n_features(const bamm_study* study);
int64_t bamm_study_n_batches(const bamm_study* study);
int64_t bamm_study_n_filtered(const bamm_study* study);

typedef struct bamm_run_options {
  int mechanism;     /* 0 exponential, 1 logit */
  int gamma_source;  /* 0 fixed, 1 estimated, 2 profiled */
  double gamma0;
  double gamma;
  double profile_lo, profile_hi, profile_step;
  int permutations;  /* 0 disables permutation p-values */
  uint64_t seed;
  int max_iter;
  double tol;
  int threads; /* 0: hardware concurrency */
} bamm_run_options;

void bamm_run_options_init(bamm_run_options* options);

/* Fits every feature, writes results.tsv, diagnostic.tsv,
 * diagnostic_binned.tsv, errors.tsv, filtered.tsv and summary.txt (plus
 * profile.tsv for the profiled gamma source) into out_dir. */
bamm_status bamm_study_run(const bamm_study* study,
                           const bamm_run_options* options,
                           const char* out_dir);

/* ---- single-feature fit on caller arrays ----------------------------- */

typedef struct bamm_fit_result bamm_fit_result;

/* One feature across n_batches batches. Arrays are concatenated per batch:
 * y has sum(batch_sizes) entries (NaN = missing sample), x is row-major
 * p_i x k per batch, z row-major p_i x h. ref_channel[i] is the reference
 * row within batch i or -1. batch_missing[i] != 0 marks an entirely missing
 * batch. mechanism: 0 exponential, 1 logit. */
bamm_status bamm_fit_feature(int n_batches, const int32_t* batch_sizes,
                             const double* y, const double* x, int k,
                             const double* z, int h,
                             const int32_t* ref_channel,
                             const uint8_t* batch_missing, int mechanism,
                             double gamma0, double gamma, int max_iter,
                             double tol, bamm_fit_result** out);
void bamm_fit_result_free(bamm_fit_result* result);

int bamm_fit_converged(const bamm_fit_result* result);
int bamm_fit_iterations(const bamm_fit_result* result);
int bamm_fit_n_fixed(const bamm_fit_result* result);
int bamm_fit_n_random(const bamm_fit_result* result);
/* alpha: length k; alpha_cov: k*k row-major; d: h*h row-major. */
bamm_status bamm_fit_alpha(const bamm_fit_result* result, double* alpha);
bamm_status bamm_fit_alpha_cov(const bamm_fit_result* result, double* cov);
bamm_status bamm_fit_variances(const bamm_fit_result* result,
                               double* sigma0_sq, double* sigma_sq);
bamm_status bamm_fit_d(const bamm_fit_result* result, double* d);
double bamm_fit_loglik(const bamm_fit_result* result);

/* ---- mechanism estimation -------------------------------------------- */

/* Least-squares fit of the missing-data mechanism from per-feature
 * available-case means t[] and missing fractions pi[]. logit_form 0 fits
 * -log(pi) ~ gamma0 + gamma t, 1 fits logit(pi) similarly. */
bamm_status bamm_estimate_gamma(const double* t, const double* pi, int n,
                                int logit_form, double* gamma0, double* gamma,
                                int* n_used, int* n_excluded);

/* ---- simulation ------------------------------------------------------- */

typedef struct bamm_scenario {
  int q, p;
  double a;
  double alpha0;
  double alpha0_sd; /* across-feature spread of the mean (studies only) */
  double sigma0_sq, sigma_sq, d;
  double gamma0, gamma;
  double sporadic_rate;
  int n_replicates;
  int n_permutations;
  uint64_t seed;
  int threads;
  int group; /* 0 balanced, 1 bernoulli, 2 batch */
} bamm_scenario;

void bamm_scenario_init(bamm_scenario* scenario);
bamm_status bamm_scenario_load(const char* path, bamm_scenario* scenario);

/* Writes abundance.tsv, batch_map.tsv, covariates.tsv and scenario.txt for
 * a simulated study with n_features features sharing one design. */
bamm_status bamm_simulate_study(const bamm_scenario* scenario, int n_features,
                                const char* out_dir);

/* Reproduce the simulation studies; each writes a TSV into out_dir.
 * subset for the power study is a comma list of row selectors like
 * "q40,large,power" (empty/NULL = everything). */
bamm_status bamm_run_power_study(const bamm_scenario* scenario, const char* subset,
                            const char* out_dir);
bamm_status bamm_run_mse_study(const bamm_scenario* scenario, int logit_replicates,
                            const char* out_dir);
bamm_status bamm_run_mechanism_study(const bamm_scenario* scenario, int n_features,
                            int repetitions, const char* out_dir);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* BAMM_H */
