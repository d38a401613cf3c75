#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bamm/inference.hpp"
#include "bamm/mechanism.hpp"
#include "bamm/types.hpp"

namespace bamm {

struct Scenario {
  int q = 40;  // number of batches
  int p = 4;   // channels per batch (1 reference + p-1 targets)
  double a = 0.0;
  double alpha0 = 10.0;
  double alpha0_sd = 0.0;  // across-feature spread of the mean level
                           // (multi-feature studies only)
  double sigma0_sq = 2.0;
  double sigma_sq = 4.0;
  double d = 3.0;
  double gamma0 = 0.0;
  double gamma = 0.1;
  double sporadic_rate = 0.05;
  int n_replicates = 1000;
  int n_permutations = 999;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency

  // Assignment of the binary group covariate across target samples.
  enum class GroupAssignment { balanced, bernoulli, batch };
  GroupAssignment group = GroupAssignment::balanced;

  void validate() const;
};

struct Truth {
  Vector alpha;
  double sigma0_sq = 0.0;
  double sigma_sq = 0.0;
  double d = 0.0;
};

struct Replicate {
  FeatureBatchData data;
  std::vector<BatchDesign> designs;
  Truth truth;
};

// One simulated dataset: y_i = X_i alpha + b_i + e_i with batch-level
// missingness drawn from the exponential mechanism on the realized batch
// mean (all channels), plus i.i.d. sporadic missingness inside observed
// batches. X = [1, reference indicator, group indicator],
// alpha = (alpha0, -a, +a). Deterministic in (seed, replicate_index).
Replicate generate_replicate(const Scenario& sc, int replicate_index);

// ---- power study: type-I error and power of the three analyses ----

struct PowerStudyRow {
  int q = 0;
  bool large_variance = true;
  double a = 0.0;
  double cutoff = 0.0;
  double rate_badmm = 0.0;     // mixed model, true mechanism (gamma = 0.1)
  double rate_mar = 0.0;       // mixed model, gamma = 0
  double rate_baseline = 0.0;  // relative-abundance regression
  int n_effective = 0;
  int n_failed = 0;
};

struct PowerStudyConfig {
  int n_replicates = 1000;
  int n_permutations = 999;
  std::uint64_t seed = 1;
  int threads = 0;
  std::vector<int> tested_columns{2};  // group indicator
  // Convergence settings for the permutation refits. The permutation test
  // is exact for any deterministic statistic, so the z used here is the
  // ECM z at this tolerance, computed identically for the observed and
  // permuted data.
  double fit_tol = 1e-6;
  int fit_max_iter = 300;
  Scenario::GroupAssignment group = Scenario::GroupAssignment::balanced;
  // subset selectors; empty = everything
  std::vector<int> q_values{40, 200};
  bool include_large = true;
  bool include_small = true;
  bool include_type1 = true;
  bool include_power = true;
};

std::vector<PowerStudyRow> run_power_study(const PowerStudyConfig& config);

// ---- MSE study: estimation accuracy of mechanism-aware vs MAR fits ----

struct MseStudyRow {
  int q = 0;
  bool logit_analysis = false;
  // Ratios of mean squared errors, BADMM (or logit) fit over MAR fit.
  // `alpha` is the ratio for the mean-level (intercept) estimate: the
  // mechanism corrects the abundance level, while the contrast
  // coefficients are insensitive to batch-level selection, so the full
  // vector ratio (kept in alpha_full) is diluted toward one.
  double alpha = 0.0;
  double alpha_full = 0.0;
  double sigma0_sq = 0.0;
  double sigma_sq = 0.0;
  double d = 0.0;
  double seconds_numerator = 0.0;  // wall-clock of the non-MAR fits
  double seconds_mar = 0.0;
  int n_effective = 0;
  double logit_gamma0 = 0.0;  // mechanism used by the logit analysis
  double logit_gamma = 0.0;
};

struct MseStudyConfig {
  std::vector<int> q_values{40, 200};
  int n_replicates = 1000;
  int n_replicates_logit = 200;
  std::uint64_t seed = 2;
  int threads = 0;
  Scenario::GroupAssignment group = Scenario::GroupAssignment::balanced;
  bool run_logit = true;
};

std::vector<MseStudyRow> run_mse_study(const MseStudyConfig& config);

// ---- mechanism study: available-case estimation of gamma ----

struct MechanismStudyRow {
  int q = 0;
  std::string parameter;  // "gamma" or "gamma0"
  double true_value = 0.0;
  double min = 0.0;
  double median = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct MechanismStudyConfig {
  std::vector<int> q_values{40, 200};
  int n_features = 1000;
  int n_repetitions = 100;
  double mean_location = 10.0;
  double mean_sd = 2.0;
  std::uint64_t seed = 3;
  int threads = 0;
};

std::vector<MechanismStudyRow> run_mechanism_study(const MechanismStudyConfig& config);

// Feature ensemble with means drawn from N(mean_location, mean_sd^2);
// returns available-case summaries for mechanism estimation.
std::vector<MechanismFitInput> mechanism_ensemble(const Scenario& sc,
                                                  int n_features,
                                                  double mean_location,
                                                  double mean_sd,
                                                  std::uint64_t seed);

}  // namespace bamm
