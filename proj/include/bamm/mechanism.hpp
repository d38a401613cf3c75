#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bamm/types.hpp"

namespace bamm {

// Available-case summary for one feature: mean observed abundance and the
// fraction of batches in which the feature is missing entirely.
struct MechanismFitInput {
  std::string id;
  double t = 0.0;   // available-case mean abundance
  double pi = 0.0;  // missing-batch fraction, 1 - Q_obs/Q
};

struct GammaEstimate {
  double gamma0 = 0.0;
  double gamma = 0.0;
  int n_used = 0;
  int n_excluded = 0;
};

// Pr(M=1 | batch mean s). The exponential form is clamped at 1 (with
// `clamp_count` incremented) when the exponent turns positive; the logit
// form never needs clamping. `covariates` feeds the gamma2 term of the
// logit form and must match gamma2 in length when present.
double miss_prob(const MissingMechanism& mech, double batch_mean,
                 const Vector* covariates = nullptr,
                 unsigned* clamp_count = nullptr);

// Least-squares fit of the exponential mechanism on available-case
// summaries: -log(pi_j) regressed on (1, t_j). Features with pi in {0,1}
// are excluded and counted.
GammaEstimate estimate_gamma(const std::vector<MechanismFitInput>& inputs);

// Same on the logit scale: logit(pi_j) regressed on (1, t_j). Used when a
// logit mechanism must be matched to an observed missing-data pattern.
GammaEstimate estimate_gamma_logit(const std::vector<MechanismFitInput>& inputs);

struct TiltedMoments {
  Vector mean;  // E(y_i | M_i = 1)
  Matrix cov;   // var(y_i | M_i = 1)
};

// Exponential tilt: mean shifts by -(gamma/p) Sigma 1, covariance unchanged.
TiltedMoments tilted_moments_exponential(const ModelParameters& params,
                                         const BatchDesign& design,
                                         const MissingMechanism& mech);

// Logit mechanism: the weight depends on y only through the batch mean s,
// so the conditional moments reduce exactly to one-dimensional integrals
// over the Gaussian law of s.
TiltedMoments tilted_moments_logit(const ModelParameters& params,
                                   const BatchDesign& design,
                                   const MissingMechanism& mech,
                                   const Vector* covariates = nullptr);

// Pr(M_i = 1) marginally over y_i. Closed form for the exponential
// mechanism, quadrature for the logit one.
double marginal_missing_prob(const ModelParameters& params,
                             const BatchDesign& design,
                             const MissingMechanism& mech,
                             const Vector* covariates = nullptr,
                             unsigned* clamp_count = nullptr);

// Moments of s | M=1 under a logistic weight against N(mean, var):
// prob = E[w(s)], mean/var of the reweighted law. Computed by adaptive
// Gauss-Legendre node doubling on +/- 8 sd; `nodes` reports the final rule.
struct WeightedMoments {
  double prob = 0.0;
  double mean = 0.0;
  double var = 0.0;
  int nodes = 0;
};
WeightedMoments logistic_weighted_moments(double s_mean, double s_var,
                                          double eta0, double eta1,
                                          int initial_nodes = 16,
                                          int max_nodes = 4096,
                                          double rel_tol = 1e-8);

struct DiagnosticRow {
  std::string id;
  double t = 0.0;
  double pi = 0.0;
  double fitted = 0.0;  // NaN when no fit is available
};

struct DiagnosticBin {
  double pi = 0.0;
  double median_t = 0.0;
  int n = 0;
  double fitted = 0.0;
};

struct DiagnosticTable {
  bool fit_available = false;
  GammaEstimate fit;
  std::vector<DiagnosticRow> rows;
  std::vector<DiagnosticBin> bins;  // grouped by identical missing fraction
};

DiagnosticTable badmm_diagnostic(const std::vector<MechanismFitInput>& inputs,
                                 const std::optional<GammaEstimate>& fit);

// Batch-mean law under the model: s ~ N(s_mean, s_var) with
// s_mean = (1/p) 1'X alpha and s_var = (1/p^2) 1'Sigma 1.
void batch_mean_law(const ModelParameters& params, const BatchDesign& design,
                    double* s_mean, double* s_var);

}  // namespace bamm
