#pragma once

#include <limits>
#include <string>
#include <vector>

#include "bamm/mechanism.hpp"
#include "bamm/types.hpp"

namespace bamm {

struct FitConfig {
  int max_iter = 500;
  double tol = 1e-8;  // relative change threshold on all parameters
  bool monitor_likelihood = true;
  // Initialization policy: available-case OLS for alpha, pooled residual
  // variances, method-of-moments batch-mean variance for D (floored).
  // Callers wanting a specific start pass warm_start to fit().
  enum class Init { available_case_moments } init =
      Init::available_case_moments;

  void validate() const {
    if (max_iter < 1)
      throw_error(ErrorCode::invalid_argument, "max_iter must be >= 1");
    if (!(tol > 0.0))
      throw_error(ErrorCode::invalid_argument, "tol must be > 0");
  }
};

struct FitResult {
  ModelParameters params;
  Matrix alpha_cov;  // k x k, observed batches only
  int n_iter = 0;
  bool converged = false;
  std::vector<double> loglik_trace;  // entry 0 is the initial value
  unsigned clamp_warnings = 0;
  int psd_violations = 0;  // CM updates outside the parameter space (audit)
  // When false, the trace monitors the ignorable Gaussian likelihood
  // (exponential mechanism with gamma = 0 contributes only constants).
  bool mechanism_monitored = false;

  double final_loglik() const {
    return loglik_trace.empty() ? std::numeric_limits<double>::quiet_NaN()
                                : loglik_trace.back();
  }
};

// E-step for an observed batch. `design` and `y` must already be reduced to
// the observed rows (see reduce_batch); the batch size is design.batch_size().
EStepMoments e_step_observed(const ModelParameters& params,
                             const BatchDesign& design, const Vector& y);

// E-step for a batch that is missing entirely; uses the full design.
EStepMoments e_step_missing(const ModelParameters& params,
                            const BatchDesign& design,
                            const MissingMechanism& mech,
                            const Vector* batch_covariates = nullptr);

// One CM sweep (D, then alpha with the pre-update R, then the variances).
// `designs` must be aligned with `moments`: reduced designs for observed
// batches, full designs for missing ones.
ModelParameters cm_step(const std::vector<EStepMoments>& moments,
                        const std::vector<BatchDesign>& designs,
                        const ModelParameters& current);

// Observed-data log likelihood. With `mech == nullptr` the mechanism terms
// are dropped (ignorable likelihood: Gaussian terms of observed batches).
double observed_data_loglik(const ModelParameters& params,
                            const std::vector<BatchDesign>& designs,
                            const FeatureBatchData& data,
                            const MissingMechanism* mech,
                            unsigned* clamp_count = nullptr);

FitResult fit(const FeatureBatchData& data,
              const std::vector<BatchDesign>& designs,
              const MissingMechanism& mech, const FitConfig& config = {},
              const ModelParameters* warm_start = nullptr);

struct ProfilePoint {
  MissingMechanism mech;
  bool ok = false;
  double loglik = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct ProfileResult {
  std::vector<ProfilePoint> points;
  int best = -1;  // index of the maximizing grid point, -1 if none succeeded
};

ProfileResult profile_gamma(const FeatureBatchData& data,
                            const std::vector<BatchDesign>& designs,
                            const std::vector<MissingMechanism>& grid,
                            const FitConfig& config = {});

}  // namespace bamm
