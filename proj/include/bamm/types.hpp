#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "bamm/error.hpp"

namespace bamm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Per-batch design: fixed-effect rows, random-effect rows and the position
// of the reference channel within the batch (if the batch carries one).
struct BatchDesign {
  Matrix x;  // p_i x k, column 0 is the intercept by convention
  Matrix z;  // p_i x h
  std::optional<Index> reference_channel;

  Index batch_size() const { return x.rows(); }
  Index n_fixed() const { return x.cols(); }
  Index n_random() const { return z.cols(); }

  void validate() const;
};

// One feature's abundances across all batches. Values for missing samples
// are NaN; `observed` is the per-sample mask (all false for a batch with
// batch_missing set).
struct FeatureBatchData {
  std::vector<Vector> batches;
  std::vector<bool> batch_missing;
  std::vector<std::vector<bool>> observed;

  Index n_batches() const { return static_cast<Index>(batches.size()); }
  Index n_observed_batches() const;
  double missing_fraction() const;
};

struct ModelParameters {
  Vector alpha;
  double sigma0_sq = 0.0;
  double sigma_sq = 0.0;
  Matrix d;  // h x h, symmetric PSD

  void validate() const;
};

struct MissingMechanism {
  enum class Form { exponential, logit };

  Form form = Form::exponential;
  double gamma0 = 0.0;
  double gamma = 0.0;
  std::optional<Vector> gamma2;
  std::optional<std::vector<Vector>> batch_covariates;

  bool has_covariates() const { return gamma2.has_value(); }

  // Hard structural checks (dimension/pairing/finite). Sign conventions are
  // reported as warnings: estimated parameters may legitimately sit outside
  // the nominal range (gamma0 in particular), and probabilities are clamped
  // at evaluation time instead.
  void validate() const;
  std::vector<std::string> warnings() const;
};

// Conditional moments for one batch, as consumed by the CM step.
struct EStepMoments {
  Vector b_t;      // E(b_i | .), length h
  Matrix delta_t;  // var(b_i | .), h x h
  Matrix v_t;      // var(e_i | .), p_i x p_i
  Vector y_t;      // working response, length p_i
};

struct ValidationFinding {
  bool fatal = false;
  int batch = -1;  // -1: dataset-level
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationFinding> findings;

  bool accepted() const {
    for (const auto& f : findings)
      if (f.fatal) return false;
    return true;
  }
  std::string first_fatal() const {
    for (const auto& f : findings)
      if (f.fatal) return f.message;
    return {};
  }
};

ValidationReport validate_dataset(const FeatureBatchData& data,
                                  const std::vector<BatchDesign>& designs);

// Diagonal residual covariance R_i: sigma0_sq at the reference row,
// sigma_sq elsewhere.
Matrix residual_covariance(const ModelParameters& params,
                           const BatchDesign& design);

// Marginal covariance Sigma_i = Z_i D Z_i^T + R_i (dense).
Matrix marginal_covariance(const ModelParameters& params,
                           const BatchDesign& design);

// Design + response restricted to observed rows; reference_channel is
// remapped or dropped. Used for sporadic (row-wise) missingness.
struct ReducedBatch {
  BatchDesign design;
  Vector y;
};
ReducedBatch reduce_batch(const BatchDesign& design, const Vector& y,
                          const std::vector<bool>& observed);

}  // namespace bamm
