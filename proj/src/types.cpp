#include "bamm/types.hpp"

#include <cmath>
#include <sstream>

namespace bamm {

void BatchDesign::validate() const {
  if (x.rows() < 1) throw_error(ErrorCode::invalid_argument, "empty design");
  if (x.rows() != z.rows()) {
    std::ostringstream os;
    os << "fixed-effect rows (" << x.rows() << ") != random-effect rows ("
       << z.rows() << ")";
    throw_error(ErrorCode::invalid_argument, os.str());
  }
  if (x.cols() < 1 || z.cols() < 1)
    throw_error(ErrorCode::invalid_argument,
                "designs need at least one column");
  if (reference_channel &&
      (*reference_channel < 0 || *reference_channel >= x.rows()))
    throw_error(ErrorCode::invalid_argument,
                "reference channel out of range");
  if (!x.allFinite() || !z.allFinite())
    throw_error(ErrorCode::invalid_argument, "non-finite design entry");
}

Index FeatureBatchData::n_observed_batches() const {
  Index n = 0;
  for (bool m : batch_missing)
    if (!m) ++n;
  return n;
}

double FeatureBatchData::missing_fraction() const {
  if (batch_missing.empty()) return 0.0;
  return 1.0 - static_cast<double>(n_observed_batches()) /
                   static_cast<double>(batch_missing.size());
}

void ModelParameters::validate() const {
  if (alpha.size() < 1)
    throw_error(ErrorCode::invalid_argument, "alpha is empty");
  if (!alpha.allFinite())
    throw_error(ErrorCode::invalid_argument, "non-finite alpha");
  if (!(sigma0_sq >= 0.0) || !(sigma_sq >= 0.0))
    throw_error(ErrorCode::invalid_argument, "negative residual variance");
  if (d.rows() != d.cols() || d.rows() < 1)
    throw_error(ErrorCode::invalid_argument, "D must be square");
  if (!d.allFinite())
    throw_error(ErrorCode::invalid_argument, "non-finite D");
  if (!d.isApprox(d.transpose(), 1e-10))
    throw_error(ErrorCode::invalid_argument, "D must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(d);
  if (es.eigenvalues().minCoeff() < -1e-10 * (1.0 + d.norm()))
    throw_error(ErrorCode::invalid_argument, "D must be PSD");
}

void MissingMechanism::validate() const {
  if (!std::isfinite(gamma0) || !std::isfinite(gamma))
    throw_error(ErrorCode::invalid_argument, "non-finite mechanism parameter");
  if (gamma2.has_value() != batch_covariates.has_value())
    throw_error(ErrorCode::invalid_argument,
                "gamma2 and batch covariates must be supplied together");
  if (gamma2) {
    if (form == Form::exponential)
      throw_error(ErrorCode::invalid_argument,
                  "batch covariates are only supported by the logit form");
    for (const auto& c : *batch_covariates)
      if (c.size() != gamma2->size())
        throw_error(ErrorCode::invalid_argument,
                    "batch covariate dimension does not match gamma2");
  }
}

std::vector<std::string> MissingMechanism::warnings() const {
  std::vector<std::string> w;
  if (form == Form::exponential) {
    if (gamma0 < 0.0)
      w.push_back("exponential mechanism with gamma0 < 0; probabilities will "
                  "be clamped at 1");
    if (gamma < 0.0)
      w.push_back("exponential mechanism with gamma < 0; missingness "
                  "increases with abundance");
  }
  return w;
}

ValidationReport validate_dataset(const FeatureBatchData& data,
                                  const std::vector<BatchDesign>& designs) {
  ValidationReport report;
  auto add = [&](bool fatal, int batch, std::string msg) {
    report.findings.push_back({fatal, batch, std::move(msg)});
  };

  const std::size_t q = data.batches.size();
  if (q != designs.size() || q != data.batch_missing.size() ||
      q != data.observed.size()) {
    add(true, -1, "batch counts disagree between data and designs");
    return report;
  }
  if (q == 0) {
    add(true, -1, "no batches");
    return report;
  }

  Index n_obs = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const auto& design = designs[i];
    try {
      design.validate();
    } catch (const Error& e) {
      add(true, static_cast<int>(i), e.what());
      continue;
    }
    const Index p = design.batch_size();
    if (data.batches[i].size() != p) {
      std::ostringstream os;
      os << "batch " << i << ": design has " << p << " rows but data has "
         << data.batches[i].size() << " samples";
      add(true, static_cast<int>(i), os.str());
      continue;
    }
    if (static_cast<Index>(data.observed[i].size()) != p) {
      add(true, static_cast<int>(i), "observed mask size mismatch");
      continue;
    }
    Index seen = 0;
    for (Index j = 0; j < p; ++j)
      if (data.observed[i][static_cast<std::size_t>(j)]) ++seen;
    if (data.batch_missing[i]) {
      if (seen != 0)
        add(true, static_cast<int>(i),
            "batch flagged missing but has observed samples");
    } else {
      if (seen == 0)
        add(true, static_cast<int>(i),
            "batch flagged observed but every sample is missing");
      ++n_obs;
      for (Index j = 0; j < p; ++j) {
        if (data.observed[i][static_cast<std::size_t>(j)] &&
            !std::isfinite(data.batches[i][j])) {
          add(true, static_cast<int>(i), "non-finite observed abundance");
          break;
        }
      }
    }
    if (designs[i].n_fixed() != designs[0].n_fixed())
      add(true, static_cast<int>(i), "fixed-effect column counts differ");
    if (designs[i].n_random() != designs[0].n_random())
      add(true, static_cast<int>(i), "random-effect column counts differ");
  }
  if (n_obs == 0) add(true, -1, "no observed batches");
  return report;
}

Matrix residual_covariance(const ModelParameters& params,
                           const BatchDesign& design) {
  const Index p = design.batch_size();
  Vector diag = Vector::Constant(p, params.sigma_sq);
  if (design.reference_channel)
    diag[*design.reference_channel] = params.sigma0_sq;
  return diag.asDiagonal();
}

Matrix marginal_covariance(const ModelParameters& params,
                           const BatchDesign& design) {
  Matrix sigma = design.z * params.d * design.z.transpose();
  sigma += residual_covariance(params, design);
  return sigma;
}

ReducedBatch reduce_batch(const BatchDesign& design, const Vector& y,
                          const std::vector<bool>& observed) {
  const Index p = design.batch_size();
  if (y.size() != p || static_cast<Index>(observed.size()) != p)
    throw_error(ErrorCode::invalid_argument, "mask/response size mismatch");
  Index kept = 0;
  for (bool o : observed)
    if (o) ++kept;
  if (kept == 0)
    throw_error(ErrorCode::invalid_argument, "no observed rows to keep");

  ReducedBatch out;
  out.design.x.resize(kept, design.x.cols());
  out.design.z.resize(kept, design.z.cols());
  out.y.resize(kept);
  Index r = 0;
  for (Index j = 0; j < p; ++j) {
    if (!observed[static_cast<std::size_t>(j)]) continue;
    out.design.x.row(r) = design.x.row(j);
    out.design.z.row(r) = design.z.row(j);
    out.y[r] = y[j];
    if (design.reference_channel && *design.reference_channel == j)
      out.design.reference_channel = r;
    ++r;
  }
  return out;
}

}  // namespace bamm
