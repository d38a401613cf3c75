#include "bamm/mechanism.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>

namespace bamm {

namespace {

double inverse_logit(double eta) {
  if (eta >= 0.0) {
    return 1.0 / (1.0 + std::exp(-eta));
  }
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

struct GLRule {
  std::vector<double> nodes;    // on [-1, 1]
  std::vector<double> weights;
};

// Gauss-Legendre nodes/weights by Newton iteration on the Legendre
// recurrence. Rules are cached per order.
const GLRule& gauss_legendre(int n) {
  static std::map<int, GLRule> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;

  GLRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      pp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    const double w = 2.0 / ((1.0 - x * x) * pp * pp);
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  return cache.emplace(n, std::move(rule)).first->second;
}

struct CentralMoments {
  double i0 = 0.0;  // integral of w(s) phi(u)
  double c1 = 0.0;  // integral of u w(s) phi(u)
  double c2 = 0.0;  // integral of u^2 w(s) phi(u)
};

// Integrates the logistic weight against the standard normal on [-8, 8]
// in standardized coordinates u = (s - mean)/sd.
CentralMoments logistic_integrals(int n, double mean, double sd, double eta0,
                                  double eta1) {
  static constexpr double kHalfWidth = 8.0;
  static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
  const GLRule& rule = gauss_legendre(n);
  CentralMoments out;
  for (int i = 0; i < n; ++i) {
    const double u = kHalfWidth * rule.nodes[i];
    const double s = mean + sd * u;
    const double w =
        rule.weights[i] * kHalfWidth * inv_sqrt_2pi * std::exp(-0.5 * u * u);
    const double g = inverse_logit(eta0 + eta1 * s);
    const double f = w * g;
    out.i0 += f;
    out.c1 += f * u;
    out.c2 += f * u * u;
  }
  return out;
}

// Relative change with the weighted mass as the natural scale, so
// integrals whose exact value is zero (constant weights, symmetric tilts)
// still register as converged.
double rel_diff(double a, double b, double scale) {
  return std::abs(a - b) / std::max(std::abs(b), scale);
}

}  // namespace

double miss_prob(const MissingMechanism& mech, double batch_mean,
                 const Vector* covariates, unsigned* clamp_count) {
  double eta = mech.gamma0 + mech.gamma * batch_mean;
  if (mech.gamma2) {
    if (!covariates || covariates->size() != mech.gamma2->size())
      throw_error(ErrorCode::invalid_argument,
                  "mechanism expects batch covariates of matching length");
    eta += mech.gamma2->dot(*covariates);
  }
  if (mech.form == MissingMechanism::Form::logit) return inverse_logit(eta);
  // exponential: Pr = exp(-eta), valid as a probability only for eta >= 0
  if (eta < 0.0) {
    if (clamp_count) ++(*clamp_count);
    return 1.0;
  }
  return std::exp(-eta);
}

namespace {

GammaEstimate fit_line(const std::vector<MechanismFitInput>& inputs,
                       bool logit_scale) {
  GammaEstimate est;
  std::vector<double> ts, ys;
  for (const auto& in : inputs) {
    if (!(in.pi > 0.0) || !(in.pi < 1.0) || !std::isfinite(in.t)) {
      ++est.n_excluded;
      continue;
    }
    ts.push_back(in.t);
    ys.push_back(logit_scale ? std::log(in.pi) - std::log1p(-in.pi)
                             : -std::log(in.pi));
  }
  est.n_used = static_cast<int>(ts.size());
  if (est.n_used < 2)
    throw_error(ErrorCode::estimation_error,
                "mechanism estimation needs at least two features with "
                "partial missingness");
  const double n = static_cast<double>(ts.size());
  double tbar = 0.0, ybar = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    tbar += ts[i];
    ybar += ys[i];
  }
  tbar /= n;
  ybar /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sxx += (ts[i] - tbar) * (ts[i] - tbar);
    sxy += (ts[i] - tbar) * (ys[i] - ybar);
  }
  if (sxx <= 0.0)
    throw_error(ErrorCode::singular_design,
                "all available-case means are identical; slope is not "
                "identifiable");
  const double slope = sxy / sxx;
  est.gamma = slope;
  est.gamma0 = ybar - slope * tbar;
  return est;
}

}  // namespace

GammaEstimate estimate_gamma(const std::vector<MechanismFitInput>& inputs) {
  return fit_line(inputs, false);
}

GammaEstimate estimate_gamma_logit(
    const std::vector<MechanismFitInput>& inputs) {
  return fit_line(inputs, true);
}

void batch_mean_law(const ModelParameters& params, const BatchDesign& design,
                    double* s_mean, double* s_var) {
  const double p = static_cast<double>(design.batch_size());
  const Vector mu = design.x * params.alpha;
  Vector z1 = design.z.colwise().sum();  // Z^T 1
  double one_r_one = params.sigma_sq * (p - 1.0);
  if (design.reference_channel)
    one_r_one += params.sigma0_sq;
  else
    one_r_one += params.sigma_sq;
  const double one_sigma_one = one_r_one + z1.dot(params.d * z1);
  *s_mean = mu.sum() / p;
  *s_var = one_sigma_one / (p * p);
}

TiltedMoments tilted_moments_exponential(const ModelParameters& params,
                                         const BatchDesign& design,
                                         const MissingMechanism& mech) {
  if (mech.form != MissingMechanism::Form::exponential)
    throw_error(ErrorCode::invalid_argument, "expected exponential mechanism");
  const double p = static_cast<double>(design.batch_size());
  TiltedMoments out;
  out.cov = marginal_covariance(params, design);
  out.mean = design.x * params.alpha -
             (mech.gamma / p) * (out.cov * Vector::Ones(design.batch_size()));
  return out;
}

WeightedMoments logistic_weighted_moments(double s_mean, double s_var,
                                          double eta0, double eta1,
                                          int initial_nodes, int max_nodes,
                                          double rel_tol) {
  if (!(s_var > 0.0))
    throw_error(ErrorCode::invalid_argument, "batch-mean variance must be > 0");
  const double sd = std::sqrt(s_var);
  CentralMoments prev = logistic_integrals(initial_nodes, s_mean, sd, eta0, eta1);
  int n = initial_nodes;
  double change = 1.0;
  while (n < max_nodes) {
    n *= 2;
    const CentralMoments cur = logistic_integrals(n, s_mean, sd, eta0, eta1);
    const double mass = std::max(std::abs(cur.i0), 1e-300);
    change = std::max({rel_diff(cur.i0, prev.i0, mass),
                       rel_diff(cur.c1, prev.c1, mass),
                       rel_diff(cur.c2, prev.c2, mass)});
    prev = cur;
    if (change <= rel_tol) break;
  }
  if (change > rel_tol) {
    std::ostringstream os;
    os << "quadrature did not converge below relative " << rel_tol << " with "
       << n << " nodes";
    throw_error(ErrorCode::numeric_error, os.str());
  }
  if (prev.i0 <= 0.0)
    throw_error(ErrorCode::numeric_error, "weighted normalizer vanished");
  WeightedMoments out;
  out.prob = prev.i0;
  const double m1 = prev.c1 / prev.i0;
  const double m2 = prev.c2 / prev.i0;
  out.mean = s_mean + sd * m1;
  out.var = s_var * (m2 - m1 * m1);
  out.nodes = n;
  return out;
}

TiltedMoments tilted_moments_logit(const ModelParameters& params,
                                   const BatchDesign& design,
                                   const MissingMechanism& mech,
                                   const Vector* covariates) {
  if (mech.form != MissingMechanism::Form::logit)
    throw_error(ErrorCode::invalid_argument, "expected logit mechanism");
  double eta0 = mech.gamma0;
  if (mech.gamma2) {
    if (!covariates || covariates->size() != mech.gamma2->size())
      throw_error(ErrorCode::invalid_argument,
                  "mechanism expects batch covariates of matching length");
    eta0 += mech.gamma2->dot(*covariates);
  }
  double s_mean = 0.0, s_var = 0.0;
  batch_mean_law(params, design, &s_mean, &s_var);
  const WeightedMoments wm =
      logistic_weighted_moments(s_mean, s_var, eta0, mech.gamma);

  const double p = static_cast<double>(design.batch_size());
  TiltedMoments out;
  const Matrix sigma = marginal_covariance(params, design);
  const Vector c = sigma * Vector::Ones(design.batch_size()) / (p * s_var);
  out.mean = design.x * params.alpha + c * (wm.mean - s_mean);
  out.cov = sigma - c * c.transpose() * (s_var - wm.var);
  return out;
}

double marginal_missing_prob(const ModelParameters& params,
                             const BatchDesign& design,
                             const MissingMechanism& mech,
                             const Vector* covariates, unsigned* clamp_count) {
  double eta0 = mech.gamma0;
  if (mech.gamma2) {
    if (!covariates || covariates->size() != mech.gamma2->size())
      throw_error(ErrorCode::invalid_argument,
                  "mechanism expects batch covariates of matching length");
    eta0 += mech.gamma2->dot(*covariates);
  }
  double s_mean = 0.0, s_var = 0.0;
  batch_mean_law(params, design, &s_mean, &s_var);
  if (mech.form == MissingMechanism::Form::logit)
    return logistic_weighted_moments(s_mean, s_var, eta0, mech.gamma).prob;
  // E[exp(-g0 - g s)] with s Gaussian, via the moment generating function.
  const double log_pr =
      -eta0 - mech.gamma * s_mean + 0.5 * mech.gamma * mech.gamma * s_var;
  if (log_pr > 0.0) {
    if (clamp_count) ++(*clamp_count);
    return 1.0;
  }
  return std::exp(log_pr);
}

DiagnosticTable badmm_diagnostic(const std::vector<MechanismFitInput>& inputs,
                                 const std::optional<GammaEstimate>& fit) {
  DiagnosticTable table;
  table.fit_available = fit.has_value();
  if (fit) table.fit = *fit;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto fitted_at = [&](double t) {
    return fit ? std::exp(-fit->gamma0 - fit->gamma * t) : nan;
  };

  table.rows.reserve(inputs.size());
  std::map<long long, std::vector<double>> groups;  // keyed by rounded pi
  for (const auto& in : inputs) {
    table.rows.push_back({in.id, in.t, in.pi, fitted_at(in.t)});
    const long long key = std::llround(in.pi * 1e12);
    groups[key].push_back(in.t);
  }
  for (auto& [key, ts] : groups) {
    std::sort(ts.begin(), ts.end());
    const std::size_t n = ts.size();
    const double med =
        (n % 2 == 1) ? ts[n / 2] : 0.5 * (ts[n / 2 - 1] + ts[n / 2]);
    DiagnosticBin bin;
    bin.pi = static_cast<double>(key) * 1e-12;
    bin.median_t = med;
    bin.n = static_cast<int>(n);
    bin.fitted = fitted_at(med);
    table.bins.push_back(bin);
  }
  return table;
}

}  // namespace bamm
