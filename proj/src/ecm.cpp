#include "bamm/ecm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <cmath>
#include <memory>
#include <sstream>

namespace bamm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Per-batch quantities fixed across ECM iterations: reduced designs,
// observed responses and design Gram blocks.
struct BatchWork {
  Matrix x, z;
  Vector y;  // empty for missing batches
  std::optional<Index> ref;
  bool missing = false;
  Index p_full = 0;
  const Vector* mech_cov = nullptr;

  Matrix xtx;  // x'x
  Matrix ztz;  // z'z
  Matrix xtz;  // x'z
  Vector x_ref, z_ref;
  Vector zt1;  // z'1

  Index rows() const { return x.rows(); }
};

struct Moments {
  Vector b;
  Matrix delta;
  Vector y_t;
  double v_ref = 0.0;
  double v_trace = 0.0;
};

void finish_work(BatchWork& w) {
  w.xtx.noalias() = w.x.transpose() * w.x;
  w.ztz.noalias() = w.z.transpose() * w.z;
  w.xtz.noalias() = w.x.transpose() * w.z;
  w.zt1 = w.z.colwise().sum();
  if (w.ref) {
    w.x_ref = w.x.row(*w.ref);
    w.z_ref = w.z.row(*w.ref);
  } else {
    w.x_ref = Vector::Zero(w.x.cols());
    w.z_ref = Vector::Zero(w.z.cols());
  }
}

std::vector<BatchWork> build_workspace(const FeatureBatchData& data,
                                       const std::vector<BatchDesign>& designs,
                                       const MissingMechanism* mech) {
  const ValidationReport report = validate_dataset(data, designs);
  if (!report.accepted())
    throw_error(ErrorCode::invalid_argument,
                "invalid dataset: " + report.first_fatal());
  if (mech && mech->batch_covariates &&
      mech->batch_covariates->size() != data.batches.size())
    throw_error(ErrorCode::invalid_argument,
                "mechanism batch covariates must cover every batch");

  std::vector<BatchWork> ws(data.batches.size());
  for (std::size_t i = 0; i < data.batches.size(); ++i) {
    BatchWork& w = ws[i];
    w.p_full = designs[i].batch_size();
    w.missing = data.batch_missing[i];
    if (mech && mech->batch_covariates) w.mech_cov = &(*mech->batch_covariates)[i];
    if (w.missing) {
      w.x = designs[i].x;
      w.z = designs[i].z;
      w.ref = designs[i].reference_channel;
    } else {
      ReducedBatch red = reduce_batch(designs[i], data.batches[i],
                                      data.observed[i]);
      w.x = std::move(red.design.x);
      w.z = std::move(red.design.z);
      w.ref = red.design.reference_channel;
      w.y = std::move(red.y);
    }
    finish_work(w);
  }
  return ws;
}

struct ResidualScales {
  double inv_t = 0.0;   // 1/sigma^2
  double dref = 0.0;    // 1/sigma0^2 - 1/sigma^2, zero when no reference
};

ResidualScales scales_for(const ModelParameters& p, const BatchWork& w) {
  ResidualScales s;
  if (!(p.sigma_sq > 0.0))
    throw_error(ErrorCode::numeric_error, "sigma^2 is not positive");
  s.inv_t = 1.0 / p.sigma_sq;
  if (w.ref) {
    if (!(p.sigma0_sq > 0.0))
      throw_error(ErrorCode::numeric_error, "sigma0^2 is not positive");
    s.dref = 1.0 / p.sigma0_sq - s.inv_t;
  }
  return s;
}

// E step for one batch under the Woodbury representation
// W = R^-1 - R^-1 Z D (I + G D)^-1 Z' R^-1 with G = Z' R^-1 Z.
void e_step_lean(const ModelParameters& P, const MissingMechanism* mech,
                 const BatchWork& w, Moments& m) {
  const Index h = w.z.cols();
  const double p = static_cast<double>(w.p_full);

  if (!w.missing) {
    const ResidualScales sc = scales_for(P, w);
    Vector r = w.y - w.x * P.alpha;
    Vector u = sc.inv_t * (w.z.transpose() * r);
    Matrix G = sc.inv_t * w.ztz;
    if (w.ref) {
      u.noalias() += sc.dref * w.z_ref * r[*w.ref];
      G.noalias() += sc.dref * (w.z_ref * w.z_ref.transpose());
    }
    Matrix M = Matrix::Identity(h, h) + G * P.d;
    Matrix Minv = M.inverse();
    m.delta.noalias() = P.d * Minv;
    m.delta = 0.5 * (m.delta + m.delta.transpose()).eval();
    m.b.noalias() = m.delta * u;
    m.v_trace = (w.ztz * m.delta).trace();
    m.v_ref = w.ref ? w.z_ref.dot(m.delta * w.z_ref) : 0.0;
    m.y_t = w.y;
    return;
  }

  // batch missing entirely
  const double s2 = P.sigma_sq;
  const double s0 = w.ref ? P.sigma0_sq : P.sigma_sq;
  Vector mu = w.x * P.alpha;
  Vector dz1 = P.d * w.zt1;
  Vector sig1 = w.z * dz1;  // Sigma 1 = Z D Z'1 + R 1
  sig1.array() += s2;
  if (w.ref) sig1[*w.ref] += s0 - s2;

  if (!mech)
    throw_error(ErrorCode::invalid_argument,
                "missing batch requires a missing-data mechanism");

  if (mech->form == MissingMechanism::Form::exponential) {
    const double g = mech->gamma;
    m.y_t = mu - (g / p) * sig1;
    m.b = -(g / p) * dz1;
    m.delta = P.d;
    m.v_ref = w.ref ? s0 : 0.0;
    m.v_trace = w.ref ? s0 + (p - 1.0) * s2 : p * s2;
    return;
  }

  // logit mechanism: the weight depends on y only through the batch mean s,
  // whose conditional moments come from one-dimensional quadrature.
  const double one_r_one = w.ref ? s0 + (p - 1.0) * s2 : p * s2;
  const double s_mean = mu.sum() / p;
  const double s_var = (one_r_one + w.zt1.dot(dz1)) / (p * p);
  double eta0 = mech->gamma0;
  if (mech->gamma2) {
    if (!w.mech_cov || w.mech_cov->size() != mech->gamma2->size())
      throw_error(ErrorCode::invalid_argument,
                  "missing batch lacks mechanism covariates");
    eta0 += mech->gamma2->dot(*w.mech_cov);
  }
  const WeightedMoments wm =
      logistic_weighted_moments(s_mean, s_var, eta0, mech->gamma);
  const double shift = wm.mean - s_mean;
  const double pv = p * s_var;
  const double dd = (s_var - wm.var) / (pv * pv);
  m.y_t = mu + sig1 * (shift / pv);
  m.b = dz1 * (shift / pv);
  m.delta = P.d - (dz1 * dz1.transpose()) * dd;
  m.delta = 0.5 * (m.delta + m.delta.transpose()).eval();
  const double sum_r = one_r_one;
  const double sum_r2 =
      w.ref ? s0 * s0 + (p - 1.0) * s2 * s2 : p * s2 * s2;
  m.v_ref = w.ref ? s0 - s0 * s0 * dd : 0.0;
  m.v_trace = sum_r - sum_r2 * dd;
}

// In-place SPD solve; false when the matrix is not confidently positive
// definite (caller falls back to the pivoted path for diagnostics).
bool cholesky_solve(double* a, double* b, int k) {
  double diag_max = 0.0;
  for (int j = 0; j < k; ++j)
    diag_max = std::max(diag_max, std::abs(a[j * k + j]));
  for (int j = 0; j < k; ++j) {
    double d = a[j * k + j];
    for (int t = 0; t < j; ++t) d -= a[j * k + t] * a[j * k + t];
    if (!(d > 1e-12 * (diag_max + 1.0))) return false;
    d = std::sqrt(d);
    a[j * k + j] = d;
    for (int i = j + 1; i < k; ++i) {
      double s = a[i * k + j];
      for (int t = 0; t < j; ++t) s -= a[i * k + t] * a[j * k + t];
      a[i * k + j] = s / d;
    }
  }
  for (int i = 0; i < k; ++i) {  // L y = b
    double s = b[i];
    for (int t = 0; t < i; ++t) s -= a[i * k + t] * b[t];
    b[i] = s / a[i * k + i];
  }
  for (int i = k - 1; i >= 0; --i) {  // L^T x = y
    double s = b[i];
    for (int t = i + 1; t < k; ++t) s -= a[t * k + i] * b[t];
    b[i] = s / a[i * k + i];
  }
  return true;
}

Vector solve_fixed_effects(const Matrix& A, const Vector& rhs) {
  Eigen::FullPivLU<Matrix> lu(A);
  lu.setThreshold(1e-10);
  if (lu.rank() < A.cols()) {
    const auto perm = lu.permutationQ().indices();
    std::ostringstream os;
    os << "fixed-effect normal equations are rank deficient; collinear "
          "columns:";
    for (Index j = lu.rank(); j < A.cols(); ++j) os << ' ' << perm[j];
    throw_error(ErrorCode::singular_design, os.str());
  }
  return lu.solve(rhs);
}

ModelParameters cm_lean(const std::vector<BatchWork>& ws,
                        const std::vector<Moments>& ms,
                        const ModelParameters& old, double var_floor) {
  const std::size_t q = ws.size();
  const Index k = old.alpha.size();
  const Index h = old.d.rows();
  ModelParameters out;
  out.d = Matrix::Zero(h, h);
  for (std::size_t i = 0; i < q; ++i)
    out.d.noalias() += ms[i].b * ms[i].b.transpose() + ms[i].delta;
  out.d /= static_cast<double>(q);
  out.d = 0.5 * (out.d + out.d.transpose()).eval();

  Matrix A = Matrix::Zero(k, k);
  Vector rhs = Vector::Zero(k);
  for (std::size_t i = 0; i < q; ++i) {
    const BatchWork& w = ws[i];
    const ResidualScales sc = scales_for(old, w);
    A.noalias() += sc.inv_t * w.xtx;
    Vector v = ms[i].y_t - w.z * ms[i].b;
    rhs.noalias() += sc.inv_t * (w.x.transpose() * v);
    if (w.ref) {
      A.noalias() += sc.dref * (w.x_ref * w.x_ref.transpose());
      rhs.noalias() += sc.dref * w.x_ref * v[*w.ref];
    }
  }
  out.alpha = solve_fixed_effects(A, rhs);

  double num0 = 0.0, num2 = 0.0;
  long n0 = 0, n2 = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const BatchWork& w = ws[i];
    Vector r2 = ms[i].y_t - w.x * out.alpha - w.z * ms[i].b;
    double ref_sq = 0.0;
    if (w.ref) {
      ref_sq = r2[*w.ref] * r2[*w.ref];
      num0 += ref_sq + ms[i].v_ref;
      ++n0;
    }
    num2 += r2.squaredNorm() - ref_sq + (ms[i].v_trace - ms[i].v_ref);
    n2 += w.rows() - (w.ref ? 1 : 0);
  }
  out.sigma0_sq =
      n0 > 0 ? std::max(num0 / static_cast<double>(n0), var_floor)
             : old.sigma0_sq;
  out.sigma_sq =
      n2 > 0 ? std::max(num2 / static_cast<double>(n2), var_floor)
             : old.sigma_sq;
  if (!out.alpha.allFinite() || !std::isfinite(out.sigma0_sq) ||
      !std::isfinite(out.sigma_sq) || !out.d.allFinite())
    throw_error(ErrorCode::numeric_error, "non-finite CM update");
  return out;
}

double loglik_lean(const ModelParameters& P, const MissingMechanism* mech,
                   const std::vector<BatchWork>& ws, unsigned* clamp_count) {
  double ll = 0.0;
  const Index h = P.d.rows();
  bool mech_degenerate_exponential =
      mech && mech->form == MissingMechanism::Form::exponential &&
      mech->gamma == 0.0 && mech->gamma0 == 0.0 && !mech->gamma2;
  for (const BatchWork& w : ws) {
    if (!w.missing) {
      const ResidualScales sc = scales_for(P, w);
      const double pr_rows = static_cast<double>(w.rows());
      Vector r = w.y - w.x * P.alpha;
      Vector u = sc.inv_t * (w.z.transpose() * r);
      Matrix G = sc.inv_t * w.ztz;
      double log_det_r = (pr_rows - (w.ref ? 1.0 : 0.0)) * std::log(P.sigma_sq);
      double quad = sc.inv_t * r.squaredNorm();
      if (w.ref) {
        u.noalias() += sc.dref * w.z_ref * r[*w.ref];
        G.noalias() += sc.dref * (w.z_ref * w.z_ref.transpose());
        log_det_r += std::log(P.sigma0_sq);
        quad += sc.dref * r[*w.ref] * r[*w.ref];
      }
      Matrix M = Matrix::Identity(h, h) + G * P.d;
      Eigen::PartialPivLU<Matrix> lu(M);
      const double det_m = lu.determinant();
      if (!(det_m > 0.0))
        throw_error(ErrorCode::numeric_error,
                    "Sigma_i is not positive definite");
      Matrix delta = P.d * lu.inverse();
      quad -= u.dot(delta * u);
      ll += -0.5 * (pr_rows * kLog2Pi + log_det_r + std::log(det_m) + quad);

      if (mech) {
        if (mech->form == MissingMechanism::Form::exponential) {
          if (mech_degenerate_exponential)
            throw_error(ErrorCode::inconsistent_mechanism,
                        "mechanism assigns probability one to missingness "
                        "but observed batches exist");
          const double s = w.y.mean();
          const double pr = miss_prob(*mech, s, w.mech_cov, clamp_count);
          ll += pr < 1.0 ? std::log1p(-pr)
                         : -std::numeric_limits<double>::infinity();
        } else {
          double eta = mech->gamma0 + mech->gamma * w.y.mean();
          if (mech->gamma2) eta += mech->gamma2->dot(*w.mech_cov);
          ll += -softplus(eta);  // log(1 - inverse_logit(eta))
        }
      }
    } else if (mech) {
      const double p = static_cast<double>(w.p_full);
      const double s0 = w.ref ? P.sigma0_sq : P.sigma_sq;
      const double one_r_one = w.ref ? s0 + (p - 1.0) * P.sigma_sq
                                     : p * P.sigma_sq;
      const double s_mean = (w.x * P.alpha).sum() / p;
      const double s_var = (one_r_one + w.zt1.dot(P.d * w.zt1)) / (p * p);
      double eta0 = mech->gamma0;
      if (mech->gamma2) eta0 += mech->gamma2->dot(*w.mech_cov);
      if (mech->form == MissingMechanism::Form::exponential) {
        const double log_pr = -eta0 - mech->gamma * s_mean +
                              0.5 * mech->gamma * mech->gamma * s_var;
        if (log_pr > 0.0) {
          if (clamp_count) ++(*clamp_count);
          // clamped to probability one: contributes log(1) = 0
        } else {
          ll += log_pr;
        }
      } else {
        ll += std::log(
            logistic_weighted_moments(s_mean, s_var, eta0, mech->gamma).prob);
      }
    }
  }
  return ll;
}

// ---- flat h = 1 engine -------------------------------------------------
//
// The application model uses a single random intercept per batch; with
// h = 1 and a diagonal R every E-step quantity is scalar and the sweep
// runs on contiguous arrays with no per-iteration allocation.

struct ScalarEngine {
  int q = 0;
  int k = 0;
  const MissingMechanism* mech = nullptr;
  double var_floor = 0.0;

  // per batch
  std::vector<int> offset, rows, ref;  // ref: row index or -1
  std::vector<unsigned char> missing;
  std::vector<double> p_full;
  std::vector<double> ztz, zt1, z_ref;
  std::vector<const Vector*> mech_cov;
  // flattened rows
  std::vector<double> x;  // row-major k per row
  std::vector<double> z;
  std::vector<double> y;    // observed response (zeros for missing batches)
  std::vector<double> xtx;  // k*k per batch
  std::vector<double> x_ref;  // k per batch

  // per-iteration state
  std::vector<double> y_t, v;          // flattened rows
  std::vector<double> b, delta, v_ref, v_trace;  // per batch
  std::vector<double> a_accum, a_fact, rhs;      // normal equations

  explicit ScalarEngine(const std::vector<BatchWork>& ws,
                        const MissingMechanism& m)
      : q(static_cast<int>(ws.size())),
        k(static_cast<int>(ws.front().x.cols())),
        mech(&m) {
    int total = 0;
    for (const auto& w : ws) total += static_cast<int>(w.rows());
    offset.reserve(ws.size());
    x.resize(static_cast<std::size_t>(total) * k);
    z.resize(total);
    y.assign(total, 0.0);
    y_t.resize(total);
    v.resize(total);
    xtx.resize(static_cast<std::size_t>(q) * k * k);
    x_ref.assign(static_cast<std::size_t>(q) * k, 0.0);
    b.resize(q);
    delta.resize(q);
    v_ref.resize(q);
    v_trace.resize(q);
    a_accum.resize(static_cast<std::size_t>(k) * k);
    a_fact.resize(static_cast<std::size_t>(k) * k);
    rhs.resize(k);
    int at = 0;
    for (int i = 0; i < q; ++i) {
      const BatchWork& w = ws[static_cast<std::size_t>(i)];
      const int p = static_cast<int>(w.rows());
      offset.push_back(at);
      rows.push_back(p);
      ref.push_back(w.ref ? static_cast<int>(*w.ref) : -1);
      missing.push_back(w.missing ? 1 : 0);
      p_full.push_back(static_cast<double>(w.p_full));
      ztz.push_back(w.ztz(0, 0));
      zt1.push_back(w.zt1[0]);
      z_ref.push_back(w.ref ? w.z_ref[0] : 0.0);
      mech_cov.push_back(w.mech_cov);
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < k; ++c)
          x[static_cast<std::size_t>(at + r) * k + c] = w.x(r, c);
        z[static_cast<std::size_t>(at + r)] = w.z(r, 0);
        if (!w.missing) y[static_cast<std::size_t>(at + r)] = w.y[r];
      }
      for (int a = 0; a < k; ++a)
        for (int c = 0; c < k; ++c)
          xtx[(static_cast<std::size_t>(i) * k + a) * k + c] = w.xtx(a, c);
      if (w.ref)
        for (int c = 0; c < k; ++c)
          x_ref[static_cast<std::size_t>(i) * k + c] = w.x_ref[c];
      at += p;
    }
  }

  // one ECM sweep; returns the updated parameters
  ModelParameters sweep(const ModelParameters& cur) {
    const double s2 = cur.sigma_sq;
    if (!(s2 > 0.0))
      throw_error(ErrorCode::numeric_error, "sigma^2 is not positive");
    const double inv_t = 1.0 / s2;
    const double s0 = cur.sigma0_sq;
    const double d_cur = cur.d(0, 0);
    const double gamma = mech->gamma;
    const bool logit = mech->form == MissingMechanism::Form::logit;

    double d_accum = 0.0;
    for (int i = 0; i < q; ++i) {
      const int p = rows[i];
      const int at = offset[i];
      const bool has_ref = ref[i] >= 0;
      if (has_ref && !(s0 > 0.0))
        throw_error(ErrorCode::numeric_error, "sigma0^2 is not positive");
      const double dref = has_ref ? 1.0 / s0 - inv_t : 0.0;
      if (!missing[i]) {
        double u = 0.0, r_ref = 0.0;
        for (int r = 0; r < p; ++r) {
          const double* xr = &x[static_cast<std::size_t>(at + r) * k];
          double mu = 0.0;
          for (int c = 0; c < k; ++c) mu += xr[c] * cur.alpha[c];
          const double res = y[static_cast<std::size_t>(at + r)] - mu;
          u += z[static_cast<std::size_t>(at + r)] * res;
          if (r == ref[i]) r_ref = res;
          y_t[static_cast<std::size_t>(at + r)] =
              y[static_cast<std::size_t>(at + r)];
        }
        u *= inv_t;
        double g = inv_t * ztz[i];
        if (has_ref) {
          u += dref * z_ref[i] * r_ref;
          g += dref * z_ref[i] * z_ref[i];
        }
        const double m = 1.0 + g * d_cur;
        delta[i] = d_cur / m;
        b[i] = delta[i] * u;
        v_trace[i] = ztz[i] * delta[i];
        v_ref[i] = has_ref ? z_ref[i] * z_ref[i] * delta[i] : 0.0;
      } else {
        const double pf = p_full[i];
        const double dz1 = d_cur * zt1[i];
        if (!logit) {
          for (int r = 0; r < p; ++r) {
            const double* xr = &x[static_cast<std::size_t>(at + r) * k];
            double mu = 0.0;
            for (int c = 0; c < k; ++c) mu += xr[c] * cur.alpha[c];
            double sig1 = z[static_cast<std::size_t>(at + r)] * dz1 + s2;
            if (r == ref[i]) sig1 += s0 - s2;
            y_t[static_cast<std::size_t>(at + r)] = mu - gamma / pf * sig1;
          }
          b[i] = -gamma / pf * dz1;
          delta[i] = d_cur;
          v_ref[i] = has_ref ? s0 : 0.0;
          v_trace[i] = has_ref ? s0 + (pf - 1.0) * s2 : pf * s2;
        } else {
          double mu_sum = 0.0;
          for (int r = 0; r < p; ++r) {
            const double* xr = &x[static_cast<std::size_t>(at + r) * k];
            double mu = 0.0;
            for (int c = 0; c < k; ++c) mu += xr[c] * cur.alpha[c];
            y_t[static_cast<std::size_t>(at + r)] = mu;  // mean for now
            mu_sum += mu;
          }
          const double one_r_one =
              has_ref ? s0 + (pf - 1.0) * s2 : pf * s2;
          const double s_mean = mu_sum / pf;
          const double s_var = (one_r_one + zt1[i] * dz1) / (pf * pf);
          double eta0 = mech->gamma0;
          if (mech->gamma2) eta0 += mech->gamma2->dot(*mech_cov[i]);
          const WeightedMoments wm =
              logistic_weighted_moments(s_mean, s_var, eta0, gamma);
          const double shift = wm.mean - s_mean;
          const double pv = pf * s_var;
          const double dd = (s_var - wm.var) / (pv * pv);
          for (int r = 0; r < p; ++r) {
            double sig1 = z[static_cast<std::size_t>(at + r)] * dz1 + s2;
            if (r == ref[i]) sig1 += s0 - s2;
            y_t[static_cast<std::size_t>(at + r)] += sig1 * (shift / pv);
          }
          b[i] = dz1 * (shift / pv);
          delta[i] = d_cur - dz1 * dz1 * dd;
          const double sum_r = one_r_one;
          const double sum_r2 =
              has_ref ? s0 * s0 + (pf - 1.0) * s2 * s2 : pf * s2 * s2;
          v_ref[i] = has_ref ? s0 - s0 * s0 * dd : 0.0;
          v_trace[i] = sum_r - sum_r2 * dd;
        }
      }
      d_accum += b[i] * b[i] + delta[i];
    }

    ModelParameters out;
    out.d = Matrix::Constant(1, 1, d_accum / q);

    // alpha with the pre-update R
    std::fill(a_accum.begin(), a_accum.end(), 0.0);
    std::fill(rhs.begin(), rhs.end(), 0.0);
    for (int i = 0; i < q; ++i) {
      const int p = rows[i];
      const int at = offset[i];
      const bool has_ref = ref[i] >= 0;
      const double dref = has_ref ? 1.0 / s0 - inv_t : 0.0;
      const double* g = &xtx[static_cast<std::size_t>(i) * k * k];
      for (int a = 0; a < k * k; ++a) a_accum[a] += inv_t * g[a];
      double v_ref_val = 0.0;
      for (int r = 0; r < p; ++r) {
        const double vv = y_t[static_cast<std::size_t>(at + r)] -
                          z[static_cast<std::size_t>(at + r)] * b[i];
        v[static_cast<std::size_t>(at + r)] = vv;
        const double* xr = &x[static_cast<std::size_t>(at + r) * k];
        for (int c = 0; c < k; ++c) rhs[c] += inv_t * xr[c] * vv;
        if (r == ref[i]) v_ref_val = vv;
      }
      if (has_ref) {
        const double* xr = &x_ref[static_cast<std::size_t>(i) * k];
        for (int a = 0; a < k; ++a) {
          for (int c = 0; c < k; ++c)
            a_accum[static_cast<std::size_t>(a) * k + c] +=
                dref * xr[a] * xr[c];
          rhs[a] += dref * xr[a] * v_ref_val;
        }
      }
    }
    out.alpha.resize(k);
    std::copy(a_accum.begin(), a_accum.end(), a_fact.begin());
    std::copy(rhs.begin(), rhs.end(), out.alpha.data());
    if (!cholesky_solve(a_fact.data(), out.alpha.data(), k)) {
      // near-singular: route through the pivoted solver for diagnostics
      Matrix a_mat(k, k);
      Vector rhs_vec(k);
      for (int a = 0; a < k; ++a) {
        rhs_vec[a] = rhs[static_cast<std::size_t>(a)];
        for (int c = 0; c < k; ++c)
          a_mat(a, c) = a_accum[static_cast<std::size_t>(a) * k + c];
      }
      out.alpha = solve_fixed_effects(a_mat, rhs_vec);
    }

    // variance updates with the new alpha
    double num0 = 0.0, num2 = 0.0;
    long n0 = 0, n2 = 0;
    for (int i = 0; i < q; ++i) {
      const int p = rows[i];
      const int at = offset[i];
      double sq = 0.0, ref_sq = 0.0;
      for (int r = 0; r < p; ++r) {
        const double* xr = &x[static_cast<std::size_t>(at + r) * k];
        double fit_val = 0.0;
        for (int c = 0; c < k; ++c) fit_val += xr[c] * out.alpha[c];
        const double r2 = v[static_cast<std::size_t>(at + r)] - fit_val;
        sq += r2 * r2;
        if (r == ref[i]) ref_sq = r2 * r2;
      }
      if (ref[i] >= 0) {
        num0 += ref_sq + v_ref[i];
        ++n0;
        num2 += sq - ref_sq + (v_trace[i] - v_ref[i]);
        n2 += p - 1;
      } else {
        num2 += sq + v_trace[i];
        n2 += p;
      }
    }
    // constrained CM: boundary maximizers are pinned just inside the
    // parameter space, which preserves the ascent property
    out.sigma0_sq =
        n0 > 0 ? std::max(num0 / static_cast<double>(n0), var_floor)
               : cur.sigma0_sq;
    out.sigma_sq =
        n2 > 0 ? std::max(num2 / static_cast<double>(n2), var_floor)
               : cur.sigma_sq;
    if (!out.alpha.allFinite() || !std::isfinite(out.sigma0_sq) ||
        !std::isfinite(out.sigma_sq) || !std::isfinite(out.d(0, 0)))
      throw_error(ErrorCode::numeric_error, "non-finite CM update");
    return out;
  }
};

ModelParameters initial_params(const std::vector<BatchWork>& ws, Index k,
                               Index h) {
  Index n_rows = 0;
  for (const BatchWork& w : ws)
    if (!w.missing) n_rows += w.rows();
  Matrix X(n_rows, k);
  Vector y(n_rows);
  Index at = 0;
  for (const BatchWork& w : ws) {
    if (w.missing) continue;
    X.middleRows(at, w.rows()) = w.x;
    y.segment(at, w.rows()) = w.y;
    at += w.rows();
  }
  ModelParameters p;
  p.alpha = X.colPivHouseholderQr().solve(y);

  double ss_ref = 0.0, ss_t = 0.0;
  long n_ref = 0, n_t = 0;
  std::vector<double> batch_means;
  for (const BatchWork& w : ws) {
    if (w.missing) continue;
    Vector r = w.y - w.x * p.alpha;
    batch_means.push_back(r.mean());
    for (Index j = 0; j < w.rows(); ++j) {
      if (w.ref && *w.ref == j) {
        ss_ref += r[j] * r[j];
        ++n_ref;
      } else {
        ss_t += r[j] * r[j];
        ++n_t;
      }
    }
  }
  p.sigma_sq = std::max(n_t > 0 ? ss_t / static_cast<double>(n_t) : 1.0, 1e-6);
  p.sigma0_sq =
      n_ref > 0 ? std::max(ss_ref / static_cast<double>(n_ref), 1e-6)
                : p.sigma_sq;
  double d0 = 1e-6;
  if (batch_means.size() > 1) {
    double mean = 0.0;
    for (double m : batch_means) mean += m;
    mean /= static_cast<double>(batch_means.size());
    double var = 0.0;
    for (double m : batch_means) var += (m - mean) * (m - mean);
    var /= static_cast<double>(batch_means.size() - 1);
    d0 = std::max(var, 1e-6);
  }
  p.d = d0 * Matrix::Identity(h, h);
  return p;
}

double relative_change(const ModelParameters& a, const ModelParameters& b) {
  double c = 0.0;
  auto upd = [&](double nv, double ov) {
    c = std::max(c, std::abs(nv - ov) / (1.0 + std::abs(ov)));
  };
  for (Index i = 0; i < a.alpha.size(); ++i) upd(a.alpha[i], b.alpha[i]);
  upd(a.sigma0_sq, b.sigma0_sq);
  upd(a.sigma_sq, b.sigma_sq);
  for (Index i = 0; i < a.d.rows(); ++i)
    for (Index j = 0; j < a.d.cols(); ++j) upd(a.d(i, j), b.d(i, j));
  return c;
}

Matrix fisher_information(const ModelParameters& P,
                          const std::vector<BatchWork>& ws) {
  const Index k = P.alpha.size();
  const Index h = P.d.rows();
  Matrix info = Matrix::Zero(k, k);
  for (const BatchWork& w : ws) {
    if (w.missing) continue;
    const ResidualScales sc = scales_for(P, w);
    Matrix xtrx = sc.inv_t * w.xtx;
    Matrix xtrz = sc.inv_t * w.xtz;
    Matrix G = sc.inv_t * w.ztz;
    if (w.ref) {
      xtrx.noalias() += sc.dref * (w.x_ref * w.x_ref.transpose());
      xtrz.noalias() += sc.dref * (w.x_ref * w.z_ref.transpose());
      G.noalias() += sc.dref * (w.z_ref * w.z_ref.transpose());
    }
    Matrix M = Matrix::Identity(h, h) + G * P.d;
    Matrix delta = P.d * M.inverse();
    delta = 0.5 * (delta + delta.transpose()).eval();
    info.noalias() += xtrx - xtrz * delta * xtrz.transpose();
  }
  return 0.5 * (info + info.transpose());
}

int audit_updates(const ModelParameters& p) {
  int violations = 0;
  if (p.sigma0_sq < 0.0 || p.sigma_sq < 0.0) ++violations;
  Eigen::SelfAdjointEigenSolver<Matrix> es(p.d);
  if (es.eigenvalues().minCoeff() < -1e-10 * (1.0 + p.d.norm())) ++violations;
  return violations;
}

}  // namespace

EStepMoments e_step_observed(const ModelParameters& params,
                             const BatchDesign& design, const Vector& y) {
  design.validate();
  params.validate();
  if (y.size() != design.batch_size())
    throw_error(ErrorCode::invalid_argument, "response length mismatch");
  const Matrix sigma = marginal_covariance(params, design);
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw_error(ErrorCode::numeric_error, "Sigma_i is not positive definite");
  const Vector r = y - design.x * params.alpha;
  const Vector wr = llt.solve(r);
  const Matrix wz = llt.solve(design.z);
  EStepMoments m;
  m.b_t = params.d * design.z.transpose() * wr;
  m.delta_t = params.d - params.d * design.z.transpose() * wz * params.d;
  m.delta_t = 0.5 * (m.delta_t + m.delta_t.transpose()).eval();
  m.v_t = design.z * m.delta_t * design.z.transpose();
  m.y_t = y;
  return m;
}

EStepMoments e_step_missing(const ModelParameters& params,
                            const BatchDesign& design,
                            const MissingMechanism& mech,
                            const Vector* batch_covariates) {
  design.validate();
  params.validate();
  const Matrix sigma = marginal_covariance(params, design);
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw_error(ErrorCode::numeric_error, "Sigma_i is not positive definite");
  const Matrix r_mat = residual_covariance(params, design);

  EStepMoments m;
  if (mech.form == MissingMechanism::Form::exponential) {
    const TiltedMoments tm = tilted_moments_exponential(params, design, mech);
    m.y_t = tm.mean;
    m.b_t = params.d * design.z.transpose() *
            llt.solve(m.y_t - design.x * params.alpha);
    m.delta_t = params.d;
    m.v_t = r_mat;
    return m;
  }
  const TiltedMoments tm =
      tilted_moments_logit(params, design, mech, batch_covariates);
  const Matrix wz = llt.solve(design.z);
  const Matrix wv = llt.solve(tm.cov);  // W var(y|M=1)
  m.y_t = tm.mean;
  m.b_t = params.d * design.z.transpose() *
          llt.solve(m.y_t - design.x * params.alpha);
  m.delta_t = params.d - params.d * design.z.transpose() * wz * params.d +
              params.d * design.z.transpose() * wv * wz * params.d;
  m.delta_t = 0.5 * (m.delta_t + m.delta_t.transpose()).eval();
  const Matrix zdz = design.z * params.d * design.z.transpose();
  m.v_t = zdz - zdz * llt.solve(zdz) + r_mat * wv * llt.solve(r_mat);
  m.v_t = 0.5 * (m.v_t + m.v_t.transpose()).eval();
  return m;
}

ModelParameters cm_step(const std::vector<EStepMoments>& moments,
                        const std::vector<BatchDesign>& designs,
                        const ModelParameters& current) {
  if (moments.size() != designs.size() || moments.empty())
    throw_error(ErrorCode::invalid_argument,
                "moments/designs size mismatch");
  const std::size_t q = moments.size();
  const Index k = current.alpha.size();
  const Index h = current.d.rows();

  ModelParameters out;
  out.d = Matrix::Zero(h, h);
  for (const auto& m : moments)
    out.d.noalias() += m.b_t * m.b_t.transpose() + m.delta_t;
  out.d /= static_cast<double>(q);
  out.d = 0.5 * (out.d + out.d.transpose()).eval();

  Matrix A = Matrix::Zero(k, k);
  Vector rhs = Vector::Zero(k);
  for (std::size_t i = 0; i < q; ++i) {
    const Matrix r_inv =
        residual_covariance(current, designs[i]).diagonal().cwiseInverse()
            .asDiagonal();
    const Matrix xtr = designs[i].x.transpose() * r_inv;
    A.noalias() += xtr * designs[i].x;
    rhs.noalias() += xtr * (moments[i].y_t - designs[i].z * moments[i].b_t);
  }
  out.alpha = solve_fixed_effects(A, rhs);

  double num0 = 0.0, num2 = 0.0;
  long n0 = 0, n2 = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const Vector r2 = moments[i].y_t - designs[i].x * out.alpha -
                      designs[i].z * moments[i].b_t;
    double ref_sq = 0.0, v_ref = 0.0;
    if (designs[i].reference_channel) {
      const Index ref = *designs[i].reference_channel;
      ref_sq = r2[ref] * r2[ref];
      v_ref = moments[i].v_t(ref, ref);
      num0 += ref_sq + v_ref;
      ++n0;
    }
    num2 += r2.squaredNorm() - ref_sq + (moments[i].v_t.trace() - v_ref);
    n2 += designs[i].batch_size() - (designs[i].reference_channel ? 1 : 0);
  }
  out.sigma0_sq = n0 > 0 ? num0 / static_cast<double>(n0) : current.sigma0_sq;
  out.sigma_sq = n2 > 0 ? num2 / static_cast<double>(n2) : current.sigma_sq;
  return out;
}

double observed_data_loglik(const ModelParameters& params,
                            const std::vector<BatchDesign>& designs,
                            const FeatureBatchData& data,
                            const MissingMechanism* mech,
                            unsigned* clamp_count) {
  if (mech) mech->validate();
  params.validate();
  const std::vector<BatchWork> ws = build_workspace(data, designs, mech);
  return loglik_lean(params, mech, ws, clamp_count);
}

FitResult fit(const FeatureBatchData& data,
              const std::vector<BatchDesign>& designs,
              const MissingMechanism& mech, const FitConfig& config,
              const ModelParameters* warm_start) {
  config.validate();
  mech.validate();
  const std::vector<BatchWork> ws = build_workspace(data, designs, &mech);
  const Index k = designs.front().n_fixed();
  const Index h = designs.front().n_random();

  FitResult res;
  res.params = warm_start ? *warm_start : initial_params(ws, k, h);
  res.mechanism_monitored =
      mech.form == MissingMechanism::Form::logit || mech.gamma != 0.0;
  const MissingMechanism* monitor_mech =
      res.mechanism_monitored ? &mech : nullptr;

  // Boundary fits (variance MLE at zero) are pinned just inside the
  // parameter space; the floor is scale-aware via the initial estimates.
  const double var_floor =
      1e-7 * (res.params.sigma_sq + res.params.sigma0_sq);
  const double d_scale0 = res.params.d.norm();

  std::vector<Moments> ms;
  std::unique_ptr<ScalarEngine> scalar;
  if (h == 1) {
    scalar = std::make_unique<ScalarEngine>(ws, mech);
    scalar->var_floor = var_floor;
  } else {
    ms.resize(ws.size());
  }

  if (config.monitor_likelihood)
    res.loglik_trace.push_back(
        loglik_lean(res.params, monitor_mech, ws, &res.clamp_warnings));

  for (int iter = 1; iter <= config.max_iter; ++iter) {
    res.n_iter = iter;
    try {
      ModelParameters next;
      if (scalar) {
        next = scalar->sweep(res.params);
        if (next.sigma0_sq < 0.0 || next.sigma_sq < 0.0 ||
            next.d(0, 0) < 0.0)
          ++res.psd_violations;
      } else {
        for (std::size_t i = 0; i < ws.size(); ++i)
          e_step_lean(res.params, &mech, ws[i], ms[i]);
        next = cm_lean(ws, ms, res.params, var_floor);
        res.psd_violations += audit_updates(next);
      }
      // High-missingness features can drive D off to infinity under the
      // clamped exponential mechanism (the missing-batch probability
      // saturates at one); surface that as a diagnosis instead of an
      // eventual overflow.
      if (next.d.norm() > 1e9 * (1.0 + d_scale0))
        throw_error(ErrorCode::numeric_error,
                    "random-effect variance diverged under the missing-data "
                    "mechanism (feature is missing in too many batches)");
      const double change = relative_change(next, res.params);
      res.params = std::move(next);
      if (config.monitor_likelihood)
        res.loglik_trace.push_back(
            loglik_lean(res.params, monitor_mech, ws, &res.clamp_warnings));
      if (change < config.tol) {
        res.converged = true;
        break;
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::numeric_error ||
          e.code() == ErrorCode::singular_design) {
        std::ostringstream os;
        os << "at iteration " << iter << ": " << e.what();
        throw_error(e.code(), os.str());
      }
      throw;
    }
  }

  const Matrix info = fisher_information(res.params, ws);
  Eigen::FullPivLU<Matrix> lu(info);
  lu.setThreshold(1e-12);
  if (lu.rank() < info.cols())
    throw_error(ErrorCode::singular_design,
                "information matrix for alpha is singular");
  res.alpha_cov = lu.inverse();
  res.alpha_cov = 0.5 * (res.alpha_cov + res.alpha_cov.transpose()).eval();
  return res;
}

ProfileResult profile_gamma(const FeatureBatchData& data,
                            const std::vector<BatchDesign>& designs,
                            const std::vector<MissingMechanism>& grid,
                            const FitConfig& config) {
  if (grid.empty())
    throw_error(ErrorCode::invalid_argument, "empty mechanism grid");
  ProfileResult out;
  out.points.reserve(grid.size());
  for (const auto& mech : grid) {
    ProfilePoint pt;
    pt.mech = mech;
    try {
      const FitResult f = fit(data, designs, mech, config);
      pt.loglik = observed_data_loglik(f.params, designs, data, &mech);
      pt.ok = true;
    } catch (const std::exception& e) {
      pt.error = e.what();
    }
    out.points.push_back(std::move(pt));
  }
  for (std::size_t i = 0; i < out.points.size(); ++i) {
    if (!out.points[i].ok) continue;
    if (out.best < 0 ||
        out.points[i].loglik > out.points[static_cast<std::size_t>(out.best)].loglik)
      out.best = static_cast<int>(i);
  }
  return out;
}

}  // namespace bamm
