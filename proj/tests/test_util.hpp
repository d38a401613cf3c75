#pragma once

#include <vector>

#include "bamm/mechanism.hpp"
#include "bamm/rng.hpp"
#include "bamm/types.hpp"

namespace bamm::test {

// The 4-plex layout used throughout: reference on row 0, intercept-only
// random effect, X = [1, ref, group] unless k overrides it.
inline BatchDesign plex4_design(double g1 = 1.0, double g2 = 0.0,
                                double g3 = 1.0) {
  BatchDesign d;
  d.x.resize(4, 3);
  d.x << 1, 1, 0,
         1, 0, g1,
         1, 0, g2,
         1, 0, g3;
  d.z = Matrix::Ones(4, 1);
  d.reference_channel = 0;
  return d;
}

inline ModelParameters paper_params(double alpha0 = 10.0) {
  ModelParameters p;
  p.alpha = Vector::Zero(3);
  p.alpha[0] = alpha0;
  p.sigma0_sq = 2.0;
  p.sigma_sq = 4.0;
  p.d = Matrix::Constant(1, 1, 3.0);
  return p;
}

// Intercept-only design of size p (no covariates), reference optional.
inline BatchDesign mean_design(Index p, bool with_ref = true) {
  BatchDesign d;
  d.x = Matrix::Ones(p, 1);
  d.z = Matrix::Ones(p, 1);
  if (with_ref) d.reference_channel = 0;
  return d;
}

struct RandomInstance {
  std::vector<BatchDesign> designs;
  FeatureBatchData data;
  ModelParameters truth;
  MissingMechanism mech;
};

// Random mixed-model instance with mechanism-driven batch missingness;
// used by property tests (monotone likelihood, oracle agreement, ...).
inline RandomInstance random_instance(Rng& rng, bool logit_form = false,
                                      int q = 25, bool sporadic = true) {
  RandomInstance inst;
  const Index p = 3 + static_cast<Index>(rng.next() % 3);  // 3..5
  const Index k = 2;
  const Index h = 1 + static_cast<Index>(rng.next() % 2);  // 1..2
  const double base = 8.0 + 4.0 * rng.uniform();

  inst.truth.alpha = Vector::Zero(k);
  inst.truth.alpha[0] = base;
  inst.truth.alpha[1] = rng.normal();
  inst.truth.sigma0_sq = 0.5 + 2.0 * rng.uniform();
  inst.truth.sigma_sq = 1.0 + 3.0 * rng.uniform();
  Matrix l = Matrix::Zero(h, h);
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j <= i; ++j) l(i, j) = 0.7 * rng.normal();
    l(i, i) = 0.4 + std::abs(l(i, i));
  }
  inst.truth.d = l * l.transpose();

  inst.mech.form = logit_form ? MissingMechanism::Form::logit
                              : MissingMechanism::Form::exponential;
  if (logit_form) {
    // decreasing in abundance: match roughly 30-50% missingness at `base`
    inst.mech.gamma = -(0.1 + 0.2 * rng.uniform());
    inst.mech.gamma0 = -inst.mech.gamma * base - 0.5;
  } else {
    inst.mech.gamma = 0.05 + 0.1 * rng.uniform();
    inst.mech.gamma0 = 1.0 - inst.mech.gamma * base;
  }

  for (int i = 0; i < q; ++i) {
    BatchDesign d;
    d.x = Matrix::Ones(p, k);
    for (Index r = 0; r < p; ++r) d.x(r, 1) = rng.normal();
    d.z = Matrix::Ones(p, h);
    for (Index r = 0; r < p; ++r)
      for (Index c = 1; c < h; ++c) d.z(r, c) = rng.normal();
    if (rng.uniform() < 0.9) d.reference_channel = 0;
    inst.designs.push_back(d);

    Vector b(h);
    for (Index c = 0; c < h; ++c) b[c] = rng.normal();
    b = l * b;
    Vector y = d.x * inst.truth.alpha + d.z * b;
    for (Index r = 0; r < p; ++r) {
      const double sd = (d.reference_channel && r == 0)
                            ? std::sqrt(inst.truth.sigma0_sq)
                            : std::sqrt(inst.truth.sigma_sq);
      y[r] += sd * rng.normal();
    }
    const double s = y.mean();
    const double pr = miss_prob(inst.mech, s);
    const bool missing = rng.uniform() < pr;
    std::vector<bool> obs(p, !missing);
    if (!missing && sporadic) {
      for (Index r = 0; r < p; ++r)
        if (rng.uniform() < 0.08) obs[static_cast<std::size_t>(r)] = false;
      bool any = false;
      for (bool o : obs) any = any || o;
      if (!any) obs[0] = true;
    }
    Vector stored = y;
    for (Index r = 0; r < p; ++r)
      if (!obs[static_cast<std::size_t>(r)])
        stored[r] = std::numeric_limits<double>::quiet_NaN();
    inst.data.batches.push_back(stored);
    inst.data.batch_missing.push_back(missing);
    inst.data.observed.push_back(obs);
  }
  // guarantee at least two observed batches
  for (int i = 0; i < 2; ++i) {
    if (inst.data.n_observed_batches() >= 2) break;
    inst.data.batch_missing[static_cast<std::size_t>(i)] = false;
    const Index p = inst.designs[static_cast<std::size_t>(i)].batch_size();
    inst.data.observed[static_cast<std::size_t>(i)].assign(
        static_cast<std::size_t>(p), true);
    Vector y = inst.designs[static_cast<std::size_t>(i)].x * inst.truth.alpha;
    for (Index r = 0; r < p; ++r) y[r] += rng.normal();
    inst.data.batches[static_cast<std::size_t>(i)] = y;
  }
  return inst;
}

}  // namespace bamm::test
