#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Cholesky>
#include <cmath>
#include <functional>

#include "bamm/mechanism.hpp"
#include "bamm/rng.hpp"
#include "mc_oracle.hpp"
#include "test_util.hpp"

using namespace bamm;
using test::McMoments;
using test::rejection_oracle;

namespace {

void check_against_oracle(const TiltedMoments& tm, const McMoments& mc) {
  const test::OracleDeviation dev = test::oracle_discrepancy(tm, mc);
  CHECK(dev.worst <= test::three_se_threshold(dev.n_entries));
}

}  // namespace

TEST_CASE("miss_prob closed forms") {
  MissingMechanism m;
  m.gamma0 = 0.0;
  m.gamma = 0.1;
  CHECK(miss_prob(m, 10.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(miss_prob(m, 100.0) ==
        doctest::Approx(std::exp(-10.0)).epsilon(1e-12));

  m.gamma = 0.0;
  CHECK(miss_prob(m, 123.0) == 1.0);  // constant missingness

  SUBCASE("positive exponent clamps with a counted warning") {
    m.gamma0 = -1.0;
    unsigned clamps = 0;
    CHECK(miss_prob(m, 0.0, nullptr, &clamps) == 1.0);
    CHECK(clamps == 1);
  }
  SUBCASE("logit form") {
    MissingMechanism lg;
    lg.form = MissingMechanism::Form::logit;
    lg.gamma0 = 0.5;
    lg.gamma = -0.1;
    const double eta = 0.5 - 0.1 * 10.0;
    CHECK(miss_prob(lg, 10.0) ==
          doctest::Approx(1.0 / (1.0 + std::exp(-eta))).epsilon(1e-12));
  }
  SUBCASE("always a probability") {
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
      MissingMechanism any;
      any.form = (rng.next() & 1) ? MissingMechanism::Form::logit
                                  : MissingMechanism::Form::exponential;
      any.gamma0 = 4.0 * rng.normal();
      any.gamma = 0.5 * rng.normal();
      const double pr = miss_prob(any, 20.0 * rng.normal());
      CHECK(pr > 0.0);
      CHECK(pr <= 1.0);
    }
  }
}

TEST_CASE("estimate_gamma") {
  SUBCASE("exact interpolation through two points") {
    std::vector<MechanismFitInput> in{{"a", 10.0, std::exp(-1.0)},
                                      {"b", 20.0, std::exp(-2.0)}};
    const GammaEstimate est = estimate_gamma(in);
    CHECK(est.gamma0 == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(est.gamma == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(est.n_used == 2);
    CHECK(est.n_excluded == 0);
  }
  SUBCASE("exact recovery on the curve") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
      const double g0 = rng.normal() * 0.3;
      const double g = 0.02 + 0.3 * rng.uniform();
      std::vector<MechanismFitInput> in;
      for (int j = 0; j < 12; ++j) {
        const double t = 5.0 + 10.0 * rng.uniform();
        const double pi = std::exp(-g0 - g * t);
        if (pi >= 1.0) continue;
        in.push_back({"f", t, pi});
      }
      if (in.size() < 3) continue;
      const GammaEstimate est = estimate_gamma(in);
      CHECK(std::abs(est.gamma0 - g0) < 1e-12);
      CHECK(std::abs(est.gamma - g) < 1e-12);
    }
  }
  SUBCASE("fully observed features are excluded and can starve the fit") {
    std::vector<MechanismFitInput> in{{"a", 10.0, 0.0}, {"b", 12.0, 0.0}};
    CHECK_THROWS_AS(estimate_gamma(in), Error);
    in.push_back({"c", 9.0, 0.4});
    CHECK_THROWS_AS(estimate_gamma(in), Error);  // only one usable
  }
  SUBCASE("identical abundances are singular") {
    std::vector<MechanismFitInput> in{{"a", 10.0, 0.3}, {"b", 10.0, 0.5}};
    CHECK_THROWS_WITH_AS(estimate_gamma(in),
                         doctest::Contains("identical"), Error);
  }
  SUBCASE("logit-scale fit recovers a logit curve") {
    const double g0 = 1.2, g = -0.17;
    std::vector<MechanismFitInput> in;
    for (int j = 0; j < 8; ++j) {
      const double t = 6.0 + j;
      in.push_back({"f", t, 1.0 / (1.0 + std::exp(-(g0 + g * t)))});
    }
    const GammaEstimate est = estimate_gamma_logit(in);
    CHECK(std::abs(est.gamma0 - g0) < 1e-10);
    CHECK(std::abs(est.gamma - g) < 1e-10);
  }
}

TEST_CASE("exponential tilt: closed form and oracle") {
  const ModelParameters p = test::paper_params();
  const BatchDesign d = test::plex4_design(0, 0, 0);
  MissingMechanism m;
  m.gamma = 0.1;

  SUBCASE("paper parameter values") {
    const TiltedMoments tm = tilted_moments_exponential(p, d, m);
    Vector expect(4);
    expect << 9.65, 9.60, 9.60, 9.60;
    CHECK((tm.mean - expect).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((tm.cov - marginal_covariance(p, d)).norm() < 1e-12);
  }
  SUBCASE("zero tilt is the marginal") {
    MissingMechanism z;
    z.gamma = 0.0;
    const TiltedMoments tm = tilted_moments_exponential(p, d, z);
    CHECK((tm.mean - d.x * p.alpha).norm() < 1e-14);
  }
  SUBCASE("mean shift is linear in gamma") {
    MissingMechanism twice;
    twice.gamma = 0.2;
    const Vector mu = d.x * p.alpha;
    const Vector shift1 = mu - tilted_moments_exponential(p, d, m).mean;
    const Vector shift2 = mu - tilted_moments_exponential(p, d, twice).mean;
    CHECK((shift2 - 2.0 * shift1).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("rejection-sampling oracle") {
    Rng rng(2024);
    double s_mean = 0.0, s_var = 0.0;
    batch_mean_law(p, d, &s_mean, &s_var);
    const double bound =
        std::exp(-m.gamma0 - m.gamma * (s_mean - 8.0 * std::sqrt(s_var)));
    const McMoments mc = rejection_oracle(
        p, d,
        [&](double s) { return std::exp(-m.gamma0 - m.gamma * s); }, bound,
        100000, rng);
    check_against_oracle(tilted_moments_exponential(p, d, m), mc);
  }
}

TEST_CASE("logit tilt: quadrature against Monte Carlo") {
  const ModelParameters p = test::paper_params();
  const BatchDesign d = test::plex4_design(0, 0, 0);
  MissingMechanism m;
  m.form = MissingMechanism::Form::logit;
  m.gamma0 = 1.0;
  m.gamma = -0.1;  // decreasing in abundance

  SUBCASE("constant weight reduces to the marginal") {
    MissingMechanism z = m;
    z.gamma = 0.0;
    const TiltedMoments tm = tilted_moments_logit(p, d, z);
    CHECK((tm.mean - d.x * p.alpha).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((tm.cov - marginal_covariance(p, d)).norm() < 1e-9);
  }
  SUBCASE("Monte Carlo oracle") {
    Rng rng(77);
    const McMoments mc = rejection_oracle(
        p, d,
        [&](double s) {
          const double eta = m.gamma0 + m.gamma * s;
          return 1.0 / (1.0 + std::exp(-eta));
        },
        1.0, 100000, rng);
    check_against_oracle(tilted_moments_logit(p, d, m), mc);
  }
  SUBCASE("monotone tilts shrink the batch-mean variance") {
    Rng rng(8);
    for (int rep = 0; rep < 50; ++rep) {
      const double mu = 10.0 * rng.uniform();
      const double v = 0.2 + 3.0 * rng.uniform();
      const double g0 = rng.normal();
      const double g1 = rng.normal();
      const WeightedMoments wm = logistic_weighted_moments(mu, v, g0, g1);
      CHECK(wm.var <= v * (1.0 + 1e-10));
      CHECK(wm.prob > 0.0);
      CHECK(wm.prob < 1.0);
    }
  }
  SUBCASE("node doubling agreement at convergence") {
    const WeightedMoments a =
        logistic_weighted_moments(10.0, 2.5, 1.0, -0.15, 16);
    const WeightedMoments b =
        logistic_weighted_moments(10.0, 2.5, 1.0, -0.15, 32);
    CHECK(std::abs(a.prob - b.prob) <= 1e-8 * std::abs(b.prob));
    CHECK(std::abs(a.mean - b.mean) <= 1e-8 * std::abs(b.mean));
    CHECK(std::abs(a.var - b.var) <= 1e-8 * std::abs(b.var));
  }
}

TEST_CASE("marginal missing probability") {
  const ModelParameters p = test::paper_params();
  const BatchDesign d = test::plex4_design(0, 0, 0);

  SUBCASE("zero coefficients give probability one") {
    MissingMechanism z;
    CHECK(marginal_missing_prob(p, d, z) == 1.0);
  }
  SUBCASE("closed form at the paper setting, checked by Monte Carlo") {
    MissingMechanism m;
    m.gamma = 0.1;
    const double v_s = 62.0 / 16.0;
    const double expect = std::exp(-1.0 + 0.005 * v_s);
    const double got = marginal_missing_prob(p, d, m);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));

    Rng rng(99);
    double sum = 0.0, sumsq = 0.0;
    const int n = 200000;
    double s_mean = 0.0, s_var = 0.0;
    batch_mean_law(p, d, &s_mean, &s_var);
    for (int i = 0; i < n; ++i) {
      const double s = s_mean + std::sqrt(s_var) * rng.normal();
      const double w = miss_prob(m, s);
      sum += w;
      sumsq += w * w;
    }
    const double mc = sum / n;
    const double se = std::sqrt((sumsq / n - mc * mc) / n);
    CHECK(std::abs(got - mc) <= 3.0 * se);
  }
  SUBCASE("strictly decreasing in the mean abundance") {
    MissingMechanism m;
    m.gamma = 0.1;
    ModelParameters lo = p, hi = p;
    lo.alpha[0] = 9.0;
    hi.alpha[0] = 11.0;
    CHECK(marginal_missing_prob(lo, d, m) > marginal_missing_prob(p, d, m));
    CHECK(marginal_missing_prob(p, d, m) > marginal_missing_prob(hi, d, m));
  }
  SUBCASE("logit marginal matches direct quadrature") {
    MissingMechanism m;
    m.form = MissingMechanism::Form::logit;
    m.gamma0 = 1.0;
    m.gamma = -0.1;
    double s_mean = 0.0, s_var = 0.0;
    batch_mean_law(p, d, &s_mean, &s_var);
    const WeightedMoments wm =
        logistic_weighted_moments(s_mean, s_var, m.gamma0, m.gamma);
    CHECK(marginal_missing_prob(p, d, m) ==
          doctest::Approx(wm.prob).epsilon(1e-12));
  }
}

TEST_CASE("diagnostic table") {
  SUBCASE("perfect exponential data reproduces itself") {
    std::vector<MechanismFitInput> in;
    for (int j = 0; j < 10; ++j) {
      const double t = 8.0 + 0.5 * j;
      in.push_back({"f" + std::to_string(j), t, std::exp(-0.1 * t)});
    }
    const GammaEstimate est = estimate_gamma(in);
    const DiagnosticTable table = badmm_diagnostic(in, est);
    REQUIRE(table.fit_available);
    for (const auto& row : table.rows)
      CHECK(row.fitted == doctest::Approx(row.pi).epsilon(1e-10));
    CHECK(table.bins.size() == in.size());  // all pi values distinct
  }
  SUBCASE("without a fit the fitted column is NaN") {
    std::vector<MechanismFitInput> in{{"only", 10.0, 0.25}};
    const DiagnosticTable table = badmm_diagnostic(in, std::nullopt);
    CHECK_FALSE(table.fit_available);
    CHECK(std::isnan(table.rows[0].fitted));
    CHECK(table.bins.size() == 1);
    CHECK(table.bins[0].median_t == 10.0);
  }
  SUBCASE("groups with identical missing fraction share a bin") {
    std::vector<MechanismFitInput> in{
        {"a", 9.0, 0.25}, {"b", 11.0, 0.25}, {"c", 10.0, 0.5}};
    const DiagnosticTable table = badmm_diagnostic(in, std::nullopt);
    REQUIRE(table.bins.size() == 2);
    CHECK(table.bins[0].pi == doctest::Approx(0.25));
    CHECK(table.bins[0].median_t == doctest::Approx(10.0));
    CHECK(table.bins[0].n == 2);
  }
}
