#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bamm/inference.hpp"
#include "bamm/rng.hpp"
#include "bamm/simulation.hpp"
#include "test_util.hpp"

using namespace bamm;

namespace {

FitResult manual_fit(std::vector<double> alpha, std::vector<double> var) {
  FitResult f;
  f.converged = true;
  f.params.alpha = Eigen::Map<Vector>(alpha.data(),
                                      static_cast<Index>(alpha.size()));
  f.alpha_cov = Matrix::Zero(static_cast<Index>(var.size()),
                             static_cast<Index>(var.size()));
  for (std::size_t i = 0; i < var.size(); ++i)
    f.alpha_cov(static_cast<Index>(i), static_cast<Index>(i)) = var[i];
  return f;
}

}  // namespace

TEST_CASE("wald_statistics arithmetic") {
  const FitResult f = manual_fit({0.0, 0.5}, {1.0, 0.0625});
  const auto z = wald_statistics(f, {0, 1});
  CHECK(z[0] == 0.0);
  CHECK(z[1] == doctest::Approx(2.0).epsilon(1e-12));

  SUBCASE("zero variance errors") {
    const FitResult bad = manual_fit({1.0}, {0.0});
    CHECK_THROWS_AS(wald_statistics(bad, {0}), Error);
  }
  SUBCASE("out of range errors") {
    CHECK_THROWS_AS(wald_statistics(f, {7}), Error);
  }
}

TEST_CASE("wald z is invariant to covariate scaling") {
  Rng rng(61);
  auto inst = test::random_instance(rng, false, 25, true);
  MissingMechanism mech = inst.mech;
  FitConfig config;
  config.monitor_likelihood = false;
  config.tol = 1e-10;
  const FitResult a = fit(inst.data, inst.designs, mech, config);

  const double scale = 4.0;
  auto scaled = inst.designs;
  for (auto& d : scaled) d.x.col(1) *= scale;
  const FitResult b = fit(inst.data, scaled, mech, config);

  const double za = wald_statistics(a, {1})[0];
  const double zb = wald_statistics(b, {1})[0];
  CHECK(b.params.alpha[1] == doctest::Approx(a.params.alpha[1] / scale)
                                 .epsilon(1e-6));
  CHECK(za == doctest::Approx(zb).epsilon(1e-8));
}

TEST_CASE("permutation_test") {
  Scenario sc;
  sc.q = 14;
  sc.a = 3.0;  // strong effect
  sc.seed = 9;
  const Replicate rep = generate_replicate(sc, 0);
  MissingMechanism mech;
  mech.gamma = 0.1;
  FitConfig config;
  config.monitor_likelihood = false;

  SUBCASE("effect no permutation can reproduce gives the minimal p-value") {
    // batch-level continuous covariate with a huge coefficient: any
    // reordering of responses destroys the alignment
    Rng rng(4);
    FeatureBatchData data;
    std::vector<BatchDesign> designs;
    for (int i = 0; i < 12; ++i) {
      BatchDesign d;
      d.x = Matrix::Ones(3, 2);
      d.x.col(1).setConstant(static_cast<double>(i));
      d.z = Matrix::Ones(3, 1);
      designs.push_back(d);
      Vector y(3);
      for (int j = 0; j < 3; ++j)
        y[j] = 10.0 + 5.0 * i + 0.01 * rng.normal();
      data.batches.push_back(y);
      data.batch_missing.push_back(false);
      data.observed.emplace_back(3, true);
    }
    MissingMechanism mar;
    const TestResult t =
        permutation_test(data, designs, mar, config, {1}, 49, 1234);
    CHECK(t.b_completed == 49);
    CHECK(t.coefficients[0].p_perm ==
          doctest::Approx(1.0 / 50.0).epsilon(1e-12));
    CHECK(t.coefficients[0].p_perm >= 1.0 / (t.b_requested + 1));
    CHECK(t.reliable);
  }
  SUBCASE("p values live in (0, 1] and respect the add-one floor") {
    Scenario null_sc = sc;
    null_sc.a = 0.0;
    for (int r = 0; r < 5; ++r) {
      const Replicate nrep = generate_replicate(null_sc, r);
      const TestResult t = permutation_test(nrep.data, nrep.designs, mech,
                                            config, {1, 2}, 19, 77 + r);
      for (const auto& c : t.coefficients) {
        CHECK(c.p_perm > 0.0);
        CHECK(c.p_perm <= 1.0);
        CHECK(c.p_perm >= 1.0 / 20.0);
      }
    }
  }
  SUBCASE("deterministic given the seed") {
    const TestResult t1 = permutation_test(rep.data, rep.designs, mech,
                                           config, {2}, 29, 5);
    const TestResult t2 = permutation_test(rep.data, rep.designs, mech,
                                           config, {2}, 29, 5);
    CHECK(t1.coefficients[0].p_perm == t2.coefficients[0].p_perm);
    CHECK(t1.coefficients[0].z == t2.coefficients[0].z);
  }
  SUBCASE("degenerate requests are rejected") {
    CHECK_THROWS_AS(permutation_test(rep.data, rep.designs, mech, config, {2},
                                     0, 1),
                    Error);
    CHECK_THROWS_AS(permutation_test(rep.data, rep.designs, mech, config, {},
                                     10, 1),
                    Error);
  }
}

TEST_CASE("relative_abundance_baseline") {
  SUBCASE("all targets equal to the reference give a zero coefficient") {
    std::vector<BatchDesign> designs;
    FeatureBatchData data;
    for (int i = 0; i < 6; ++i) {
      designs.push_back(test::plex4_design(i % 2 ? 1.0 : 0.0, 1.0, 0.0));
      data.batches.push_back(Vector::Constant(4, 10.0));
      data.batch_missing.push_back(false);
      data.observed.emplace_back(4, true);
    }
    const TestResult t =
        relative_abundance_baseline(data, designs, {2}, {2}, 19, 3);
    CHECK(t.coefficients[0].estimate == doctest::Approx(0.0));
    CHECK(t.coefficients[0].z == 0.0);
    CHECK(t.coefficients[0].p_perm == 1.0);
  }
  SUBCASE("known shift is recovered") {
    // relative abundance = a + a*g plus a trace of noise
    const double a = 0.7;
    Rng rng(6);
    std::vector<BatchDesign> designs;
    FeatureBatchData data;
    for (int i = 0; i < 6; ++i) {
      const BatchDesign d = test::plex4_design(1.0, 0.0, i % 2 ? 1.0 : 0.0);
      Vector y(4);
      y << 10.0 - a, 10.0 + a, 10.0, 10.0 + a * d.x(3, 2);
      for (int j = 1; j < 4; ++j) y[j] += 1e-4 * rng.normal();
      designs.push_back(d);
      data.batches.push_back(y);
      data.batch_missing.push_back(false);
      data.observed.emplace_back(4, true);
    }
    const TestResult t =
        relative_abundance_baseline(data, designs, {2}, {2}, 9, 3);
    CHECK(t.coefficients[0].estimate == doctest::Approx(a).epsilon(1e-3));
  }
  SUBCASE("batches without an observed reference are dropped; none fails") {
    Scenario sc;
    sc.q = 8;
    sc.seed = 4;
    Replicate rep = generate_replicate(sc, 0);
    for (std::size_t i = 0; i < rep.data.batches.size(); ++i) {
      if (rep.data.batch_missing[i]) continue;
      rep.data.observed[i][0] = false;  // hide every reference
      rep.data.batches[i][0] = std::numeric_limits<double>::quiet_NaN();
    }
    CHECK_THROWS_AS(
        relative_abundance_baseline(rep.data, rep.designs, {2}, {2}, 9, 3),
        Error);
  }
}

TEST_CASE("permutation p-values are uniform under an exchangeable null") {
  // fixed-seed empirical check on the baseline path (cheap OLS refits)
  Scenario sc;
  sc.q = 16;
  sc.a = 0.0;
  sc.sporadic_rate = 0.0;
  const int n_reps = 400;
  const int b = 99;
  std::vector<double> ps;
  for (int r = 0; r < n_reps; ++r) {
    sc.seed = 1000 + static_cast<std::uint64_t>(r);
    const Replicate rep = generate_replicate(sc, r);
    try {
      const TestResult t = relative_abundance_baseline(
          rep.data, rep.designs, {2}, {2}, b, 17 + r);
      ps.push_back(t.coefficients[0].p_perm);
    } catch (const Error&) {
    }
  }
  REQUIRE(ps.size() > 350);
  std::sort(ps.begin(), ps.end());
  double ks = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double ecdf_hi = static_cast<double>(i + 1) / ps.size();
    const double ecdf_lo = static_cast<double>(i) / ps.size();
    ks = std::max({ks, std::abs(ecdf_hi - ps[i]), std::abs(ps[i] - ecdf_lo)});
  }
  CHECK(ks < 0.08);
}
