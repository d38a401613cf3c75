#include "bamm/inference.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>

#include "bamm/parallel.hpp"
#include "bamm/rng.hpp"

namespace bamm {

namespace {

// Batch orderings restricted to equal-size strata, so permuted responses
// always match their design dimensions.
std::vector<std::vector<Index>> size_strata(
    const std::vector<BatchDesign>& designs) {
  std::map<Index, std::vector<Index>> by_size;
  for (std::size_t i = 0; i < designs.size(); ++i)
    by_size[designs[i].batch_size()].push_back(static_cast<Index>(i));
  std::vector<std::vector<Index>> out;
  out.reserve(by_size.size());
  for (auto& [size, idx] : by_size) out.push_back(std::move(idx));
  return out;
}

std::vector<Index> draw_permutation(
    const std::vector<std::vector<Index>>& strata, std::size_t q, Rng& rng) {
  std::vector<Index> perm(q);
  for (const auto& stratum : strata) {
    std::vector<Index> shuffled = stratum;
    rng.shuffle(shuffled.data(), shuffled.size());
    for (std::size_t j = 0; j < stratum.size(); ++j)
      perm[static_cast<std::size_t>(stratum[j])] = shuffled[j];
  }
  return perm;
}

FeatureBatchData apply_permutation(const FeatureBatchData& data,
                                   const std::vector<Index>& perm) {
  FeatureBatchData out;
  const std::size_t q = data.batches.size();
  out.batches.resize(q);
  out.batch_missing.resize(q);
  out.observed.resize(q);
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t src = static_cast<std::size_t>(perm[i]);
    out.batches[i] = data.batches[src];
    out.batch_missing[i] = data.batch_missing[src];
    out.observed[i] = data.observed[src];
  }
  return out;
}

struct PermutationCounts {
  std::vector<std::atomic<long>> exceed;
  std::atomic<int> completed{0};
  std::atomic<int> failed{0};

  explicit PermutationCounts(std::size_t n) : exceed(n) {
    for (auto& e : exceed) e.store(0);
  }
};

}  // namespace

std::vector<double> wald_statistics(const FitResult& fit,
                                    const std::vector<int>& tested) {
  std::vector<double> z;
  z.reserve(tested.size());
  for (int idx : tested) {
    if (idx < 0 || idx >= fit.params.alpha.size())
      throw_error(ErrorCode::invalid_argument, "tested index out of range");
    const double var = fit.alpha_cov(idx, idx);
    if (!(var > 0.0))
      throw_error(ErrorCode::numeric_error,
                  "zero variance for tested coefficient");
    z.push_back(fit.params.alpha[idx] / std::sqrt(var));
  }
  return z;
}

TestResult permutation_test(const FeatureBatchData& data,
                            const std::vector<BatchDesign>& designs,
                            const MissingMechanism& mech,
                            const FitConfig& config,
                            const std::vector<int>& tested, int n_permutations,
                            std::uint64_t seed, int threads) {
  if (n_permutations < 1)
    throw_error(ErrorCode::invalid_argument, "need at least one permutation");
  if (designs.size() < 2)
    throw_error(ErrorCode::invalid_argument, "need at least two batches");
  if (tested.empty())
    throw_error(ErrorCode::invalid_argument, "no coefficients to test");

  const FitResult obs_fit = fit(data, designs, mech, config);
  const std::vector<double> z_obs = wald_statistics(obs_fit, tested);

  TestResult res;
  res.b_requested = n_permutations;
  res.seed = seed;
  res.coefficients.resize(tested.size());
  for (std::size_t j = 0; j < tested.size(); ++j) {
    auto& c = res.coefficients[j];
    c.index = tested[j];
    c.estimate = obs_fit.params.alpha[tested[j]];
    c.se = std::sqrt(obs_fit.alpha_cov(tested[j], tested[j]));
    c.z = z_obs[j];
  }

  const auto strata = size_strata(designs);
  Rng master(seed);
  std::vector<std::vector<Index>> perms;
  perms.reserve(static_cast<std::size_t>(n_permutations));
  for (int b = 0; b < n_permutations; ++b)
    perms.push_back(draw_permutation(strata, data.batches.size(), master));

  PermutationCounts counts(tested.size());
  FitConfig perm_config = config;
  perm_config.monitor_likelihood = false;

  parallel_for(
      static_cast<std::size_t>(n_permutations), threads,
      [&](std::size_t b) {
        try {
          const FeatureBatchData shuffled = apply_permutation(data, perms[b]);
          const FitResult f = fit(shuffled, designs, mech, perm_config,
                                  &obs_fit.params);
          const std::vector<double> z_perm = wald_statistics(f, tested);
          for (std::size_t j = 0; j < tested.size(); ++j)
            if (std::abs(z_perm[j]) >= std::abs(z_obs[j]))
              counts.exceed[j].fetch_add(1);
          counts.completed.fetch_add(1);
        } catch (const std::exception&) {
          counts.failed.fetch_add(1);
        }
      });

  res.b_completed = counts.completed.load();
  res.b_failed = counts.failed.load();
  res.reliable =
      res.b_failed <= static_cast<int>(0.05 * n_permutations);
  for (std::size_t j = 0; j < tested.size(); ++j)
    res.coefficients[j].p_perm =
        (1.0 + static_cast<double>(counts.exceed[j].load())) /
        (static_cast<double>(res.b_completed) + 1.0);
  return res;
}

namespace {

struct BaselineRegression {
  Matrix x;
  Vector y;
};

// Stacks relative abundances (target minus reference) over observed batches
// with an observed reference row; the covariates come from the design rows
// of the target samples.
BaselineRegression baseline_rows(const FeatureBatchData& data,
                                 const std::vector<BatchDesign>& designs,
                                 const std::vector<int>& covariate_cols) {
  std::vector<double> ys;
  std::vector<std::vector<double>> xs;
  for (std::size_t i = 0; i < designs.size(); ++i) {
    if (data.batch_missing[i]) continue;
    const BatchDesign& d = designs[i];
    if (!d.reference_channel) continue;
    const Index ref = *d.reference_channel;
    if (!data.observed[i][static_cast<std::size_t>(ref)]) continue;
    const double y_ref = data.batches[i][ref];
    for (Index j = 0; j < d.batch_size(); ++j) {
      if (j == ref || !data.observed[i][static_cast<std::size_t>(j)]) continue;
      ys.push_back(data.batches[i][j] - y_ref);
      std::vector<double> row{1.0};
      for (int c : covariate_cols) row.push_back(d.x(j, c));
      xs.push_back(std::move(row));
    }
  }
  BaselineRegression reg;
  reg.y.resize(static_cast<Index>(ys.size()));
  if (!ys.empty()) {
    reg.x.resize(static_cast<Index>(xs.size()),
                 static_cast<Index>(xs[0].size()));
    for (std::size_t r = 0; r < xs.size(); ++r) {
      reg.y[static_cast<Index>(r)] = ys[r];
      for (std::size_t c = 0; c < xs[r].size(); ++c)
        reg.x(static_cast<Index>(r), static_cast<Index>(c)) = xs[r][c];
    }
  }
  return reg;
}

struct OlsFit {
  Vector beta;
  Vector se;
};

OlsFit ols(const BaselineRegression& reg) {
  const Index n = reg.y.size();
  const Index k = reg.x.cols();
  if (n <= k)
    throw_error(ErrorCode::estimation_error,
                "not enough relative-abundance rows for the baseline");
  const Matrix xtx = reg.x.transpose() * reg.x;
  Eigen::FullPivLU<Matrix> lu(xtx);
  lu.setThreshold(1e-10);
  if (lu.rank() < k)
    throw_error(ErrorCode::singular_design, "baseline design is singular");
  OlsFit f;
  f.beta = lu.solve(reg.x.transpose() * reg.y);
  const double rss = (reg.y - reg.x * f.beta).squaredNorm();
  const double s2 = rss / static_cast<double>(n - k);
  const Matrix cov = s2 * lu.inverse();
  f.se.resize(k);
  for (Index j = 0; j < k; ++j) f.se[j] = std::sqrt(cov(j, j));
  return f;
}

}  // namespace

TestResult relative_abundance_baseline(const FeatureBatchData& data,
                                       const std::vector<BatchDesign>& designs,
                                       const std::vector<int>& covariate_cols,
                                       const std::vector<int>& tested_cols,
                                       int n_permutations, std::uint64_t seed,
                                       int threads) {
  if (n_permutations < 1)
    throw_error(ErrorCode::invalid_argument, "need at least one permutation");
  bool any_ref = false;
  for (std::size_t i = 0; i < designs.size(); ++i) {
    if (data.batch_missing[i] || !designs[i].reference_channel) continue;
    if (data.observed[i][static_cast<std::size_t>(
            *designs[i].reference_channel)])
      any_ref = true;
  }
  if (!any_ref)
    throw_error(ErrorCode::estimation_error,
                "no batch has an observed reference channel");

  std::vector<std::size_t> tested_pos;
  for (int t : tested_cols) {
    const auto it =
        std::find(covariate_cols.begin(), covariate_cols.end(), t);
    if (it == covariate_cols.end())
      throw_error(ErrorCode::invalid_argument,
                  "tested column is not part of the baseline regression");
    tested_pos.push_back(
        1 + static_cast<std::size_t>(it - covariate_cols.begin()));
  }

  const BaselineRegression obs_reg =
      baseline_rows(data, designs, covariate_cols);
  const OlsFit obs = ols(obs_reg);

  // a zero coefficient with an exactly zero residual is reported as z = 0
  auto z_of = [](double est, double se) {
    if (se > 0.0) return est / se;
    if (est == 0.0) return 0.0;
    throw_error(ErrorCode::numeric_error,
                "zero variance for tested coefficient");
  };

  TestResult res;
  res.b_requested = n_permutations;
  res.seed = seed;
  res.coefficients.resize(tested_cols.size());
  std::vector<double> z_obs(tested_cols.size());
  for (std::size_t j = 0; j < tested_cols.size(); ++j) {
    const Index pos = static_cast<Index>(tested_pos[j]);
    auto& c = res.coefficients[j];
    c.index = tested_cols[j];
    c.estimate = obs.beta[pos];
    c.se = obs.se[pos];
    c.z = z_of(c.estimate, c.se);
    z_obs[j] = c.z;
  }

  const auto strata = size_strata(designs);
  Rng master(seed);
  std::vector<std::vector<Index>> perms;
  perms.reserve(static_cast<std::size_t>(n_permutations));
  for (int b = 0; b < n_permutations; ++b)
    perms.push_back(draw_permutation(strata, data.batches.size(), master));

  PermutationCounts counts(tested_cols.size());
  parallel_for(
      static_cast<std::size_t>(n_permutations), threads,
      [&](std::size_t b) {
        try {
          const FeatureBatchData shuffled = apply_permutation(data, perms[b]);
          const OlsFit f =
              ols(baseline_rows(shuffled, designs, covariate_cols));
          for (std::size_t j = 0; j < tested_cols.size(); ++j) {
            const Index pos = static_cast<Index>(tested_pos[j]);
            const double z = z_of(f.beta[pos], f.se[pos]);
            if (std::abs(z) >= std::abs(z_obs[j]))
              counts.exceed[j].fetch_add(1);
          }
          counts.completed.fetch_add(1);
        } catch (const std::exception&) {
          counts.failed.fetch_add(1);
        }
      });

  res.b_completed = counts.completed.load();
  res.b_failed = counts.failed.load();
  res.reliable = res.b_failed <= static_cast<int>(0.05 * n_permutations);
  for (std::size_t j = 0; j < tested_cols.size(); ++j)
    res.coefficients[j].p_perm =
        (1.0 + static_cast<double>(counts.exceed[j].load())) /
        (static_cast<double>(res.b_completed) + 1.0);
  return res;
}

}  // namespace bamm
