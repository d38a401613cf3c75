#pragma once

#include <cstdint>
#include <vector>

#include "bamm/ecm.hpp"
#include "bamm/types.hpp"

namespace bamm {

struct TestedCoefficient {
  int index = 0;  // column index in the fixed-effect design
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p_perm = 1.0;
};

struct TestResult {
  std::vector<TestedCoefficient> coefficients;
  int b_requested = 0;
  int b_completed = 0;
  int b_failed = 0;
  std::uint64_t seed = 0;
  bool reliable = true;  // false when > 5% of permutation refits failed
};

// z_i = alpha_i / sqrt(alpha_cov[i,i]).
std::vector<double> wald_statistics(const FitResult& fit,
                                    const std::vector<int>& tested);

// Permutes whole response batches (values, missing flags and sporadic masks
// travel together) against the fixed batch-to-design assignment, refits and
// recomputes |z|. Permutations are restricted to batches of equal size so
// the response/design pairing stays well formed. Two-sided add-one p-value.
// The mechanism is held fixed across permutations.
TestResult permutation_test(const FeatureBatchData& data,
                            const std::vector<BatchDesign>& designs,
                            const MissingMechanism& mech,
                            const FitConfig& config,
                            const std::vector<int>& tested, int n_permutations,
                            std::uint64_t seed, int threads = 1);

// Conventional analysis: per-sample relative abundance (target minus
// reference, log scale) within each observed batch that has an observed
// reference, pooled OLS on [intercept, covariate_cols], calibrated by the
// same batch permutation scheme. Batches without an observed reference are
// dropped.
TestResult relative_abundance_baseline(const FeatureBatchData& data,
                                       const std::vector<BatchDesign>& designs,
                                       const std::vector<int>& covariate_cols,
                                       const std::vector<int>& tested_cols,
                                       int n_permutations, std::uint64_t seed,
                                       int threads = 1);

}  // namespace bamm
