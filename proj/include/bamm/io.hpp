#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bamm/ecm.hpp"
#include "bamm/inference.hpp"
#include "bamm/mechanism.hpp"
#include "bamm/simulation.hpp"
#include "bamm/types.hpp"

namespace bamm {

struct StudyConfig {
  MissingMechanism::Form mechanism_form = MissingMechanism::Form::exponential;
  enum class GammaSource { fixed, estimated, profiled };
  GammaSource gamma_source = GammaSource::estimated;
  double gamma0 = 0.0;
  double gamma = 0.0;
  // gamma grid for the profiled source, at fixed gamma0
  double profile_lo = 0.0;
  double profile_hi = 0.0;
  double profile_step = 0.0;
  int n_permutations = 999;
  std::uint64_t seed = 1;
  int max_iter = 500;
  double tol = 1e-8;
  int threads = 0;
  double min_ref_obs_frac = 0.7;
};

struct StudyInput {
  std::string abundance_path;
  std::string batch_map_path;
  std::string covariates_path;  // optional, empty for none
  StudyConfig config;
};

struct SampleInfo {
  std::string id;
  int batch = 0;  // index into designs
  int row = 0;    // row within the batch
  bool is_reference = false;
};

struct Study {
  std::vector<SampleInfo> samples;  // abundance column order
  std::vector<std::string> batch_ids;
  std::vector<BatchDesign> designs;
  std::vector<std::string> covariate_names;  // design columns beyond [1, ref]

  std::vector<std::string> feature_ids;
  std::vector<FeatureBatchData> features;

  std::vector<std::string> filtered_ids;  // dropped by the reference filter
  std::vector<std::pair<std::string, std::string>> rejected;  // id, reason
};

// Reads the three TSV inputs and assembles the batch structure. Cells equal
// to "" or "NA" are missing; a batch is missing for a feature iff all of its
// channels are. Features whose reference channel is observed in fewer than
// min_ref_obs_frac of the batches are filtered out.
Study ingest(const StudyInput& input);

struct FeatureResult {
  std::string id;
  int q_obs = 0;
  double missing_fraction = 0.0;
  bool converged = false;
  int n_iter = 0;
  Vector alpha, se, z, p_perm;
  bool reliable = true;
  unsigned clamp_warnings = 0;
  std::string error;  // nonempty = feature failed

  bool ok() const { return error.empty(); }
};

struct ProfileSummary {
  double gamma = 0.0;
  double total_loglik = 0.0;
  int n_features = 0;
  bool best = false;
};

struct StudyResult {
  MissingMechanism mechanism;  // mechanism used for every fit
  bool gamma_estimated = false;
  GammaEstimate gamma_fit;  // meaningful when estimated or profiled
  std::vector<ProfileSummary> profile;
  std::vector<FeatureResult> features;
  DiagnosticTable diagnostic;
  double bonferroni_threshold = 0.0;
};

StudyResult run_study(const Study& study, const StudyConfig& config);

void write_study_outputs(const Study& study, const StudyResult& result,
                         const std::string& out_dir);

// ingest + run + write; returns the result for further inspection.
StudyResult run_study_files(const StudyInput& input,
                            const std::string& out_dir);

// ---- simulated studies on disk ----

// Study with shared designs and n_features independent features drawn from
// the scenario law. Deterministic in sc.seed.
Study generate_study(const Scenario& sc, int n_features);

// Writes abundance.tsv, batch_map.tsv and covariates.tsv for a study.
void write_study_inputs(const Study& study, const std::string& out_dir);

// ---- scenario files (flat key=value) ----

Scenario load_scenario(const std::string& path);
void save_scenario(const Scenario& sc, const std::string& path);

// ---- table serialization ----

void write_power_study(const std::vector<PowerStudyRow>& rows, const std::string& path);
void write_mse_study(const std::vector<MseStudyRow>& rows, const std::string& path);
void write_mechanism_study(const std::vector<MechanismStudyRow>& rows, const std::string& path);

// Full round-trip formatting of doubles (17 significant digits).
std::string format_full(double v);

}  // namespace bamm
