#include "bamm/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bamm/parallel.hpp"
#include "bamm/rng.hpp"

namespace bamm {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw_error(ErrorCode::io_error, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.empty())
    throw_error(ErrorCode::parse_error, path + ": empty file");
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan";
}

double parse_number(const std::string& s, const std::string& path,
                    std::size_t row, std::size_t col) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') {
    std::ostringstream os;
    os << path << ": non-numeric cell '" << s << "' at row " << row + 1
       << ", column " << col + 1;
    throw_error(ErrorCode::parse_error, os.str());
  }
  return v;
}

long parse_integer(const std::string& s, const std::string& path,
                   std::size_t row, std::size_t col) {
  const double v = parse_number(s, path, row, col);
  const long i = std::lround(v);
  if (static_cast<double>(i) != v) {
    std::ostringstream os;
    os << path << ": expected integer at row " << row + 1 << ", column "
       << col + 1;
    throw_error(ErrorCode::parse_error, os.str());
  }
  return i;
}

}  // namespace

std::string format_full(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string format_pvalue(double v) {
  if (std::isnan(v)) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6e", v);
  return buf;
}

struct BatchMapEntry {
  std::string batch_id;
  long channel = 0;
  bool is_reference = false;
};

}  // namespace

Study ingest(const StudyInput& input) {
  Study study;

  // --- batch map ---
  const auto map_lines = read_lines(input.batch_map_path);
  const auto map_header = split_tabs(map_lines[0]);
  auto col_of = [&](const std::string& name) {
    for (std::size_t c = 0; c < map_header.size(); ++c)
      if (map_header[c] == name) return c;
    throw_error(ErrorCode::parse_error,
                input.batch_map_path + ": missing column '" + name + "'");
  };
  const std::size_t c_sample = col_of("sample_id");
  const std::size_t c_batch = col_of("batch_id");
  const std::size_t c_channel = col_of("channel");
  const std::size_t c_ref = col_of("is_reference");

  std::map<std::string, BatchMapEntry> sample_map;
  for (std::size_t r = 1; r < map_lines.size(); ++r) {
    if (map_lines[r].empty()) continue;
    const auto cells = split_tabs(map_lines[r]);
    if (cells.size() != map_header.size())
      throw_error(ErrorCode::parse_error,
                  input.batch_map_path + ": wrong cell count at row " +
                      std::to_string(r + 1));
    BatchMapEntry e;
    e.batch_id = cells[c_batch];
    e.channel = parse_integer(cells[c_channel], input.batch_map_path, r,
                              c_channel);
    const long rf =
        parse_integer(cells[c_ref], input.batch_map_path, r, c_ref);
    if (rf != 0 && rf != 1)
      throw_error(ErrorCode::parse_error,
                  input.batch_map_path + ": is_reference must be 0 or 1 at "
                  "row " + std::to_string(r + 1));
    e.is_reference = rf == 1;
    if (!sample_map.emplace(cells[c_sample], e).second)
      throw_error(ErrorCode::parse_error,
                  input.batch_map_path + ": duplicate sample_id '" +
                      cells[c_sample] + "'");
  }

  // --- covariates (optional) ---
  std::map<std::string, std::vector<double>> covariates;
  if (!input.covariates_path.empty()) {
    const auto cov_lines = read_lines(input.covariates_path);
    const auto cov_header = split_tabs(cov_lines[0]);
    if (cov_header.empty() || cov_header[0] != "sample_id")
      throw_error(ErrorCode::parse_error,
                  input.covariates_path + ": first column must be sample_id");
    for (std::size_t c = 1; c < cov_header.size(); ++c)
      study.covariate_names.push_back(cov_header[c]);
    for (std::size_t r = 1; r < cov_lines.size(); ++r) {
      if (cov_lines[r].empty()) continue;
      const auto cells = split_tabs(cov_lines[r]);
      if (cells.size() != cov_header.size())
        throw_error(ErrorCode::parse_error,
                    input.covariates_path + ": wrong cell count at row " +
                        std::to_string(r + 1));
      std::vector<double> values;
      for (std::size_t c = 1; c < cells.size(); ++c)
        values.push_back(
            parse_number(cells[c], input.covariates_path, r, c));
      covariates[cells[0]] = std::move(values);
    }
  }

  // --- abundance header defines the sample order ---
  const auto ab_lines = read_lines(input.abundance_path);
  const auto ab_header = split_tabs(ab_lines[0]);
  if (ab_header.size() < 2)
    throw_error(ErrorCode::parse_error,
                input.abundance_path + ": no sample columns");

  // batches sorted by id, channels sorted within each batch
  std::map<std::string, std::vector<std::pair<long, std::string>>> batches;
  for (std::size_t c = 1; c < ab_header.size(); ++c) {
    const auto it = sample_map.find(ab_header[c]);
    if (it == sample_map.end())
      throw_error(ErrorCode::parse_error,
                  input.abundance_path + ": unknown sample id '" +
                      ab_header[c] + "' (column " + std::to_string(c + 1) +
                      ")");
    batches[it->second.batch_id].emplace_back(it->second.channel,
                                              ab_header[c]);
  }
  if (batches.size() < 2)
    throw_error(ErrorCode::parse_error, "need at least two batches");

  std::map<std::string, std::pair<int, int>> placement;  // sample -> (batch,row)
  const std::size_t n_user_cols = study.covariate_names.size();
  for (auto& [batch_id, members] : batches) {
    std::sort(members.begin(), members.end());
    for (std::size_t j = 1; j < members.size(); ++j)
      if (members[j].first == members[j - 1].first)
        throw_error(ErrorCode::parse_error,
                    "batch '" + batch_id + "' has duplicate channel " +
                        std::to_string(members[j].first));
    const int b = static_cast<int>(study.batch_ids.size());
    study.batch_ids.push_back(batch_id);
    BatchDesign d;
    const Index p = static_cast<Index>(members.size());
    d.x = Matrix::Zero(p, static_cast<Index>(2 + n_user_cols));
    d.x.col(0).setOnes();
    d.z = Matrix::Ones(p, 1);
    for (Index row = 0; row < p; ++row) {
      const std::string& sid = members[static_cast<std::size_t>(row)].second;
      const BatchMapEntry& e = sample_map.at(sid);
      if (e.is_reference) {
        if (d.reference_channel)
          throw_error(ErrorCode::parse_error,
                      "batch '" + batch_id + "' has multiple reference "
                      "channels");
        d.reference_channel = row;
        d.x(row, 1) = 1.0;
      }
      if (n_user_cols > 0) {
        const auto cov_it = covariates.find(sid);
        if (cov_it == covariates.end())
          throw_error(ErrorCode::parse_error,
                      input.covariates_path + ": no covariates for sample '" +
                          sid + "'");
        for (std::size_t c = 0; c < n_user_cols; ++c)
          d.x(row, static_cast<Index>(2 + c)) = cov_it->second[c];
      }
      placement[sid] = {b, static_cast<int>(row)};
    }
    study.designs.push_back(std::move(d));
  }

  for (std::size_t c = 1; c < ab_header.size(); ++c) {
    const auto& [b, row] = placement.at(ab_header[c]);
    SampleInfo info;
    info.id = ab_header[c];
    info.batch = b;
    info.row = row;
    info.is_reference =
        study.designs[static_cast<std::size_t>(b)].reference_channel ==
        static_cast<Index>(row);
    study.samples.push_back(std::move(info));
  }

  // --- feature rows ---
  const std::size_t q = study.designs.size();
  long n_ref_batches = 0;
  for (const auto& d : study.designs)
    if (d.reference_channel) ++n_ref_batches;

  std::set<std::string> seen_ids;
  for (std::size_t r = 1; r < ab_lines.size(); ++r) {
    if (ab_lines[r].empty()) continue;
    const auto cells = split_tabs(ab_lines[r]);
    if (cells.size() != ab_header.size())
      throw_error(ErrorCode::parse_error,
                  input.abundance_path + ": wrong cell count at row " +
                      std::to_string(r + 1));
    const std::string& id = cells[0];
    if (!seen_ids.insert(id).second)
      throw_error(ErrorCode::parse_error,
                  input.abundance_path + ": duplicate feature id '" + id +
                      "'");
    FeatureBatchData feature;
    feature.batches.reserve(q);
    for (std::size_t b = 0; b < q; ++b) {
      feature.batches.emplace_back(Vector::Constant(
          study.designs[b].batch_size(),
          std::numeric_limits<double>::quiet_NaN()));
      feature.observed.emplace_back(
          static_cast<std::size_t>(study.designs[b].batch_size()), false);
    }
    for (std::size_t c = 1; c < cells.size(); ++c) {
      if (is_missing_token(cells[c])) continue;
      const double v = parse_number(cells[c], input.abundance_path, r, c);
      const SampleInfo& s = study.samples[c - 1];
      feature.batches[static_cast<std::size_t>(s.batch)][s.row] = v;
      feature.observed[static_cast<std::size_t>(s.batch)]
                      [static_cast<std::size_t>(s.row)] = true;
    }
    long ref_observed = 0;
    for (std::size_t b = 0; b < q; ++b) {
      bool any = false;
      for (bool o : feature.observed[b]) any = any || o;
      feature.batch_missing.push_back(!any);
      const auto& ref = study.designs[b].reference_channel;
      if (any && ref &&
          feature.observed[b][static_cast<std::size_t>(*ref)])
        ++ref_observed;
    }
    if (feature.n_observed_batches() == 0) {
      study.rejected.emplace_back(id, "no observed batches");
      continue;
    }
    // retained when the reference is observed in at least
    // round(frac * batches) batches, matching the "25 (70%) of 36" reading
    const long ref_needed =
        std::lround(input.config.min_ref_obs_frac *
                    static_cast<double>(n_ref_batches));
    if (n_ref_batches > 0 && ref_observed < ref_needed) {
      study.filtered_ids.push_back(id);
      continue;
    }
    const ValidationReport report = validate_dataset(feature, study.designs);
    if (!report.accepted()) {
      study.rejected.emplace_back(id, report.first_fatal());
      continue;
    }
    study.feature_ids.push_back(id);
    study.features.push_back(std::move(feature));
  }
  return study;
}

namespace {

struct FeatureSummary {
  std::string id;
  double t = 0.0;
  double pi = 0.0;
};

std::vector<MechanismFitInput> mechanism_inputs(const Study& study) {
  std::vector<MechanismFitInput> inputs;
  inputs.reserve(study.features.size());
  for (std::size_t f = 0; f < study.features.size(); ++f) {
    const FeatureBatchData& data = study.features[f];
    double sum = 0.0;
    long n = 0;
    for (std::size_t b = 0; b < data.batches.size(); ++b)
      for (Index j = 0; j < data.batches[b].size(); ++j)
        if (data.observed[b][static_cast<std::size_t>(j)]) {
          sum += data.batches[b][j];
          ++n;
        }
    MechanismFitInput in;
    in.id = study.feature_ids[f];
    in.t = n > 0 ? sum / static_cast<double>(n) : 0.0;
    in.pi = data.missing_fraction();
    inputs.push_back(std::move(in));
  }
  // order independence of the pooled regression
  std::sort(inputs.begin(), inputs.end(),
            [](const MechanismFitInput& a, const MechanismFitInput& b) {
              return a.id < b.id;
            });
  return inputs;
}

}  // namespace

StudyResult run_study(const Study& study, const StudyConfig& config) {
  if (study.features.empty())
    throw_error(ErrorCode::invalid_argument, "no features to analyze");

  StudyResult result;
  const auto inputs = mechanism_inputs(study);

  MissingMechanism mech;
  mech.form = config.mechanism_form;
  std::optional<GammaEstimate> diag_fit;

  FitConfig fit_config;
  fit_config.max_iter = config.max_iter;
  fit_config.tol = config.tol;

  switch (config.gamma_source) {
    case StudyConfig::GammaSource::fixed:
      mech.gamma0 = config.gamma0;
      mech.gamma = config.gamma;
      break;
    case StudyConfig::GammaSource::estimated: {
      const GammaEstimate est =
          mech.form == MissingMechanism::Form::exponential
              ? estimate_gamma(inputs)
              : estimate_gamma_logit(inputs);
      result.gamma_estimated = true;
      result.gamma_fit = est;
      mech.gamma0 = est.gamma0;
      mech.gamma = est.gamma;
      break;
    }
    case StudyConfig::GammaSource::profiled: {
      if (!(config.profile_step > 0.0) || config.profile_hi < config.profile_lo)
        throw_error(ErrorCode::invalid_argument, "invalid profile grid");
      std::vector<double> grid;
      for (double g = config.profile_lo; g <= config.profile_hi + 1e-12;
           g += config.profile_step)
        grid.push_back(g);
      // features contributing to every grid point keep the profile comparable
      std::vector<std::vector<double>> ll(
          grid.size(), std::vector<double>(study.features.size(),
                                           std::numeric_limits<double>::quiet_NaN()));
      for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        MissingMechanism m = mech;
        m.gamma0 = config.gamma0;
        m.gamma = grid[gi];
        parallel_for(study.features.size(), config.threads, [&](std::size_t f) {
          try {
            const FitResult fr =
                fit(study.features[f], study.designs, m, fit_config);
            ll[gi][f] = observed_data_loglik(fr.params, study.designs,
                                             study.features[f], &m);
          } catch (const Error& e) {
            // a mechanism that cannot have produced the observed batches
            // has likelihood zero at this grid point, not a failure
            if (e.code() == ErrorCode::inconsistent_mechanism)
              ll[gi][f] = -std::numeric_limits<double>::infinity();
          } catch (const std::exception&) {
          }
        });
      }
      int best = -1;
      for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        ProfileSummary ps;
        ps.gamma = grid[gi];
        for (std::size_t f = 0; f < study.features.size(); ++f) {
          bool everywhere = true;
          for (std::size_t gj = 0; gj < grid.size(); ++gj)
            everywhere = everywhere && !std::isnan(ll[gj][f]);
          if (everywhere) {
            ps.total_loglik += ll[gi][f];
            ++ps.n_features;
          }
        }
        result.profile.push_back(ps);
        if (best < 0 || ps.total_loglik >
                            result.profile[static_cast<std::size_t>(best)]
                                .total_loglik)
          best = static_cast<int>(gi);
      }
      if (best < 0)
        throw_error(ErrorCode::estimation_error,
                    "profile likelihood failed on every grid point");
      result.profile[static_cast<std::size_t>(best)].best = true;
      mech.gamma0 = config.gamma0;
      mech.gamma = result.profile[static_cast<std::size_t>(best)].gamma;
      result.gamma_fit.gamma0 = mech.gamma0;
      result.gamma_fit.gamma = mech.gamma;
      break;
    }
  }
  result.mechanism = mech;

  // diagnostic table uses the exponential available-case fit when possible
  if (mech.form == MissingMechanism::Form::exponential &&
      config.gamma_source != StudyConfig::GammaSource::fixed) {
    diag_fit = result.gamma_fit;
  } else {
    try {
      diag_fit = estimate_gamma(inputs);
    } catch (const std::exception&) {
      diag_fit = std::nullopt;
    }
  }
  result.diagnostic = badmm_diagnostic(inputs, diag_fit);
  result.bonferroni_threshold =
      0.05 / static_cast<double>(study.features.size());

  result.features.resize(study.features.size());
  const Index k = study.designs.front().n_fixed();
  std::vector<int> tested;
  for (Index c = 1; c < k; ++c) tested.push_back(static_cast<int>(c));

  parallel_for(study.features.size(), config.threads, [&](std::size_t f) {
    FeatureResult& out = result.features[f];
    out.id = study.feature_ids[f];
    const FeatureBatchData& data = study.features[f];
    out.q_obs = static_cast<int>(data.n_observed_batches());
    out.missing_fraction = data.missing_fraction();
    out.alpha = Vector::Constant(k, std::numeric_limits<double>::quiet_NaN());
    out.se = out.alpha;
    out.z = out.alpha;
    out.p_perm = out.alpha;
    try {
      const FitResult fr = fit(data, study.designs, mech, fit_config);
      out.converged = fr.converged;
      out.n_iter = fr.n_iter;
      out.clamp_warnings = fr.clamp_warnings;
      out.alpha = fr.params.alpha;
      for (Index c = 0; c < k; ++c) {
        const double var = fr.alpha_cov(c, c);
        out.se[c] = var > 0.0 ? std::sqrt(var)
                              : std::numeric_limits<double>::quiet_NaN();
        out.z[c] = out.alpha[c] / out.se[c];
      }
      if (config.n_permutations > 0 && !tested.empty()) {
        const std::uint64_t seed =
            Rng::mix(config.seed, Rng::hash_string(out.id));
        const TestResult tr =
            permutation_test(data, study.designs, mech, fit_config, tested,
                             config.n_permutations, seed);
        out.reliable = tr.reliable;
        for (std::size_t j = 0; j < tested.size(); ++j)
          out.p_perm[tested[j]] = tr.coefficients[j].p_perm;
      }
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });
  return result;
}

namespace {

std::vector<std::string> design_column_names(const Study& study) {
  std::vector<std::string> names{"intercept", "is_reference"};
  for (const auto& n : study.covariate_names) names.push_back(n);
  return names;
}

void write_file(const std::string& path, const std::string& content) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw_error(ErrorCode::io_error, "cannot write " + path);
  out << content;
  if (!out) throw_error(ErrorCode::io_error, "failed writing " + path);
}

}  // namespace

void write_study_outputs(const Study& study, const StudyResult& result,
                         const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto names = design_column_names(study);

  {  // results.tsv
    std::ostringstream os;
    os << "feature_id\tq_obs\tmissing_fraction\tconverged\tn_iter";
    for (const auto& n : names)
      os << "\talpha_" << n << "\tse_" << n << "\tz_" << n << "\tp_" << n;
    os << "\treliable\tclamp_warnings\terror\n";
    for (const auto& f : result.features) {
      os << f.id << '\t' << f.q_obs << '\t' << format_full(f.missing_fraction)
         << '\t' << (f.converged ? 1 : 0) << '\t' << f.n_iter;
      for (Index c = 0; c < f.alpha.size(); ++c) {
        os << '\t' << format_full(f.alpha[c]) << '\t' << format_full(f.se[c])
           << '\t' << format_full(f.z[c]) << '\t'
           << format_pvalue(f.p_perm[c]);
      }
      os << '\t' << (f.reliable ? 1 : 0) << '\t' << f.clamp_warnings << '\t'
         << f.error << '\n';
    }
    write_file(out_dir + "/results.tsv", os.str());
  }
  {  // diagnostic tables
    std::ostringstream os;
    os << "feature_id\tt\tpi\tfitted_pi\n";
    for (const auto& row : result.diagnostic.rows)
      os << row.id << '\t' << format_full(row.t) << '\t' << format_full(row.pi)
         << '\t' << format_full(row.fitted) << '\n';
    write_file(out_dir + "/diagnostic.tsv", os.str());

    std::ostringstream ob;
    ob << "pi\tmedian_t\tn_features\tfitted_pi\n";
    for (const auto& bin : result.diagnostic.bins)
      ob << format_full(bin.pi) << '\t' << format_full(bin.median_t) << '\t'
         << bin.n << '\t' << format_full(bin.fitted) << '\n';
    write_file(out_dir + "/diagnostic_binned.tsv", ob.str());
  }
  if (!result.profile.empty()) {
    std::ostringstream os;
    os << "gamma\ttotal_loglik\tn_features\tbest\n";
    for (const auto& p : result.profile)
      os << format_full(p.gamma) << '\t' << format_full(p.total_loglik)
         << '\t' << p.n_features << '\t' << (p.best ? 1 : 0) << '\n';
    write_file(out_dir + "/profile.tsv", os.str());
  }
  {  // errors / filtered
    std::ostringstream os;
    os << "feature_id\treason\n";
    for (const auto& [id, reason] : study.rejected)
      os << id << '\t' << reason << '\n';
    for (const auto& f : result.features)
      if (!f.ok()) os << f.id << '\t' << f.error << '\n';
    write_file(out_dir + "/errors.tsv", os.str());

    std::ostringstream of;
    of << "feature_id\n";
    for (const auto& id : study.filtered_ids) of << id << '\n';
    write_file(out_dir + "/filtered.tsv", of.str());
  }
  {  // summary
    std::ostringstream os;
    long n_sig = 0, n_failed = 0, n_unconverged = 0;
    for (const auto& f : result.features) {
      if (!f.ok()) {
        ++n_failed;
        continue;
      }
      if (!f.converged) ++n_unconverged;
      for (Index c = 1; c < f.p_perm.size(); ++c)
        if (!std::isnan(f.p_perm[c]) &&
            f.p_perm[c] <= result.bonferroni_threshold)
          ++n_sig;
    }
    os << "features_analyzed\t" << result.features.size() << '\n'
       << "features_filtered\t" << study.filtered_ids.size() << '\n'
       << "features_rejected\t" << study.rejected.size() << '\n'
       << "features_failed\t" << n_failed << '\n'
       << "features_not_converged\t" << n_unconverged << '\n'
       << "mechanism\t"
       << (result.mechanism.form == MissingMechanism::Form::exponential
               ? "exponential"
               : "logit")
       << '\n'
       << "gamma0\t" << format_full(result.mechanism.gamma0) << '\n'
       << "gamma\t" << format_full(result.mechanism.gamma) << '\n';
    if (result.gamma_estimated)
      os << "gamma_excluded_features\t" << result.gamma_fit.n_excluded << '\n'
         << "gamma_used_features\t" << result.gamma_fit.n_used << '\n';
    os << "bonferroni_threshold\t"
       << format_full(result.bonferroni_threshold) << '\n'
       << "significant_tests_bonferroni\t" << n_sig << '\n';
    write_file(out_dir + "/summary.txt", os.str());
  }
}

StudyResult run_study_files(const StudyInput& input,
                            const std::string& out_dir) {
  const Study study = ingest(input);
  StudyResult result = run_study(study, input.config);
  write_study_outputs(study, result, out_dir);
  return result;
}

// ---- simulated studies ----

Study generate_study(const Scenario& sc, int n_features) {
  sc.validate();
  Study study;
  Rng design_rng(Rng::mix(sc.seed, 0xde516eULL));

  // shared designs: one realization of the scenario's design law
  std::vector<double> groups;
  {
    Rng g = design_rng.child(1);
    const std::size_t n_targets = static_cast<std::size_t>(sc.q) *
                                  static_cast<std::size_t>(sc.p - 1);
    groups.assign(n_targets, 0.0);
    switch (sc.group) {
      case Scenario::GroupAssignment::balanced:
        for (std::size_t i = 0; i < n_targets / 2; ++i) groups[i] = 1.0;
        g.shuffle(groups.data(), groups.size());
        break;
      case Scenario::GroupAssignment::bernoulli:
        for (auto& v : groups) v = g.uniform() < 0.5 ? 1.0 : 0.0;
        break;
      case Scenario::GroupAssignment::batch: {
        std::vector<double> pb(static_cast<std::size_t>(sc.q), 0.0);
        for (std::size_t i = 0; i < pb.size() / 2; ++i) pb[i] = 1.0;
        g.shuffle(pb.data(), pb.size());
        for (int i = 0; i < sc.q; ++i)
          for (int j = 0; j < sc.p - 1; ++j)
            groups[static_cast<std::size_t>(i * (sc.p - 1) + j)] =
                pb[static_cast<std::size_t>(i)];
        break;
      }
    }
  }
  study.covariate_names = {"group"};
  char buf[64];
  for (int i = 0; i < sc.q; ++i) {
    std::snprintf(buf, sizeof(buf), "b%03d", i + 1);
    study.batch_ids.emplace_back(buf);
    BatchDesign d;
    d.x = Matrix::Zero(sc.p, 3);
    d.x.col(0).setOnes();
    d.x(0, 1) = 1.0;
    for (int j = 1; j < sc.p; ++j)
      d.x(j, 2) = groups[static_cast<std::size_t>(i * (sc.p - 1) + (j - 1))];
    d.z = Matrix::Ones(sc.p, 1);
    d.reference_channel = 0;
    study.designs.push_back(std::move(d));
    for (int j = 0; j < sc.p; ++j) {
      std::snprintf(buf, sizeof(buf), "b%03d_c%d", i + 1, j + 1);
      SampleInfo s;
      s.id = buf;
      s.batch = i;
      s.row = j;
      s.is_reference = j == 0;
      study.samples.push_back(std::move(s));
    }
  }

  MissingMechanism mech;
  mech.gamma0 = sc.gamma0;
  mech.gamma = sc.gamma;
  Vector alpha(3);
  alpha << sc.alpha0, -sc.a, sc.a;

  for (int f = 0; f < n_features; ++f) {
    std::snprintf(buf, sizeof(buf), "f%05d", f + 1);
    Rng rng(Rng::mix(sc.seed, 0xfea7ULL + static_cast<std::uint64_t>(f)));
    Vector feature_alpha = alpha;
    if (sc.alpha0_sd > 0.0) feature_alpha[0] += sc.alpha0_sd * rng.normal();
    FeatureBatchData data;
    for (int i = 0; i < sc.q; ++i) {
      const BatchDesign& d = study.designs[static_cast<std::size_t>(i)];
      const double b = std::sqrt(sc.d) * rng.normal();
      Vector y = d.x * feature_alpha;
      for (int j = 0; j < sc.p; ++j) {
        const double sd =
            j == 0 ? std::sqrt(sc.sigma0_sq) : std::sqrt(sc.sigma_sq);
        y[j] += b + sd * rng.normal();
      }
      bool missing = rng.uniform() < miss_prob(mech, y.mean());
      std::vector<bool> obs(static_cast<std::size_t>(sc.p), !missing);
      if (!missing && sc.sporadic_rate > 0.0) {
        for (int j = 0; j < sc.p; ++j)
          if (rng.uniform() < sc.sporadic_rate)
            obs[static_cast<std::size_t>(j)] = false;
        bool any = false;
        for (bool o : obs) any = any || o;
        if (!any) missing = true;
      }
      if (missing) obs.assign(static_cast<std::size_t>(sc.p), false);
      for (int j = 0; j < sc.p; ++j)
        if (!obs[static_cast<std::size_t>(j)])
          y[j] = std::numeric_limits<double>::quiet_NaN();
      data.batches.push_back(std::move(y));
      data.batch_missing.push_back(missing);
      data.observed.push_back(std::move(obs));
    }
    if (data.n_observed_batches() == 0) {
      study.rejected.emplace_back(buf, "no observed batches");
      continue;
    }
    study.feature_ids.emplace_back(buf);
    study.features.push_back(std::move(data));
  }
  return study;
}

void write_study_inputs(const Study& study, const std::string& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ostringstream os;
    os << "sample_id\tbatch_id\tchannel\tis_reference\n";
    for (const auto& s : study.samples)
      os << s.id << '\t' << study.batch_ids[static_cast<std::size_t>(s.batch)]
         << '\t' << s.row + 1 << '\t' << (s.is_reference ? 1 : 0) << '\n';
    write_file(out_dir + "/batch_map.tsv", os.str());
  }
  {
    std::ostringstream os;
    os << "sample_id";
    for (const auto& n : study.covariate_names) os << '\t' << n;
    os << '\n';
    for (const auto& s : study.samples) {
      os << s.id;
      const BatchDesign& d = study.designs[static_cast<std::size_t>(s.batch)];
      for (std::size_t c = 0; c < study.covariate_names.size(); ++c)
        os << '\t'
           << format_full(d.x(s.row, static_cast<Index>(2 + c)));
      os << '\n';
    }
    write_file(out_dir + "/covariates.tsv", os.str());
  }
  {
    std::ostringstream os;
    os << "feature_id";
    for (const auto& s : study.samples) os << '\t' << s.id;
    os << '\n';
    for (std::size_t f = 0; f < study.features.size(); ++f) {
      os << study.feature_ids[f];
      for (const auto& s : study.samples) {
        const double v =
            study.features[f].batches[static_cast<std::size_t>(s.batch)]
                [s.row];
        os << '\t' << (std::isnan(v) ? "NA" : format_full(v));
      }
      os << '\n';
    }
    write_file(out_dir + "/abundance.tsv", os.str());
  }
}

// ---- scenario files ----

Scenario load_scenario(const std::string& path) {
  Scenario sc;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw_error(ErrorCode::parse_error,
                  path + ": expected key=value at line " +
                      std::to_string(i + 1));
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto num = [&] { return parse_number(value, path, i, 1); };
    if (key == "q") sc.q = static_cast<int>(num());
    else if (key == "p") sc.p = static_cast<int>(num());
    else if (key == "a") sc.a = num();
    else if (key == "alpha0") sc.alpha0 = num();
    else if (key == "alpha0_sd") sc.alpha0_sd = num();
    else if (key == "sigma0_sq") sc.sigma0_sq = num();
    else if (key == "sigma_sq") sc.sigma_sq = num();
    else if (key == "d") sc.d = num();
    else if (key == "gamma0") sc.gamma0 = num();
    else if (key == "gamma") sc.gamma = num();
    else if (key == "sporadic_rate") sc.sporadic_rate = num();
    else if (key == "n_replicates") sc.n_replicates = static_cast<int>(num());
    else if (key == "n_permutations")
      sc.n_permutations = static_cast<int>(num());
    else if (key == "seed") sc.seed = static_cast<std::uint64_t>(num());
    else if (key == "threads") sc.threads = static_cast<int>(num());
    else if (key == "group") {
      if (value == "balanced") sc.group = Scenario::GroupAssignment::balanced;
      else if (value == "bernoulli")
        sc.group = Scenario::GroupAssignment::bernoulli;
      else if (value == "batch") sc.group = Scenario::GroupAssignment::batch;
      else
        throw_error(ErrorCode::parse_error,
                    path + ": unknown group assignment '" + value + "'");
    } else {
      throw_error(ErrorCode::parse_error,
                  path + ": unknown key '" + key + "'");
    }
  }
  sc.validate();
  return sc;
}

void save_scenario(const Scenario& sc, const std::string& path) {
  std::ostringstream os;
  os << "q=" << sc.q << '\n'
     << "p=" << sc.p << '\n'
     << "a=" << format_full(sc.a) << '\n'
     << "alpha0=" << format_full(sc.alpha0) << '\n'
     << "alpha0_sd=" << format_full(sc.alpha0_sd) << '\n'
     << "sigma0_sq=" << format_full(sc.sigma0_sq) << '\n'
     << "sigma_sq=" << format_full(sc.sigma_sq) << '\n'
     << "d=" << format_full(sc.d) << '\n'
     << "gamma0=" << format_full(sc.gamma0) << '\n'
     << "gamma=" << format_full(sc.gamma) << '\n'
     << "sporadic_rate=" << format_full(sc.sporadic_rate) << '\n'
     << "n_replicates=" << sc.n_replicates << '\n'
     << "n_permutations=" << sc.n_permutations << '\n'
     << "seed=" << sc.seed << '\n'
     << "threads=" << sc.threads << '\n'
     << "group="
     << (sc.group == Scenario::GroupAssignment::balanced
             ? "balanced"
             : sc.group == Scenario::GroupAssignment::bernoulli ? "bernoulli"
                                                                : "batch")
     << '\n';
  write_file(path, os.str());
}

// ---- table writers ----

void write_power_study(const std::vector<PowerStudyRow>& rows,
                  const std::string& path) {
  std::ostringstream os;
  os << "q\tvariance\ta\tcutoff\tmixemm_badmm\tmixemm_mar\tbaseline\t"
        "n_effective\tn_failed\n";
  for (const auto& r : rows)
    os << r.q << '\t' << (r.large_variance ? "large" : "small") << '\t'
       << format_full(r.a) << '\t' << format_full(r.cutoff) << '\t'
       << format_full(r.rate_badmm) << '\t' << format_full(r.rate_mar) << '\t'
       << format_full(r.rate_baseline) << '\t' << r.n_effective << '\t'
       << r.n_failed << '\n';
  write_file(path, os.str());
}

void write_mse_study(const std::vector<MseStudyRow>& rows,
                  const std::string& path) {
  std::ostringstream os;
  os << "q\tanalysis\talpha\talpha_full\tsigma0_sq\tsigma_sq\td\t"
        "seconds\tseconds_mar\tn_effective\tlogit_gamma0\tlogit_gamma\n";
  for (const auto& r : rows)
    os << r.q << '\t' << (r.logit_analysis ? "logit" : "exponential") << '\t'
       << format_full(r.alpha) << '\t' << format_full(r.alpha_full)
       << '\t' << format_full(r.sigma0_sq) << '\t' << format_full(r.sigma_sq)
       << '\t' << format_full(r.d) << '\t' << format_full(r.seconds_numerator)
       << '\t' << format_full(r.seconds_mar) << '\t' << r.n_effective << '\t'
       << format_full(r.logit_gamma0) << '\t' << format_full(r.logit_gamma)
       << '\n';
  write_file(path, os.str());
}

void write_mechanism_study(const std::vector<MechanismStudyRow>& rows,
                  const std::string& path) {
  std::ostringstream os;
  os << "q\tparameter\ttrue_value\tmin\tmedian\tmean\tmax\n";
  for (const auto& r : rows)
    os << r.q << '\t' << r.parameter << '\t' << format_full(r.true_value)
       << '\t' << format_full(r.min) << '\t' << format_full(r.median) << '\t'
       << format_full(r.mean) << '\t' << format_full(r.max) << '\n';
  write_file(path, os.str());
}

}  // namespace bamm
