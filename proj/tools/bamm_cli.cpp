// Command-line front end. Talks to the library exclusively through the C
// API in bamm.h.
#include <CLI11.hpp>
#include <cstdio>
#include <string>

#include "bamm.h"

namespace {

int exit_code_for(bamm_status status) {
  switch (status) {
    case BAMM_OK:
      return 0;
    case BAMM_E_INVALID:
    case BAMM_E_PARSE:
    case BAMM_E_IO:
      return 2;
    default:
      return 1;
  }
}

int fail(bamm_status status) {
  std::fprintf(stderr, "error: %s\n", bamm_last_error());
  return exit_code_for(status);
}

struct ScenarioArgs {
  std::string scenario_path;
  bamm_scenario sc{};
  bool q_set = false, seed_set = false, reps_set = false, perms_set = false,
       threads_set = false;
  int q = 0, reps = 0, perms = 0, threads = 0;
  uint64_t seed = 0;

  void add_to(CLI::App* cmd) {
    bamm_scenario_init(&sc);
    cmd->add_option("--scenario", scenario_path,
                    "scenario file (key=value lines)");
    cmd->add_option("--q", q, "number of batches")->each([this](std::string) {
      q_set = true;
    });
    cmd->add_option("--replicates", reps, "simulation replicates")
        ->each([this](std::string) { reps_set = true; });
    cmd->add_option("--permutations", perms, "permutations per test")
        ->each([this](std::string) { perms_set = true; });
    cmd->add_option("--seed", seed, "master seed")->each([this](std::string) {
      seed_set = true;
    });
    cmd->add_option("--threads", threads, "worker threads (0 = all cores)")
        ->each([this](std::string) { threads_set = true; });
  }

  bamm_status resolve() {
    if (!scenario_path.empty()) {
      const bamm_status st = bamm_scenario_load(scenario_path.c_str(), &sc);
      if (st != BAMM_OK) return st;
    }
    if (q_set) sc.q = q;
    if (reps_set) sc.n_replicates = reps;
    if (perms_set) sc.n_permutations = perms;
    if (seed_set) sc.seed = seed;
    if (threads_set) sc.threads = threads;
    return BAMM_OK;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-effects models for batch-structured abundance data "
               "with abundance-dependent batch-level missingness"};
  app.require_subcommand(1);

  // ---- run ----
  auto* run = app.add_subcommand(
      "run", "fit every feature of a study and write result tables");
  std::string abundance, batch_map, covariates, out_dir = "bamm_out";
  std::string mechanism = "exp", profile_spec;
  double gamma0 = 0.0, gamma = 0.0, tol = 1e-8, min_ref = 0.7;
  bool estimate = false;
  int permutations = 999, max_iter = 500, threads = 0;
  uint64_t seed = 1;
  run->add_option("--abundance", abundance, "feature x sample TSV")
      ->required();
  run->add_option("--batch-map", batch_map,
                  "sample_id/batch_id/channel/is_reference TSV")
      ->required();
  run->add_option("--covariates", covariates, "sample covariates TSV");
  run->add_option("--mechanism", mechanism, "exp|logit")
      ->check(CLI::IsMember({"exp", "logit"}));
  run->add_option("--gamma0", gamma0, "mechanism intercept");
  run->add_option("--gamma", gamma, "mechanism abundance coefficient");
  run->add_flag("--estimate-gamma", estimate,
                "estimate the mechanism from available cases");
  run->add_option("--profile-gamma", profile_spec,
                  "profile gamma over lo:hi:step at fixed gamma0");
  run->add_option("--permutations", permutations,
                  "permutation count (0 disables)");
  run->add_option("--seed", seed, "master seed");
  run->add_option("--max-iter", max_iter, "ECM iteration cap");
  run->add_option("--tol", tol, "relative convergence tolerance");
  run->add_option("--threads", threads, "worker threads (0 = all cores)");
  run->add_option("--min-ref-obs-frac", min_ref,
                  "reference-observation filter threshold");
  run->add_option("--out", out_dir, "output directory");

  // ---- simulate ----
  auto* simulate = app.add_subcommand(
      "simulate", "write a simulated study (abundance/batch map/covariates)");
  ScenarioArgs sim_args;
  sim_args.add_to(simulate);
  int n_features = 1000;
  std::string sim_out = "bamm_sim";
  simulate->add_option("--features", n_features, "features to simulate");
  simulate->add_option("--out", sim_out, "output directory");

  // ---- tables ----
  auto* power = app.add_subcommand(
      "power-study", "type-I error and power comparison study");
  ScenarioArgs t1_args;
  t1_args.add_to(power);
  std::string t1_subset, t1_out = "bamm_tables";
  power->add_option("--subset", t1_subset,
                     "row filter, e.g. q40,large,power");
  power->add_option("--out", t1_out, "output directory");

  auto* mse = app.add_subcommand(
      "mse-study", "relative-MSE comparison study");
  ScenarioArgs t2_args;
  t2_args.add_to(mse);
  int t2_logit_reps = 200;
  std::string t2_out = "bamm_tables";
  mse->add_option("--logit-replicates", t2_logit_reps,
                     "replicates for the logit analysis (0 disables)");
  mse->add_option("--out", t2_out, "output directory");

  auto* mechanism_study = app.add_subcommand(
      "mechanism-study", "available-case mechanism estimation study");
  ScenarioArgs t3_args;
  t3_args.add_to(mechanism_study);
  int t3_features = 1000, t3_reps = 100;
  std::string t3_out = "bamm_tables";
  mechanism_study->add_option("--features", t3_features, "features per repetition");
  mechanism_study->add_option("--repetitions", t3_reps, "repetitions");
  mechanism_study->add_option("--out", t3_out, "output directory");

  auto* version = app.add_subcommand("version", "print the library version");

  CLI11_PARSE(app, argc, argv);

  if (version->parsed()) {
    std::printf("bamm %s\n", bamm_version());
    return 0;
  }

  if (run->parsed()) {
    bamm_study* study = nullptr;
    bamm_status st =
        bamm_study_open(abundance.c_str(), batch_map.c_str(),
                        covariates.empty() ? nullptr : covariates.c_str(),
                        min_ref, &study);
    if (st != BAMM_OK) return fail(st);
    std::printf("loaded %lld features across %lld batches (%lld filtered)\n",
                static_cast<long long>(bamm_study_n_features(study)),
                static_cast<long long>(bamm_study_n_batches(study)),
                static_cast<long long>(bamm_study_n_filtered(study)));
    bamm_run_options options;
    bamm_run_options_init(&options);
    options.mechanism = mechanism == "logit" ? 1 : 0;
    options.gamma0 = gamma0;
    options.gamma = gamma;
    options.gamma_source = estimate ? 1 : 0;
    if (!profile_spec.empty()) {
      double lo = 0, hi = 0, step = 0;
      if (std::sscanf(profile_spec.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) !=
          3) {
        std::fprintf(stderr, "error: --profile-gamma expects lo:hi:step\n");
        return 2;
      }
      options.gamma_source = 2;
      options.profile_lo = lo;
      options.profile_hi = hi;
      options.profile_step = step;
    }
    options.permutations = permutations;
    options.seed = seed;
    options.max_iter = max_iter;
    options.tol = tol;
    options.threads = threads;
    st = bamm_study_run(study, &options, out_dir.c_str());
    bamm_study_free(study);
    if (st != BAMM_OK) return fail(st);
    std::printf("results written to %s\n", out_dir.c_str());
    return 0;
  }

  if (simulate->parsed()) {
    bamm_status st = sim_args.resolve();
    if (st != BAMM_OK) return fail(st);
    st = bamm_simulate_study(&sim_args.sc, n_features, sim_out.c_str());
    if (st != BAMM_OK) return fail(st);
    std::printf("simulated study written to %s\n", sim_out.c_str());
    return 0;
  }

  auto run_table = [&](ScenarioArgs& args, const char* name,
                       const std::string& out,
                       const std::function<bamm_status()>& fn) {
    const bamm_status st = args.resolve();
    if (st != BAMM_OK) return fail(st);
    const bamm_status rt = fn();
    if (rt != BAMM_OK) return fail(rt);
    std::printf("%s written to %s\n", name, out.c_str());
    // echo the table for a quick read
    if (std::FILE* f = std::fopen((out + "/" + name).c_str(), "rb")) {
      char buf[4096];
      std::size_t n;
      while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0)
        std::fwrite(buf, 1, n, stdout);
      std::fclose(f);
    }
    return 0;
  };

  if (power->parsed())
    return run_table(t1_args, "power_study.tsv", t1_out, [&] {
      return bamm_run_power_study(&t1_args.sc, t1_subset.c_str(), t1_out.c_str());
    });
  if (mse->parsed())
    return run_table(t2_args, "mse_study.tsv", t2_out, [&] {
      return bamm_run_mse_study(&t2_args.sc, t2_logit_reps, t2_out.c_str());
    });
  if (mechanism_study->parsed())
    return run_table(t3_args, "mechanism_study.tsv", t3_out, [&] {
      return bamm_run_mechanism_study(&t3_args.sc, t3_features, t3_reps,
                             t3_out.c_str());
    });
  return 0;
}
