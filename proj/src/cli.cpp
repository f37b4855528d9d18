#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "tstmle/harness.hpp"

namespace tstmle {

namespace {

using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  SimParams sim;
  std::vector<EstimatorConfig> estimators;
  std::size_t reps = 1000;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("config '" + path + "': expected a JSON object");
  RunConfig c;
  bool adjust_l = false;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "sim") c.sim = sim_params_from_json(*it);
    else if (k == "reps") c.reps = it->get<std::size_t>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else if (k == "threads") c.threads = it->get<unsigned>();
    else if (k == "adjust_l") adjust_l = it->get<bool>();
    else if (k == "estimators") {
      for (const auto& e : *it) c.estimators.push_back(estimator_from_json(e));
    } else {
      throw std::runtime_error("config '" + path + "': unknown key '" + k + "'");
    }
  }
  if (c.estimators.empty()) c.estimators = standard_estimators(adjust_l);
  c.sim.check();
  return c;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Two-Stage TMLE for counterfactual strata effects in cluster-randomized trials"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, replicates_path;
  std::string s1 = "tmle", s2 = "tmle-aps", library = "default";
  std::uint64_t seed = 1;
  std::optional<std::size_t> reps;
  std::optional<unsigned> threads;
  std::size_t rep = 0;
  int k1 = 10, k2 = 5;
  bool adjust_l = false, quiet = false;

  auto* truth = app.add_subcommand("truth", "Monte Carlo approximation of the true effect");
  truth->add_option("--config", config_path, "JSON configuration")->required();
  truth->add_option("--seed", seed, "Master seed");
  truth->add_option("--threads", threads, "Worker threads");

  auto* simulate = app.add_subcommand("simulate", "Write one simulated trial as CSV");
  simulate->add_option("--config", config_path, "JSON configuration")->required();
  simulate->add_option("--seed", seed, "Master seed");
  simulate->add_option("--rep", rep, "Replicate index (matches table1 replicate numbering)");
  simulate->add_option("--out", out_path, "Output CSV")->required();

  auto* analyze = app.add_subcommand("analyze", "Estimate the effect from a trial CSV");
  analyze->add_option("--data", data_path, "Trial CSV")->required();
  analyze->add_option("--stage1", s1, "screened | eligible | unadjusted | tmle");
  analyze->add_option("--stage2", s2, "unadjusted | tmle-aps");
  analyze->add_option("--library", library, "Stage-1 learner library: default | glm | mean");
  analyze->add_option("--k1", k1, "Stage-1 CV folds");
  analyze->add_option("--k2", k2, "Stage-2 CV folds");
  analyze->add_flag("--adjust-l", adjust_l, "Include L in the Stage-1 adjustment set");
  analyze->add_option("--seed", seed, "Master seed");
  analyze->add_option("--out", out_path, "Write JSON here instead of stdout");

  auto* table1 = app.add_subcommand("table1", "Run the simulation study and summarize all estimators");
  table1->add_option("--config", config_path, "JSON configuration")->required();
  table1->add_option("--reps", reps, "Replicates (overrides config)");
  table1->add_option("--seed", seed, "Master seed");
  table1->add_option("--out", out_path, "Summary CSV")->required();
  table1->add_option("--replicates", replicates_path, "Per-replicate CSV");
  table1->add_option("--threads", threads, "Worker threads (overrides config)");
  table1->add_flag("--quiet", quiet, "No progress counter");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*truth) {
      const auto c = load_config(config_path);
      const auto t = compute_truth(c.sim, seed, threads.value_or(c.threads));
      std::cout << "psi_star " << fmt("%.6f", t.psi_star) << '\n'
                << "mc_se " << fmt("%.6f", t.psi_star_se) << '\n'
                << "yc1_mean " << fmt("%.6f", t.yc1_mean) << '\n'
                << "yc0_mean " << fmt("%.6f", t.yc0_mean) << '\n'
                << "clusters_used " << t.clusters_used << '\n'
                << "clusters_dropped " << t.clusters_dropped << '\n';
    } else if (*simulate) {
      const auto c = load_config(config_path);
      const auto data = generate_trial(c.sim, derive_seed(seed, {kStreamTrial, rep}));
      save_trial_csv(data, out_path);
    } else if (*analyze) {
      EstimatorConfig e;
      e.stage1 = parse_stage1_method(s1);
      e.stage2 = parse_stage2_method(s2);
      e.library = library;
      e.k1 = k1;
      e.k2 = k2;
      e.adjust_l = adjust_l;
      e.name = s1 + "/" + s2;
      if (k1 < 2 || k2 < 2) throw UsageError("fold counts must be at least 2");
      const auto data = load_trial_csv(data_path);
      if (const auto v = validate(data); !v.empty()) {
        std::ostringstream msg;
        msg << "invalid trial data: cluster " << v.front().cluster_id << ": " << v.front().message;
        if (v.size() > 1) msg << " (and " << v.size() - 1 << " more)";
        throw std::runtime_error(msg.str());
      }
      const auto r = analyze_trial(data, e, seed);
      if (!r.dropped_clusters.empty())
        std::cerr << "warning: " << r.dropped_clusters.size() << " cluster(s) with undefined endpoint dropped\n";
      const auto text = effect_to_json(r.estimate, e, r.dropped_clusters).dump(2) + "\n";
      if (out_path.empty()) {
        std::cout << text;
      } else {
        auto out = open_out(out_path);
        out << text;
      }
    } else if (*table1) {
      auto c = load_config(config_path);
      if (reps) c.reps = *reps;
      if (threads) c.threads = *threads;
      if (c.reps < 1) throw UsageError("--reps must be at least 1");
      const auto t = compute_truth(c.sim, seed, c.threads);
      const auto results =
          run_replicates(c.sim, c.estimators, c.reps, seed, c.threads, quiet ? nullptr : &std::cerr);
      const auto metrics = aggregate_metrics(results, c.estimators, t.psi_star);
      auto out = open_out(out_path);
      write_summary_csv(out, c.estimators, metrics, t.psi_star);
      if (!replicates_path.empty()) {
        auto rout = open_out(replicates_path);
        write_replicates_csv(rout, c.estimators, results, t.psi_star);
      }
      print_table(std::cout, c.estimators, metrics, t.psi_star, c.reps);
      for (const auto& m : metrics)
        if (m.n_failed > 0) std::cerr << "note: " << m.name << " failed on " << m.n_failed << " replicate(s)\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace tstmle
