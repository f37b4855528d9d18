#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>

#include "tstmle/rng.hpp"
#include "tstmle/trial_data.hpp"

namespace tstmle {

/// Logistic model for target-population membership Y1*.
struct TargetModel {
  double intercept = -0.8;
  double e1c = 0.3;
  double e2c = 0.15;
  double w1 = 2.0;
  double w2 = 1.5;
  double w3 = -3.0;
  double u_e1c = 0.55;
  double u_e2c = 0.15;
};

/// One branch of the W3-switched measurement model.
struct MeasurementBranch {
  double intercept = 0.1;
  double a = 0.8;
  double w1 = 0.0;
  double w2_a = 0.0;  // coefficient on W2 x A
  double w3 = 0.0;
  double e1c = 0.0;
  double e2c = 0.0;
  double u_e1c = 0.0;
  double u_e2c = 0.0;
};

/// Logistic model for the outcome among the measured target population.
struct OutcomeModel {
  double intercept = 0.2;
  double a = 0.08;
  double w1 = 0.5;
  double w2 = 0.4;
  double e1c = -2.0;
  double e2c = 0.87;
  double a_w3 = -0.08;
};

/// Post-baseline binary covariate L = 1(U_L < expit(...)) and its entry into
/// the Y1*, measurement and outcome equations. The shipped defaults are
/// configuration, chosen to make every A -> L pathway active.
struct ExtendedParams {
  double l_intercept = -0.5;
  double l_e1c = 0.2;
  double l_w1 = 0.5;
  double l_w2 = 0.3;
  double l_a = 1.0;
  double y1star_l = 1.0;
  double y1star_a = 0.25;
  double delta_l = 0.6;
  double y2_l = 0.3;
};

struct SimParams {
  std::size_t j = 150;
  double n_mean = 100.0;
  double n_sd = 10.0;
  std::size_t min_cluster_size = 2;
  double u_e1c_max = 1.0;
  double u_e2c_max = 0.5;
  double e_sd = 1.0;
  double w1_lo = 18.0;
  double w1_hi = 60.0;
  double p_w2 = 0.6;
  double p_w3 = 0.65;
  double p_arm = 0.5;
  TargetModel y1star;
  MeasurementBranch delta_w3 = {0.1, 0.8, -2.0, 0.8, 0.75, -0.75, 0.75, -0.15, 0.15};
  MeasurementBranch delta_not_w3 = {0.1, 0.8, 2.0, -0.8, -0.75, 0.75, -0.75, 0.15, -0.15};
  OutcomeModel y2;
  std::size_t truth_clusters = 5000;
  /// When set, measurement is Bernoulli(p) independent of everything else.
  std::optional<double> mcar_measurement;
  std::optional<ExtendedParams> extended;

  /// Throws std::invalid_argument on out-of-range values.
  void check() const;
};

/// Overrides defaults with the keys present; unknown keys throw.
SimParams sim_params_from_json(const nlohmann::json& j);
nlohmann::json sim_params_to_json(const SimParams& p);

/// Cluster-level quantities the individual-level models depend on.
struct ClusterContext {
  double e1c = 0.0;
  double e2c = 0.0;
  double u_e1c = 0.0;
  double u_e2c = 0.0;
};

ClusterContext context_of(const ClusterRecord& cluster);

// Model probabilities for an individual under arm a (and L = l in the
// extended process; l is ignored otherwise).
double l_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, int a);
double target_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3, int a,
                          double l = 0.0);
double measurement_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3,
                               int a, double l = 0.0);
double outcome_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3, int a,
                           double l = 0.0);

/// One cluster with counterfactuals. Draw order within the stream: cluster
/// latents and covariates, size, individual W, arm, then per-individual
/// (U_Y1*, U_delta, U_Y2), then per-individual U_L when extended.
ClusterRecord generate_cluster(const SimParams& params, Rng& rng, std::string id);

/// J clusters; cluster j draws from derive_seed(seed, {kStreamTrial, j}).
TrialData generate_trial(const SimParams& params, std::uint64_t seed, unsigned threads = 1);

/// Same as generate_trial; requires params.extended.
TrialData generate_trial_extended(const SimParams& params, std::uint64_t seed, unsigned threads = 1);

struct TruthResult {
  double psi_star = 0.0;
  double psi_star_se = 0.0;  // Monte Carlo SE over truth clusters
  double yc1_mean = 0.0;
  double yc0_mean = 0.0;
  std::size_t clusters_used = 0;
  std::size_t clusters_dropped = 0;
};

/// Counterfactual cluster endpoint P[Y2(a)=1 | Y1*(a)=1] of a simulated
/// cluster, or nullopt when nobody is in the target population under arm a.
std::optional<double> counterfactual_endpoint(const ClusterRecord& cluster, int a);

/// Average counterfactual contrast over params.truth_clusters clusters drawn
/// from derive_seed(seed, {kStreamTruth, c}).
TruthResult compute_truth(const SimParams& params, std::uint64_t seed, unsigned threads = 1);

}  // namespace tstmle
