#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tstmle/learners.hpp"
#include "tstmle/trial_data.hpp"

namespace tstmle {

enum class Stage1Method { Screened, Eligible, Unadjusted, Tmle };

std::string_view to_string(Stage1Method m);
Stage1Method parse_stage1_method(std::string_view s);

/// The cluster's endpoint cannot be estimated (e.g. nobody measured).
class EndpointUndefined : public std::runtime_error {
 public:
  EndpointUndefined(std::string cluster_id, const std::string& what)
      : std::runtime_error("cluster '" + cluster_id + "': " + what), cluster_id_(std::move(cluster_id)) {}
  const std::string& cluster_id() const { return cluster_id_; }

 private:
  std::string cluster_id_;
};

/// Stage-1 estimate of a cluster-level endpoint.
///
/// For the ratio methods (unadjusted, tmle) the influence curve has one entry
/// per individual and estimate = numerator / denominator. For screened and
/// eligible it is defined over the conditioning subset only, so se^2 is the
/// sample variance of ic over ic.size() in every case.
struct ClusterEndpoint {
  double estimate = 0.0;
  double numerator = 0.0;
  double denominator = 1.0;
  std::vector<double> ic;
  double se = 0.0;
  Stage1Method method = Stage1Method::Unadjusted;
  std::optional<double> epsilon;
  bool denominator_floored = false;
};

// Bounds applied to nuisance predictions before targeting.
inline constexpr double kQbarLower = 0.005;
inline constexpr double kQbarUpper = 0.995;
inline constexpr double kGLower = 0.025;
inline constexpr double kDenominatorFloor = 0.005;

struct Stage1Options {
  int folds = 10;
  bool adjust_l = false;
  /// Library used for both nuisance regressions. Empty: default_library over
  /// the adjustment set.
  Library library;
};

/// Adjustment-set column names: {w1, w2, w3} plus l when requested.
std::vector<std::string> stage1_adjustment_set(bool adjust_l);

/// Individual covariates of a cluster as named columns.
Covariates individual_covariates(const ClusterRecord& cluster, bool with_l);

struct NuisanceFits {
  SuperLearnerFit qbar;             // E(Y1 | delta=1, W), fit among the measured
  std::optional<SuperLearnerFit> g; // P(delta=1 | W); empty under full measurement
  std::vector<double> qbar_init;    // bounded initial predictions, all individuals
  std::vector<double> g_hat;        // truncated predictions, all individuals
};

struct TargetedDenominator {
  std::vector<double> qbar_star;
  double epsilon = 0.0;
  double score = 0.0;
  int iterations = 0;
};

/// Logistic fluctuation of qbar_init along H = 1/g_hat, fit among delta=1.
/// Solves sum_{delta=1} H (y1 - qbar_star) = 0. Throws std::runtime_error
/// carrying the final score if Newton/bisection fails within 200 iterations.
TargetedDenominator target_denominator(std::span<const double> qbar_init,
                                       std::span<const double> g_hat,
                                       std::span<const double> delta,
                                       std::span<const double> y1);

struct RatioInfluence {
  std::vector<double> ic;
  double se = 0.0;
};

/// Delta-method influence curve of num/den.
RatioInfluence influence_curve_ratio(double num, double den, std::span<const double> ic_num,
                                     std::span<const double> ic_den);

/// sqrt(sample variance / n).
double standard_error(std::span<const double> ic);

ClusterEndpoint estimate_endpoint_screened(const ClusterRecord& cluster);
ClusterEndpoint estimate_endpoint_eligible(const ClusterRecord& cluster);
ClusterEndpoint estimate_endpoint_unadjusted(const ClusterRecord& cluster);

NuisanceFits fit_nuisance(const ClusterRecord& cluster, const Stage1Options& options,
                          std::uint64_t seed);

/// TMLE of the denominator from supplied nuisance predictions, combined with
/// the empirical numerator. Predictions are bounded/truncated here.
ClusterEndpoint tmle_endpoint_from_nuisance(const ClusterRecord& cluster,
                                            std::span<const double> qbar_init,
                                            std::span<const double> g_hat);

ClusterEndpoint estimate_endpoint_tmle(const ClusterRecord& cluster, const Stage1Options& options,
                                       std::uint64_t seed);

/// Dispatch on method. Seed is only consumed by the tmle method.
ClusterEndpoint estimate_endpoint(const ClusterRecord& cluster, Stage1Method method,
                                  const Stage1Options& options, std::uint64_t seed);

}  // namespace tstmle
