#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tstmle/learners.hpp"

namespace tstmle {

/// One cluster in the Stage-2 analysis: baseline covariates, arm, and the
/// Stage-1 endpoint estimate.
struct ClusterLevelRow {
  double e1c = 0.0;
  double e2c = 0.0;
  double w1c = 0.0;
  double w2c = 0.0;
  double w3c = 0.0;
  bool a = false;
  double y = 0.0;
};

/// Candidate Stage-2 adjustment covariates, in the order APS considers them.
inline const std::vector<std::string>& stage2_covariate_names() {
  static const std::vector<std::string> names{"e1c", "e2c", "w1c", "w2c", "w3c"};
  return names;
}

/// Columns a, e1c, e2c, w1c, w2c, w3c.
Covariates cluster_covariates(std::span<const ClusterLevelRow> rows);

/// A Stage-2 working-model candidate: adjust for nothing or one covariate.
struct Stage2Candidate {
  std::optional<std::string> covariate;

  std::string label() const { return covariate ? *covariate : "unadjusted"; }
  bool operator==(const Stage2Candidate&) const = default;
};

/// {unadjusted, e1c, e2c, w1c, w2c, w3c}.
std::vector<Stage2Candidate> default_stage2_candidates();

/// Gaussian working model y ~ 1 + a [+ covariate].
DesignSpec outcome_spec(const Stage2Candidate& c);
/// Logistic a ~ 1 + covariate; nullopt means the known probability 0.5.
std::optional<DesignSpec> propensity_spec(const Stage2Candidate& c);

struct CandidateRisk {
  std::string q_label;
  std::string g_label;
  double risk = 0.0;
};

struct ApsSelection {
  Stage2Candidate q;
  Stage2Candidate g;
  DesignSpec q_spec;
  std::optional<DesignSpec> g_spec;  // nullopt: known 0.5
  double cv_risk = 0.0;
  std::vector<CandidateRisk> candidate_risks;

  /// Unadjusted outcome model with the known randomization probability.
  static ApsSelection unadjusted();
};

enum class Stage2Method { Unadjusted, TmleAps };

std::string_view to_string(Stage2Method m);
Stage2Method parse_stage2_method(std::string_view s);

struct TInference {
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double p_value = 1.0;
};

struct EffectEstimate {
  double psi = 0.0;
  double se = 0.0;
  int df = 0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double p_value = 1.0;
  std::vector<double> ic;
  std::optional<ApsSelection> selection;
  Stage2Method method = Stage2Method::Unadjusted;
  bool g_truncated = false;
};

inline constexpr double kAlpha = 0.05;
inline constexpr double kPropensityLower = 0.05;
inline constexpr double kPropensityUpper = 0.95;

/// Quantile of Student's t with df degrees of freedom.
double t_quantile(double p, double df);

/// Wald-type t inference: se = sqrt(sampleVar(ic)/n), CI = psi -/+ t_{df,0.975} se,
/// two-sided p-value.
TInference inference_t(double psi, std::span<const double> ic, int df);

EffectEstimate estimate_effect_unadjusted(std::span<const ClusterLevelRow> rows);

/// Cross-validated risk (mean squared influence curve on validation folds) of
/// the cluster-level TMLE using the given working models.
double aps_cv_risk(std::span<const ClusterLevelRow> rows, const Stage2Candidate& q,
                   const Stage2Candidate& g, const FoldAssignment& folds);

/// Collaborative Adaptive Pre-specification: choose the outcome model with
/// g = 0.5, then the propensity model given that outcome model. Ties keep the
/// earlier candidate. Both candidate lists must contain the unadjusted entry.
ApsSelection aps_select(std::span<const ClusterLevelRow> rows,
                        std::span<const Stage2Candidate> candidates_q,
                        std::span<const Stage2Candidate> candidates_g, int k, std::uint64_t seed);

EffectEstimate estimate_effect_tmle(std::span<const ClusterLevelRow> rows, const ApsSelection& selection);

}  // namespace tstmle
