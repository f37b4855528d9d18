#pragma once

#include <cstdint>
#include <iosfwd>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "tstmle/simgen.hpp"
#include "tstmle/stage1.hpp"
#include "tstmle/stage2.hpp"
#include "tstmle/trial_data.hpp"

namespace tstmle {

/// One Two-Stage estimator: a Stage-1 endpoint method paired with a Stage-2
/// effect method.
struct EstimatorConfig {
  std::string name;
  Stage1Method stage1 = Stage1Method::Tmle;
  Stage2Method stage2 = Stage2Method::TmleAps;
  std::string library = "default";  // default | glm | mean
  int k1 = 10;
  int k2 = 5;
  bool adjust_l = false;

  /// Identifies the Stage-1 computation; estimators sharing it share endpoints.
  std::string stage1_key() const;
  std::string stage2_key() const;
};

EstimatorConfig estimator_from_json(const nlohmann::json& j);
nlohmann::json estimator_to_json(const EstimatorConfig& e);

/// Screened/Unadjusted, Eligible/Unadjusted, Unadjusted/Unadjusted,
/// TMLE/Unadjusted, TMLE/TMLE.
std::vector<EstimatorConfig> standard_estimators(bool adjust_l = false);

Library library_by_id(const std::string& id, bool adjust_l);

/// Stage-1 endpoints for every cluster. Clusters whose endpoint is undefined
/// are skipped and their ids appended to `dropped`. Rows come back sorted by
/// cluster id so Stage 2 does not depend on input order.
std::vector<ClusterLevelRow> stage1_rows(const TrialData& data, const EstimatorConfig& config,
                                         std::uint64_t stage1_seed, std::vector<std::string>& dropped);

/// Stage 2 on prepared rows.
EffectEstimate stage2_effect(std::span<const ClusterLevelRow> rows, const EstimatorConfig& config,
                             std::uint64_t stage2_seed);

struct AnalysisResult {
  EffectEstimate estimate;
  std::vector<std::string> dropped_clusters;
};

/// Full Two-Stage analysis. Stage-1 streams derive from (seed, stage1_key,
/// cluster id); the Stage-2 stream from (seed, stage2_key). Throws
/// std::invalid_argument if fewer than 2 usable clusters remain in an arm.
AnalysisResult analyze_trial(const TrialData& data, const EstimatorConfig& config, std::uint64_t seed);

std::uint64_t stage1_seed(std::uint64_t seed, const EstimatorConfig& config);
std::uint64_t stage2_seed(std::uint64_t seed, const EstimatorConfig& config);

struct EstimateSummary {
  double psi = 0.0;
  double se = 0.0;
  int df = 0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double p_value = 1.0;
  std::string q_adjust;  // APS selections; empty for unadjusted Stage 2
  std::string g_adjust;
};

struct EstimatorOutcome {
  bool ok = false;
  EstimateSummary estimate;
  std::size_t clusters_dropped = 0;
  std::string error;
};

struct ReplicateResult {
  std::size_t rep_id = 0;
  std::uint64_t trial_checksum = 0;
  std::vector<EstimatorOutcome> outcomes;  // aligned with the estimator list
};

/// Replicate r analyzes the trial generated from derive_seed(seed, {kStreamTrial, r})
/// with analysis seed derive_seed(seed, {kStreamStage1, r}).
ReplicateResult run_replicate(const SimParams& params, const std::vector<EstimatorConfig>& estimators,
                              std::size_t rep, std::uint64_t seed);

std::vector<ReplicateResult> run_replicates(const SimParams& params,
                                            const std::vector<EstimatorConfig>& estimators, std::size_t reps,
                                            std::uint64_t seed, unsigned threads = 1,
                                            std::ostream* progress = nullptr);

struct EstimatorMetrics {
  std::string name;
  bool available = false;
  std::size_t n_reps = 0;
  std::size_t n_failed = 0;
  double mean_pt = 0.0;
  double mean_ci_lo = 0.0;
  double mean_ci_hi = 0.0;
  double bias = 0.0;
  double avg_se = 0.0;
  double mc_sd = 0.0;
  double coverage = 0.0;
  double power = 0.0;
};

bool covers(const EstimateSummary& e, double psi_star);
bool rejects(const EstimateSummary& e, double alpha);

std::vector<EstimatorMetrics> aggregate_metrics(const std::vector<ReplicateResult>& results,
                                                const std::vector<EstimatorConfig>& estimators,
                                                double psi_star, double alpha = kAlpha);

void write_summary_csv(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                       const std::vector<EstimatorMetrics>& metrics, double psi_star);
void write_replicates_csv(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                          const std::vector<ReplicateResult>& results, double psi_star, double alpha = kAlpha);
/// Fixed-width results table; point estimates, CIs, bias, coverage and power in percent.
void print_table(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                 const std::vector<EstimatorMetrics>& metrics, double psi_star, std::size_t reps);

nlohmann::json effect_to_json(const EffectEstimate& e, const EstimatorConfig& config,
                              const std::vector<std::string>& dropped);

/// Command-line entry point: truth | simulate | analyze | table1.
int cli_main(int argc, char** argv);

}  // namespace tstmle
