#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tstmle {

/// Thrown for malformed input files and for structural invariant violations
/// detected while loading.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Simulation-only latent and counterfactual values for one individual.
/// Index [a] holds the value under arm a. In the base process y1_star_cf[0]
/// and y1_star_cf[1] coincide.
struct SimLatents {
  bool y1_star = false;  // realized-arm target-population status
  std::array<bool, 2> y1_star_cf{};
  std::array<bool, 2> delta_cf{};
  std::array<bool, 2> y2_cf{};
  std::array<double, 2> l_cf{};  // only meaningful in the extended process

  bool operator==(const SimLatents&) const = default;
};

struct IndividualRecord {
  double w1 = 0.0;
  bool w2 = false;
  bool w3 = false;
  bool delta = false;
  bool y1 = false;
  bool y2 = false;
  std::optional<double> l;
  std::optional<SimLatents> latent;

  bool operator==(const IndividualRecord&) const = default;
};

/// Cluster-level latent draws kept by the simulator for oracle computations.
/// Never serialized.
struct ClusterLatents {
  double u_e1c = 0.0;
  double u_e2c = 0.0;

  bool operator==(const ClusterLatents&) const = default;
};

struct CovariateMeans {
  double w1c = 0.0;
  double w2c = 0.0;
  double w3c = 0.0;
};

struct ClusterRecord {
  std::string id;
  double e1c = 0.0;
  double e2c = 0.0;
  bool a = false;
  std::vector<IndividualRecord> individuals;
  double w1c = 0.0;
  double w2c = 0.0;
  double w3c = 0.0;
  std::optional<ClusterLatents> latent;

  std::size_t n() const { return individuals.size(); }
};

/// Builds a cluster and fills in the covariate aggregates.
ClusterRecord make_cluster(std::string id, double e1c, double e2c, bool a,
                           std::vector<IndividualRecord> individuals);

struct TrialData {
  std::vector<ClusterRecord> clusters;

  std::size_t j() const { return clusters.size(); }
  bool has_l() const;
  bool has_latent() const;
};

/// Empirical means of W1, W2, W3 over the cluster's individuals.
/// Throws std::invalid_argument on an empty cluster.
CovariateMeans aggregate_cluster_covariates(const ClusterRecord& cluster);

struct Violation {
  std::string cluster_id;
  std::optional<std::size_t> row;  // index within the cluster
  std::string message;
};

using ValidationReport = std::vector<Violation>;

/// Lists every invariant violation. Empty iff the trial is well formed.
ValidationReport validate(const TrialData& data);

/// Header row, in column order, for the given optional column groups.
std::string csv_header(bool with_l, bool with_latent);

/// Reads individual-level rows grouped by cluster_id. Cluster order follows
/// first appearance; row order within a cluster is preserved.
TrialData read_trial_csv(std::istream& in);
TrialData load_trial_csv(const std::string& path);

/// Writes the canonical form: fixed column order, floats with 17 significant
/// digits, binaries as 0/1. Optional column groups are emitted iff present on
/// every individual.
void write_trial_csv(const TrialData& data, std::ostream& out);
void save_trial_csv(const TrialData& data, const std::string& path);

/// Order-sensitive digest of the observed (non-latent) trial contents.
std::uint64_t trial_checksum(const TrialData& data);

}  // namespace tstmle
