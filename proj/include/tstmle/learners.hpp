#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tstmle {

/// Named numeric columns, one row per observation.
class Covariates {
 public:
  Covariates() = default;
  Covariates(std::vector<std::string> names, Eigen::MatrixXd values);

  std::size_t rows() const { return static_cast<std::size_t>(values_.rows()); }
  const std::vector<std::string>& names() const { return names_; }
  const Eigen::MatrixXd& values() const { return values_; }

  bool has(std::string_view name) const;
  /// Throws std::invalid_argument naming the column when absent.
  Eigen::Index index_of(std::string_view name) const;

  Covariates subset(std::span<const std::size_t> rows) const;
  /// Copy with one column overwritten by a constant (used for counterfactual
  /// predictions such as setting the arm indicator).
  Covariates with_constant(std::string_view name, double value) const;

 private:
  std::vector<std::string> names_;
  Eigen::MatrixXd values_;
};

/// Intercept, main effect of a covariate, or the product of two covariates.
struct Term {
  std::string first;   // empty for the intercept
  std::string second;  // non-empty only for interactions

  static Term intercept() { return {}; }
  static Term main(std::string name) { return {std::move(name), {}}; }
  static Term interaction(std::string a, std::string b);

  bool is_intercept() const { return first.empty(); }
  std::string label() const;
  bool operator==(const Term&) const = default;
};

class DesignSpec {
 public:
  /// Intercept only.
  DesignSpec();
  /// The intercept is inserted at the front when missing. Duplicate terms throw.
  explicit DesignSpec(std::vector<Term> terms);

  static DesignSpec main_terms(std::span<const std::string> names);
  /// Main terms plus every pairwise interaction.
  static DesignSpec pairwise(std::span<const std::string> names);

  const std::vector<Term>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }
  std::vector<std::string> covariates() const;

  Eigen::MatrixXd design(const Covariates& x) const;

  bool operator==(const DesignSpec&) const = default;

 private:
  std::vector<Term> terms_;
};

enum class Family { Binomial, Gaussian };

struct GlmOptions {
  double tolerance = 1e-8;  // max-norm of the score at convergence
  int max_iterations = 100;
  double coefficient_bound = 20.0;
};

struct GlmFit {
  DesignSpec spec;
  Family family = Family::Binomial;
  Eigen::VectorXd coefficients;  // one per term; 0 for dropped terms
  bool converged = false;
  int iterations = 0;
  double max_score = 0.0;
  std::vector<std::string> dropped_terms;  // collinear terms removed before fitting
};

/// Weighted maximum likelihood for a logit-link binomial model (IRLS with
/// step halving) or identity-link gaussian model (weighted least squares).
/// On separation the returned fit has converged=false and coefficients
/// bounded by options.coefficient_bound.
GlmFit fit_glm(const DesignSpec& spec, Family family, const Covariates& x,
               std::span<const double> y, std::span<const double> weights = {},
               std::span<const double> offset = {}, const GlmOptions& options = {});

/// Response-scale predictions: probabilities for binomial, linear predictor
/// for gaussian.
Eigen::VectorXd predict(const GlmFit& fit, const Covariates& x,
                        std::span<const double> offset = {});

struct FoldAssignment {
  std::vector<int> labels;  // values in 1..k
  int k = 0;

  std::vector<std::size_t> members(int fold) const;
};

/// Balanced random partition of n items into k folds.
FoldAssignment make_folds(std::size_t n, int k, std::uint64_t seed);

/// Candidate learner: a logistic working model, or the marginal mean when
/// spec is empty.
struct Learner {
  std::string name;
  std::optional<DesignSpec> spec;

  static Learner mean() { return {"mean", std::nullopt}; }
  static Learner glm(std::string name, DesignSpec spec) {
    return {std::move(name), std::move(spec)};
  }
};

using Library = std::vector<Learner>;

/// {mean, main-terms logistic, logistic with all pairwise interactions}.
Library default_library(std::span<const std::string> covariates);

struct CandidateFit {
  std::string name;
  std::optional<GlmFit> glm;
  double mean = 0.0;

  Eigen::VectorXd predict(const Covariates& x) const;
};

struct SuperLearnerFit {
  std::vector<CandidateFit> candidates;
  Eigen::VectorXd weights;
  Eigen::VectorXd cv_risk;         // per candidate
  Eigen::MatrixXd cv_predictions;  // n x m, clipped
  double ensemble_cv_risk = 0.0;
  int folds = 0;
  bool degenerate = false;  // constant outcome: collapsed to the mean learner
};

inline constexpr double kSimplexClip = 1e-6;

/// Mean negative Bernoulli log-likelihood of the convex combination
/// predictions * weights.
double simplex_risk(const Eigen::MatrixXd& predictions, std::span<const double> y,
                    const Eigen::VectorXd& weights);

/// Convex weights minimizing simplex_risk, by exponentiated-gradient descent.
Eigen::VectorXd solve_simplex_weights(const Eigen::MatrixXd& cv_predictions,
                                      std::span<const double> y);

SuperLearnerFit fit_super_learner(const Library& library, const Covariates& x,
                                  std::span<const double> y, int k, std::uint64_t seed);

Eigen::VectorXd predict(const SuperLearnerFit& fit, const Covariates& x);

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace tstmle
