#include "tstmle/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tstmle/rng.hpp"

namespace tstmle {

// ---------------------------------------------------------------------------
// Covariates

Covariates::Covariates(std::vector<std::string> names, Eigen::MatrixXd values)
    : names_(std::move(names)), values_(std::move(values)) {
  if (static_cast<Eigen::Index>(names_.size()) != values_.cols())
    throw std::invalid_argument("Covariates: name count does not match column count");
}

bool Covariates::has(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

Eigen::Index Covariates::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end())
    throw std::invalid_argument("missing covariate '" + std::string(name) + "'");
  return it - names_.begin();
}

Covariates Covariates::subset(std::span<const std::size_t> rows) const {
  Eigen::MatrixXd v(static_cast<Eigen::Index>(rows.size()), values_.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    v.row(static_cast<Eigen::Index>(i)) = values_.row(static_cast<Eigen::Index>(rows[i]));
  return Covariates(names_, std::move(v));
}

Covariates Covariates::with_constant(std::string_view name, double value) const {
  Covariates out = *this;
  out.values_.col(index_of(name)).setConstant(value);
  return out;
}

// ---------------------------------------------------------------------------
// Design specification

Term Term::interaction(std::string a, std::string b) {
  if (a == b) throw std::invalid_argument("interaction of '" + a + "' with itself");
  if (b < a) std::swap(a, b);
  return {std::move(a), std::move(b)};
}

std::string Term::label() const {
  if (is_intercept()) return "(intercept)";
  if (second.empty()) return first;
  return first + ":" + second;
}

DesignSpec::DesignSpec() : terms_{Term::intercept()} {}

DesignSpec::DesignSpec(std::vector<Term> terms) {
  if (std::none_of(terms.begin(), terms.end(), [](const Term& t) { return t.is_intercept(); }))
    terms_.push_back(Term::intercept());
  for (auto& t : terms) {
    if (std::find(terms_.begin(), terms_.end(), t) != terms_.end())
      throw std::invalid_argument("duplicate design term '" + t.label() + "'");
    terms_.push_back(std::move(t));
  }
  // Keep the intercept first.
  std::stable_partition(terms_.begin(), terms_.end(), [](const Term& t) { return t.is_intercept(); });
}

DesignSpec DesignSpec::main_terms(std::span<const std::string> names) {
  std::vector<Term> t;
  for (const auto& n : names) t.push_back(Term::main(n));
  return DesignSpec(std::move(t));
}

DesignSpec DesignSpec::pairwise(std::span<const std::string> names) {
  std::vector<Term> t;
  for (const auto& n : names) t.push_back(Term::main(n));
  for (std::size_t i = 0; i < names.size(); ++i)
    for (std::size_t j = i + 1; j < names.size(); ++j)
      t.push_back(Term::interaction(names[i], names[j]));
  return DesignSpec(std::move(t));
}

std::vector<std::string> DesignSpec::covariates() const {
  std::vector<std::string> out;
  auto add = [&](const std::string& s) {
    if (!s.empty() && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  };
  for (const auto& t : terms_) {
    add(t.first);
    add(t.second);
  }
  return out;
}

Eigen::MatrixXd DesignSpec::design(const Covariates& x) const {
  const auto n = static_cast<Eigen::Index>(x.rows());
  Eigen::MatrixXd d(n, static_cast<Eigen::Index>(terms_.size()));
  for (std::size_t c = 0; c < terms_.size(); ++c) {
    const auto& t = terms_[c];
    const auto col = static_cast<Eigen::Index>(c);
    if (t.is_intercept()) {
      d.col(col).setOnes();
    } else if (t.second.empty()) {
      d.col(col) = x.values().col(x.index_of(t.first));
    } else {
      d.col(col) = x.values().col(x.index_of(t.first)).cwiseProduct(
          x.values().col(x.index_of(t.second)));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// GLM

namespace {

Eigen::VectorXd to_vector(std::span<const double> s, Eigen::Index n, double fill) {
  if (s.empty()) return Eigen::VectorXd::Constant(n, fill);
  if (static_cast<Eigen::Index>(s.size()) != n)
    throw std::invalid_argument("vector length does not match the number of rows");
  return Eigen::Map<const Eigen::VectorXd>(s.data(), n);
}

double binomial_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& eta,
                         const Eigen::VectorXd& w) {
  double d = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (w[i] == 0.0) continue;
    // log(1 + exp(eta)) - y * eta, stable in both tails.
    const double e = eta[i];
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    d += w[i] * (softplus - y[i] * e);
  }
  return 2.0 * d;
}

// Columns of X (restricted to rows with positive weight) that are linearly
// independent of the columns before them, in original order. Greedy
// Gram-Schmidt, so later terms are the ones dropped.
std::vector<Eigen::Index> independent_columns(const Eigen::MatrixXd& x, const Eigen::VectorXd& w) {
  const Eigen::MatrixXd xs = w.cwiseSqrt().asDiagonal() * x;
  Eigen::MatrixXd basis(xs.rows(), 0);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < xs.cols(); ++c) {
    const Eigen::VectorXd v = xs.col(c);
    const double norm = v.norm();
    if (norm == 0.0) continue;
    Eigen::VectorXd r = v;
    for (int pass = 0; pass < 2; ++pass) r -= basis * (basis.transpose() * r);
    if (r.norm() <= 1e-9 * norm) continue;
    basis.conservativeResize(Eigen::NoChange, basis.cols() + 1);
    basis.col(basis.cols() - 1) = r / r.norm();
    keep.push_back(c);
  }
  return keep;
}

}  // namespace

GlmFit fit_glm(const DesignSpec& spec, Family family, const Covariates& x,
               std::span<const double> y_in, std::span<const double> weights,
               std::span<const double> offset, const GlmOptions& options) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  if (static_cast<Eigen::Index>(y_in.size()) != n)
    throw std::invalid_argument("fit_glm: outcome length does not match covariate rows");
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(y_in.data(), n);
  const Eigen::VectorXd w = to_vector(weights, n, 1.0);
  const Eigen::VectorXd off = to_vector(offset, n, 0.0);
  if ((w.array() < 0.0).any()) throw std::invalid_argument("fit_glm: negative weight");
  if (!(w.array() > 0.0).any())
    throw std::invalid_argument("fit_glm: no observation with positive weight");
  if (family == Family::Binomial && ((y.array() != 0.0) && (y.array() != 1.0)).any())
    throw std::invalid_argument("fit_glm: binomial outcomes must be 0 or 1");

  const Eigen::MatrixXd full = spec.design(x);
  const auto keep = independent_columns(full, w);
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) X.col(static_cast<Eigen::Index>(c)) = full.col(keep[c]);

  GlmFit fit;
  fit.spec = spec;
  fit.family = family;
  for (Eigen::Index c = 0, k = 0; c < full.cols(); ++c) {
    if (k < static_cast<Eigen::Index>(keep.size()) && keep[static_cast<std::size_t>(k)] == c) {
      ++k;
    } else {
      fit.dropped_terms.push_back(spec.terms()[static_cast<std::size_t>(c)].label());
    }
  }

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
  auto score_of = [&](const Eigen::VectorXd& mu) -> Eigen::VectorXd {
    return X.transpose() * (w.array() * (y - mu).array()).matrix();
  };

  if (family == Family::Gaussian) {
    const Eigen::MatrixXd xtwx = X.transpose() * w.asDiagonal() * X;
    beta = xtwx.ldlt().solve(X.transpose() * (w.array() * (y - off).array()).matrix());
    const Eigen::VectorXd mu = off + X * beta;
    fit.max_score = X.cols() ? score_of(mu).cwiseAbs().maxCoeff() : 0.0;
    fit.iterations = 1;
    const double scale = X.cols() ? (X.transpose() * (w.array() * y.array()).matrix()).cwiseAbs().maxCoeff() : 0.0;
    fit.converged = beta.allFinite() && fit.max_score < options.tolerance * std::max(1.0, scale);
  } else {
    Eigen::VectorXd eta = off + X * beta;
    double dev = binomial_deviance(y, eta, w);
    for (int it = 0; it < options.max_iterations; ++it) {
      const Eigen::VectorXd mu = eta.unaryExpr([](double e) { return expit(e); });
      const Eigen::VectorXd score = score_of(mu);
      fit.iterations = it;
      fit.max_score = score.size() ? score.cwiseAbs().maxCoeff() : 0.0;
      if (fit.max_score < options.tolerance) {
        fit.converged = true;
        break;
      }
      const Eigen::VectorXd wt = w.array() * mu.array() * (1.0 - mu.array());
      const Eigen::MatrixXd info = X.transpose() * wt.asDiagonal() * X;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
      Eigen::VectorXd step = ldlt.solve(score);
      if (!step.allFinite()) break;

      // Step halving on the deviance.
      double new_dev = dev;
      Eigen::VectorXd new_beta = beta;
      bool improved = false;
      for (int h = 0; h < 30; ++h) {
        new_beta = beta + step;
        const Eigen::VectorXd new_eta = off + X * new_beta;
        new_dev = binomial_deviance(y, new_eta, w);
        if (std::isfinite(new_dev) && new_dev <= dev + 1e-12 * (1.0 + dev)) {
          improved = true;
          eta = new_eta;
          break;
        }
        step *= 0.5;
      }
      if (!improved) break;
      beta = new_beta;
      const double change = dev - new_dev;
      dev = new_dev;
      if (beta.cwiseAbs().maxCoeff() > options.coefficient_bound) break;  // separation
      if (change < 1e-13 * (1.0 + dev) && fit.iterations > 0) {
        // Stalled without meeting the score tolerance.
        const Eigen::VectorXd mu2 = eta.unaryExpr([](double e) { return expit(e); });
        fit.max_score = score_of(mu2).cwiseAbs().maxCoeff();
        fit.converged = fit.max_score < options.tolerance;
        fit.iterations = it + 1;
        break;
      }
      fit.iterations = it + 1;
    }
    if (!fit.converged) {
      beta = beta.cwiseMax(-options.coefficient_bound).cwiseMin(options.coefficient_bound);
      const Eigen::VectorXd mu = (off + X * beta).unaryExpr([](double e) { return expit(e); });
      fit.max_score = score_of(mu).cwiseAbs().maxCoeff();
    }
  }

  fit.coefficients = Eigen::VectorXd::Zero(full.cols());
  for (std::size_t c = 0; c < keep.size(); ++c) fit.coefficients[keep[c]] = beta[static_cast<Eigen::Index>(c)];
  return fit;
}

Eigen::VectorXd predict(const GlmFit& fit, const Covariates& x, std::span<const double> offset) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  Eigen::VectorXd eta = fit.spec.design(x) * fit.coefficients + to_vector(offset, n, 0.0);
  if (fit.family == Family::Gaussian) return eta;
  // expit saturates to exactly 0 or 1 in double precision beyond |eta| ~ 37.
  return eta.unaryExpr([](double e) { return expit(std::clamp(e, -30.0, 30.0)); });
}

// ---------------------------------------------------------------------------
// Folds

std::vector<std::size_t> FoldAssignment::members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == fold) out.push_back(i);
  return out;
}

FoldAssignment make_folds(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be at least 2");
  if (static_cast<std::size_t>(k) > n)
    throw std::invalid_argument("make_folds: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  FoldAssignment f;
  f.k = k;
  f.labels.assign(n, 0);
  for (std::size_t pos = 0; pos < n; ++pos) f.labels[perm[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k)) + 1;
  return f;
}

// ---------------------------------------------------------------------------
// Super Learner

Library default_library(std::span<const std::string> covariates) {
  return {Learner::mean(), Learner::glm("glm", DesignSpec::main_terms(covariates)),
          Learner::glm("glm.interaction", DesignSpec::pairwise(covariates))};
}

Eigen::VectorXd CandidateFit::predict(const Covariates& x) const {
  if (glm) return tstmle::predict(*glm, x);
  return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(x.rows()), mean);
}

namespace {

CandidateFit fit_candidate(const Learner& learner, const Covariates& x, std::span<const double> y) {
  CandidateFit c;
  c.name = learner.name;
  if (learner.spec) {
    c.glm = fit_glm(*learner.spec, Family::Binomial, x, y);
  } else {
    c.mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  }
  return c;
}

double clip(double p) { return std::clamp(p, kSimplexClip, 1.0 - kSimplexClip); }

}  // namespace

double simplex_risk(const Eigen::MatrixXd& predictions, std::span<const double> y,
                    const Eigen::VectorXd& weights) {
  const Eigen::VectorXd p = predictions * weights;
  double r = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = clip(p[i]);
    r -= y[static_cast<std::size_t>(i)] > 0.5 ? std::log(pi) : std::log1p(-pi);
  }
  return r / static_cast<double>(p.size());
}

Eigen::VectorXd solve_simplex_weights(const Eigen::MatrixXd& z, std::span<const double> y) {
  const auto m = z.cols();
  const auto n = z.rows();
  if (m == 1) return Eigen::VectorXd::Ones(1);

  auto gradient = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd p = z * w;
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pi = clip(p[i]);
      r[i] = y[static_cast<std::size_t>(i)] > 0.5 ? -1.0 / pi : 1.0 / (1.0 - pi);
    }
    return Eigen::VectorXd(z.transpose() * r / static_cast<double>(n));
  };

  Eigen::VectorXd w = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
  double f = simplex_risk(z, y, w);
  double eta = 1.0;
  for (int it = 0; it < 10000; ++it) {
    const Eigen::VectorXd g = gradient(w);
    // Frank-Wolfe gap bounds the suboptimality of w.
    const double gap = g.dot(w) - g.minCoeff();
    if (gap < 1e-12) break;
    bool accepted = false;
    double f_new = f;
    Eigen::VectorXd w_new;
    for (int h = 0; h < 60; ++h) {
      const Eigen::VectorXd logits = w.array().log() - eta * (g.array() - g.minCoeff());
      w_new = logits.array().exp();
      w_new /= w_new.sum();
      f_new = simplex_risk(z, y, w_new);
      if (f_new <= f) {
        accepted = true;
        break;
      }
      eta *= 0.5;
    }
    if (!accepted) break;
    const double change = f - f_new;
    w = w_new;
    f = f_new;
    eta *= 2.0;
    if (change < 1e-10 && gap < 1e-8) break;
  }

  // A vertex can beat the interior iterate when the optimum lies on the
  // boundary and multiplicative updates approach it slowly.
  for (Eigen::Index j = 0; j < m; ++j) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(m);
    v[j] = 1.0;
    const double fv = simplex_risk(z, y, v);
    if (fv < f) {
      f = fv;
      w = v;
    }
  }
  return w;
}

SuperLearnerFit fit_super_learner(const Library& library, const Covariates& x,
                                  std::span<const double> y, int k, std::uint64_t seed) {
  const std::size_t n = y.size();
  if (library.empty()) throw std::invalid_argument("fit_super_learner: empty library");
  if (n != x.rows()) throw std::invalid_argument("fit_super_learner: outcome length mismatch");
  if (n < static_cast<std::size_t>(k))
    throw std::invalid_argument("fit_super_learner: fewer observations than folds");
  for (double v : y)
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("fit_super_learner: outcomes must be binary");

  SuperLearnerFit out;
  out.folds = k;
  const bool constant = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
  if (constant) {
    out.degenerate = true;
    out.candidates.push_back(fit_candidate(Learner::mean(), x, y));
    out.weights = Eigen::VectorXd::Ones(1);
    out.cv_predictions = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n), 1, clip(y[0]));
    out.cv_risk = Eigen::VectorXd::Constant(1, simplex_risk(out.cv_predictions, y, out.weights));
    out.ensemble_cv_risk = out.cv_risk[0];
    return out;
  }

  const auto m = static_cast<Eigen::Index>(library.size());
  const auto folds = make_folds(n, k, seed);
  out.cv_predictions.resize(static_cast<Eigen::Index>(n), m);
  std::vector<std::size_t> train, valid;
  std::vector<double> ytrain;
  for (int v = 1; v <= k; ++v) {
    train.clear();
    valid.clear();
    ytrain.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (folds.labels[i] == v) {
        valid.push_back(i);
      } else {
        train.push_back(i);
        ytrain.push_back(y[i]);
      }
    }
    const Covariates xt = x.subset(train);
    const Covariates xv = x.subset(valid);
    for (Eigen::Index c = 0; c < m; ++c) {
      const auto fit = fit_candidate(library[static_cast<std::size_t>(c)], xt, ytrain);
      const Eigen::VectorXd p = fit.predict(xv);
      for (std::size_t r = 0; r < valid.size(); ++r)
        out.cv_predictions(static_cast<Eigen::Index>(valid[r]), c) = clip(p[static_cast<Eigen::Index>(r)]);
    }
  }

  out.cv_risk.resize(m);
  for (Eigen::Index c = 0; c < m; ++c) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(m);
    e[c] = 1.0;
    out.cv_risk[c] = simplex_risk(out.cv_predictions, y, e);
  }
  out.weights = solve_simplex_weights(out.cv_predictions, y);
  out.ensemble_cv_risk = simplex_risk(out.cv_predictions, y, out.weights);
  for (const auto& learner : library) out.candidates.push_back(fit_candidate(learner, x, y));
  return out;
}

Eigen::VectorXd predict(const SuperLearnerFit& fit, const Covariates& x) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(x.rows()));
  for (std::size_t c = 0; c < fit.candidates.size(); ++c) {
    const double w = fit.weights[static_cast<Eigen::Index>(c)];
    if (w == 0.0) continue;
    p += w * fit.candidates[c].predict(x);
  }
  return p;
}

}  // namespace tstmle
