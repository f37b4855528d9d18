#include "tstmle/stage2.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "tstmle/stage1.hpp"

namespace tstmle {

std::string_view to_string(Stage2Method m) {
  return m == Stage2Method::Unadjusted ? "unadjusted" : "tmle-aps";
}

Stage2Method parse_stage2_method(std::string_view s) {
  if (s == "unadjusted" || s == "unadj") return Stage2Method::Unadjusted;
  if (s == "tmle-aps" || s == "tmle") return Stage2Method::TmleAps;
  throw std::invalid_argument("unknown stage-2 method '" + std::string(s) + "'");
}

Covariates cluster_covariates(std::span<const ClusterLevelRow> rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), 6);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto& r = rows[j];
    x.row(static_cast<Eigen::Index>(j)) << (r.a ? 1.0 : 0.0), r.e1c, r.e2c, r.w1c, r.w2c, r.w3c;
  }
  return Covariates({"a", "e1c", "e2c", "w1c", "w2c", "w3c"}, std::move(x));
}

std::vector<Stage2Candidate> default_stage2_candidates() {
  std::vector<Stage2Candidate> c{{std::nullopt}};
  for (const auto& n : stage2_covariate_names()) c.push_back({n});
  return c;
}

DesignSpec outcome_spec(const Stage2Candidate& c) {
  std::vector<Term> t{Term::main("a")};
  if (c.covariate) t.push_back(Term::main(*c.covariate));
  return DesignSpec(std::move(t));
}

std::optional<DesignSpec> propensity_spec(const Stage2Candidate& c) {
  if (!c.covariate) return std::nullopt;
  return DesignSpec({Term::main(*c.covariate)});
}

ApsSelection ApsSelection::unadjusted() {
  ApsSelection s;
  s.q_spec = outcome_spec(s.q);
  return s;
}

double t_quantile(double p, double df) {
  boost::math::students_t dist(df);
  return boost::math::quantile(dist, p);
}

TInference inference_t(double psi, std::span<const double> ic, int df) {
  if (df < 1) throw std::invalid_argument("inference_t: df must be at least 1");
  if (ic.size() < 2) throw std::invalid_argument("inference_t: need at least 2 influence-curve values");
  TInference out;
  out.se = standard_error(ic);
  if (out.se == 0.0) {
    out.ci_lo = out.ci_hi = psi;
    out.p_value = psi == 0.0 ? 1.0 : 0.0;
    return out;
  }
  const double q = t_quantile(1.0 - kAlpha / 2.0, df);
  out.ci_lo = psi - q * out.se;
  out.ci_hi = psi + q * out.se;
  boost::math::students_t dist(df);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(psi / out.se)));
  out.p_value = std::min(1.0, out.p_value);
  return out;
}

namespace {

void require_both_arms(std::span<const ClusterLevelRow> rows) {
  std::size_t n1 = 0;
  for (const auto& r : rows) n1 += r.a;
  const std::size_t n0 = rows.size() - n1;
  if (n1 < 2 || n0 < 2)
    throw std::invalid_argument("stage 2 needs at least 2 clusters per arm (have " + std::to_string(n0) +
                                " control, " + std::to_string(n1) + " intervention)");
}

void fill_inference(EffectEstimate& e) {
  e.df = static_cast<int>(e.ic.size()) - 2;
  auto t = inference_t(e.psi, e.ic, e.df);
  e.se = t.se;
  e.ci_lo = t.ci_lo;
  e.ci_hi = t.ci_hi;
  e.p_value = t.p_value;
}

// Working models fit on one set of rows, applied to possibly different rows.
struct Stage2Fit {
  GlmFit q;
  std::optional<GlmFit> g;
  double eps1 = 0.0;
  double eps0 = 0.0;
};

struct Stage2Predictions {
  std::vector<double> q1, q0, qa, g, h1, h0;
  bool truncated = false;
};

Stage2Predictions apply_models(const Stage2Fit& f, std::span<const ClusterLevelRow> rows,
                               const Covariates& x) {
  const std::size_t n = rows.size();
  Stage2Predictions p;
  const Eigen::VectorXd q1 = predict(f.q, x.with_constant("a", 1.0));
  const Eigen::VectorXd q0 = predict(f.q, x.with_constant("a", 0.0));
  Eigen::VectorXd g = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 0.5);
  if (f.g) g = predict(*f.g, x);
  p.q1.resize(n);
  p.q0.resize(n);
  p.qa.resize(n);
  p.g.resize(n);
  p.h1.resize(n);
  p.h0.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    double gj = g[jj];
    if (gj < kPropensityLower || gj > kPropensityUpper) {
      gj = std::clamp(gj, kPropensityLower, kPropensityUpper);
      p.truncated = true;
    }
    p.g[j] = gj;
    p.h1[j] = rows[j].a ? 1.0 / gj : 0.0;
    p.h0[j] = rows[j].a ? 0.0 : -1.0 / (1.0 - gj);
    p.q1[j] = q1[jj] + f.eps1 / gj;
    p.q0[j] = q0[jj] - f.eps0 / (1.0 - gj);
    p.qa[j] = rows[j].a ? p.q1[j] : p.q0[j];
  }
  return p;
}

Stage2Fit fit_models(std::span<const ClusterLevelRow> rows, const Covariates& x, const Stage2Candidate& qc,
                     const Stage2Candidate& gc) {
  std::vector<double> y(rows.size()), a(rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    y[j] = rows[j].y;
    a[j] = rows[j].a;
  }
  Stage2Fit f;
  f.q = fit_glm(outcome_spec(qc), Family::Gaussian, x, y);
  if (auto gs = propensity_spec(gc)) f.g = fit_glm(*gs, Family::Binomial, x, a);

  // Least squares of the residual on (H1, H0); the clever covariates have
  // disjoint support so the two coefficients decouple.
  auto p = apply_models(f, rows, x);
  double num1 = 0, den1 = 0, num0 = 0, den0 = 0;
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const double r = y[j] - p.qa[j];
    num1 += p.h1[j] * r;
    den1 += p.h1[j] * p.h1[j];
    num0 += p.h0[j] * r;
    den0 += p.h0[j] * p.h0[j];
  }
  f.eps1 = den1 > 0 ? num1 / den1 : 0.0;
  f.eps0 = den0 > 0 ? num0 / den0 : 0.0;
  return f;
}

// Influence curve and point estimate of the targeted substitution estimator
// on the rows the predictions belong to.
std::pair<double, std::vector<double>> tmle_ic(std::span<const ClusterLevelRow> rows, const Stage2Predictions& p) {
  const std::size_t n = rows.size();
  double psi = 0.0;
  for (std::size_t j = 0; j < n; ++j) psi += p.q1[j] - p.q0[j];
  psi /= static_cast<double>(n);
  std::vector<double> ic(n);
  for (std::size_t j = 0; j < n; ++j)
    ic[j] = (p.h1[j] + p.h0[j]) * (rows[j].y - p.qa[j]) + p.q1[j] - p.q0[j] - psi;
  return {psi, std::move(ic)};
}

template <class T>
std::vector<T> pick(std::span<const T> v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

EffectEstimate estimate_effect_unadjusted(std::span<const ClusterLevelRow> rows) {
  require_both_arms(rows);
  const double n = static_cast<double>(rows.size());
  double s1 = 0, s0 = 0, n1 = 0, n0 = 0;
  for (const auto& r : rows) {
    if (r.a) {
      s1 += r.y;
      n1 += 1;
    } else {
      s0 += r.y;
      n0 += 1;
    }
  }
  const double m1 = s1 / n1, m0 = s0 / n0;
  const double p1 = n1 / n, p0 = n0 / n;
  EffectEstimate e;
  e.method = Stage2Method::Unadjusted;
  e.psi = m1 - m0;
  e.ic.reserve(rows.size());
  for (const auto& r : rows) e.ic.push_back(r.a ? (r.y - m1) / p1 : -(r.y - m0) / p0);
  fill_inference(e);
  return e;
}

double aps_cv_risk(std::span<const ClusterLevelRow> rows, const Stage2Candidate& q, const Stage2Candidate& g,
                   const FoldAssignment& folds) {
  const Covariates x = cluster_covariates(rows);
  double total = 0.0;
  std::vector<std::size_t> train, valid;
  for (int v = 1; v <= folds.k; ++v) {
    train.clear();
    valid.clear();
    for (std::size_t j = 0; j < rows.size(); ++j) (folds.labels[j] == v ? valid : train).push_back(j);
    const auto rt = pick(rows, std::span<const std::size_t>(train));
    const auto rv = pick(rows, std::span<const std::size_t>(valid));
    const auto fit = fit_models(rt, x.subset(train), q, g);
    const auto pred = apply_models(fit, rv, x.subset(valid));
    const auto [psi, ic] = tmle_ic(rv, pred);
    for (double v2 : ic) total += v2 * v2;
  }
  return total / static_cast<double>(rows.size());
}

ApsSelection aps_select(std::span<const ClusterLevelRow> rows, std::span<const Stage2Candidate> candidates_q,
                        std::span<const Stage2Candidate> candidates_g, int k, std::uint64_t seed) {
  const Stage2Candidate none{};
  auto has_default = [&](std::span<const Stage2Candidate> c) {
    return std::find(c.begin(), c.end(), none) != c.end();
  };
  if (candidates_q.empty() || candidates_g.empty() || !has_default(candidates_q) || !has_default(candidates_g))
    throw std::invalid_argument("aps_select: candidate lists must include the unadjusted default");

  ApsSelection sel = ApsSelection::unadjusted();
  if (rows.size() < static_cast<std::size_t>(std::max(k, 2))) return sel;
  const auto folds = make_folds(rows.size(), k, seed);

  double best = std::numeric_limits<double>::infinity();
  for (const auto& qc : candidates_q) {
    const double r = aps_cv_risk(rows, qc, none, folds);
    sel.candidate_risks.push_back({qc.label(), none.label(), r});
    if (r < best) {
      best = r;
      sel.q = qc;
    }
  }
  for (const auto& gc : candidates_g) {
    if (gc == none) continue;  // already evaluated with the chosen outcome model
    const double r = aps_cv_risk(rows, sel.q, gc, folds);
    sel.candidate_risks.push_back({sel.q.label(), gc.label(), r});
    if (r < best) {
      best = r;
      sel.g = gc;
    }
  }
  sel.cv_risk = best;
  sel.q_spec = outcome_spec(sel.q);
  sel.g_spec = propensity_spec(sel.g);
  return sel;
}

EffectEstimate estimate_effect_tmle(std::span<const ClusterLevelRow> rows, const ApsSelection& selection) {
  require_both_arms(rows);
  const Covariates x = cluster_covariates(rows);
  const auto fit = fit_models(rows, x, selection.q, selection.g);
  const auto pred = apply_models(fit, rows, x);
  auto [psi, ic] = tmle_ic(rows, pred);
  EffectEstimate e;
  e.method = Stage2Method::TmleAps;
  e.psi = psi;
  e.ic = std::move(ic);
  e.selection = selection;
  e.g_truncated = pred.truncated;
  fill_inference(e);
  return e;
}

}  // namespace tstmle
