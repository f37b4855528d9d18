#include "tstmle/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "tstmle/rng.hpp"

namespace tstmle {

std::string_view to_string(Stage1Method m) {
  switch (m) {
    case Stage1Method::Screened: return "screened";
    case Stage1Method::Eligible: return "eligible";
    case Stage1Method::Unadjusted: return "unadjusted";
    case Stage1Method::Tmle: return "tmle";
  }
  return "?";
}

Stage1Method parse_stage1_method(std::string_view s) {
  if (s == "screened") return Stage1Method::Screened;
  if (s == "eligible") return Stage1Method::Eligible;
  if (s == "unadjusted") return Stage1Method::Unadjusted;
  if (s == "tmle") return Stage1Method::Tmle;
  throw std::invalid_argument("unknown stage-1 method '" + std::string(s) + "'");
}

double standard_error(std::span<const double> ic) {
  const std::size_t n = ic.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(ic.begin(), ic.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : ic) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

std::vector<std::string> stage1_adjustment_set(bool adjust_l) {
  std::vector<std::string> s{"w1", "w2", "w3"};
  if (adjust_l) s.emplace_back("l");
  return s;
}

Covariates individual_covariates(const ClusterRecord& cluster, bool with_l) {
  const auto n = static_cast<Eigen::Index>(cluster.n());
  Eigen::MatrixXd x(n, with_l ? 4 : 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = cluster.individuals[static_cast<std::size_t>(i)];
    x(i, 0) = r.w1;
    x(i, 1) = r.w2;
    x(i, 2) = r.w3;
    if (with_l) {
      if (!r.l) throw std::invalid_argument("cluster '" + cluster.id + "' has no l values");
      x(i, 3) = *r.l;
    }
  }
  return Covariates(stage1_adjustment_set(with_l), std::move(x));
}

namespace {

// Mean of y over the rows where cond holds, with the subset influence curve.
ClusterEndpoint subset_mean(const ClusterRecord& cluster, Stage1Method method, bool (*cond)(const IndividualRecord&),
                            const char* empty_message) {
  std::vector<double> y;
  for (const auto& r : cluster.individuals)
    if (cond(r)) y.push_back(r.y2);
  if (y.empty()) throw EndpointUndefined(cluster.id, empty_message);
  ClusterEndpoint e;
  e.method = method;
  e.estimate = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  e.numerator = e.estimate;
  e.denominator = 1.0;
  e.ic.reserve(y.size());
  for (double v : y) e.ic.push_back(v - e.estimate);
  e.se = standard_error(e.ic);
  return e;
}

}  // namespace

ClusterEndpoint estimate_endpoint_screened(const ClusterRecord& cluster) {
  return subset_mean(cluster, Stage1Method::Screened, [](const IndividualRecord& r) { return r.delta; },
                     "no measured individuals");
}

ClusterEndpoint estimate_endpoint_eligible(const ClusterRecord& cluster) {
  return subset_mean(cluster, Stage1Method::Eligible, [](const IndividualRecord& r) { return r.y1; },
                     "no individuals known to be in the target population");
}

RatioInfluence influence_curve_ratio(double num, double den, std::span<const double> ic_num,
                                     std::span<const double> ic_den) {
  if (!(den > 0.0)) throw std::invalid_argument("influence_curve_ratio: denominator must be positive");
  if (ic_num.size() != ic_den.size())
    throw std::invalid_argument("influence_curve_ratio: influence curves differ in length");
  RatioInfluence out;
  out.ic.resize(ic_num.size());
  const double ratio = num / den;
  for (std::size_t i = 0; i < ic_num.size(); ++i) out.ic[i] = (ic_num[i] - ratio * ic_den[i]) / den;
  out.se = standard_error(out.ic);
  return out;
}

ClusterEndpoint estimate_endpoint_unadjusted(const ClusterRecord& cluster) {
  const std::size_t n = cluster.n();
  double n_measured = 0.0, y1_measured = 0.0, y2_sum = 0.0;
  for (const auto& r : cluster.individuals) {
    n_measured += r.delta;
    y1_measured += r.y1;
    y2_sum += r.y2;
  }
  if (n_measured == 0.0) throw EndpointUndefined(cluster.id, "no measured individuals");
  if (y1_measured == 0.0) throw EndpointUndefined(cluster.id, "unadjusted denominator is zero");

  ClusterEndpoint e;
  e.method = Stage1Method::Unadjusted;
  e.numerator = y2_sum / static_cast<double>(n);
  e.denominator = y1_measured / n_measured;
  e.estimate = e.numerator / e.denominator;
  const double p_measured = n_measured / static_cast<double>(n);
  std::vector<double> ic_num(n), ic_den(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = cluster.individuals[i];
    ic_num[i] = r.y2 - e.numerator;
    ic_den[i] = r.delta ? (r.y1 - e.denominator) / p_measured : 0.0;
  }
  auto ic = influence_curve_ratio(e.numerator, e.denominator, ic_num, ic_den);
  e.ic = std::move(ic.ic);
  e.se = ic.se;
  return e;
}

TargetedDenominator target_denominator(std::span<const double> qbar_init, std::span<const double> g_hat,
                                       std::span<const double> delta, std::span<const double> y1) {
  const std::size_t n = qbar_init.size();
  if (g_hat.size() != n || delta.size() != n || y1.size() != n)
    throw std::invalid_argument("target_denominator: inputs are not aligned");

  std::vector<double> lq(n), h(n);
  for (std::size_t i = 0; i < n; ++i) {
    lq[i] = logit(qbar_init[i]);
    h[i] = 1.0 / g_hat[i];
  }
  auto score_and_slope = [&](double eps) {
    double s = 0.0, d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (delta[i] == 0.0) continue;
      const double q = expit(lq[i] + eps * h[i]);
      s += h[i] * (y1[i] - q);
      d -= h[i] * h[i] * q * (1.0 - q);
    }
    return std::pair{s, d};
  };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  double eps = 0.0, lo = -kInf, hi = kInf;
  double score = 0.0;
  int it = 0;
  bool done = false;
  for (; it < 200; ++it) {
    auto [s, d] = score_and_slope(eps);
    score = s;
    if (std::abs(s) < 1e-10) {
      done = true;
      break;
    }
    // The score is decreasing in eps, so its sign brackets the root.
    if (s > 0) lo = eps; else hi = eps;
    if (std::isfinite(lo) && std::isfinite(hi) && hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(eps))) {
      done = true;  // bracket at machine resolution
      break;
    }
    double next = d < 0.0 ? eps - s / d : std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(next) || next <= lo || next >= hi) {
      if (std::isfinite(lo) && std::isfinite(hi)) {
        next = 0.5 * (lo + hi);
      } else {
        const double jump = std::max(1.0, 2.0 * std::abs(eps));
        next = s > 0 ? eps + jump : eps - jump;
      }
    }
    eps = next;
  }
  if (!done)
    throw std::runtime_error("target_denominator: no convergence after 200 iterations (score " +
                             std::to_string(score) + ")");

  TargetedDenominator out;
  out.epsilon = eps;
  out.score = score;
  out.iterations = it;
  out.qbar_star.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.qbar_star[i] = expit(lq[i] + eps * h[i]);
  return out;
}

ClusterEndpoint tmle_endpoint_from_nuisance(const ClusterRecord& cluster, std::span<const double> qbar_in,
                                            std::span<const double> g_in) {
  const std::size_t n = cluster.n();
  if (qbar_in.size() != n || g_in.size() != n)
    throw std::invalid_argument("tmle_endpoint_from_nuisance: predictions not aligned with cluster");

  std::vector<double> delta(n), y1(n), qbar(n), g(n);
  double y2_sum = 0.0, n_measured = 0.0, y1_measured = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = cluster.individuals[i];
    delta[i] = r.delta;
    y1[i] = r.y1;
    y2_sum += r.y2;
    n_measured += r.delta;
    y1_measured += r.y1;
    qbar[i] = std::clamp(qbar_in[i], kQbarLower, kQbarUpper);
    g[i] = std::clamp(g_in[i], kGLower, 1.0);
  }
  if (n_measured == 0.0) throw EndpointUndefined(cluster.id, "no measured individuals");
  if (y1_measured == 0.0)
    throw EndpointUndefined(cluster.id, "no measured individual is in the target population");

  ClusterEndpoint e;
  e.method = Stage1Method::Tmle;
  e.numerator = y2_sum / static_cast<double>(n);

  std::vector<double> qstar;
  if (y1_measured == n_measured) {
    // Every measured individual is in the target population: the fluctuation
    // likelihood is maximized in the limit eps -> +inf, where qbar_star = 1.
    qstar.assign(n, 1.0);
  } else {
    auto t = target_denominator(qbar, g, delta, y1);
    e.epsilon = t.epsilon;
    qstar = std::move(t.qbar_star);
  }
  double den = std::accumulate(qstar.begin(), qstar.end(), 0.0) / static_cast<double>(n);
  if (den < kDenominatorFloor) {
    den = kDenominatorFloor;
    e.denominator_floored = true;
  }
  e.denominator = den;
  e.estimate = e.numerator / e.denominator;

  std::vector<double> ic_num(n), ic_den(n);
  for (std::size_t i = 0; i < n; ++i) {
    ic_num[i] = cluster.individuals[i].y2 - e.numerator;
    ic_den[i] = delta[i] / g[i] * (y1[i] - qstar[i]) + qstar[i] - den;
  }
  auto ic = influence_curve_ratio(e.numerator, e.denominator, ic_num, ic_den);
  e.ic = std::move(ic.ic);
  e.se = ic.se;
  return e;
}

NuisanceFits fit_nuisance(const ClusterRecord& cluster, const Stage1Options& options, std::uint64_t seed) {
  const std::size_t n = cluster.n();
  const Covariates x = individual_covariates(cluster, options.adjust_l);
  const auto adjustment = stage1_adjustment_set(options.adjust_l);
  const Library library = options.library.empty() ? default_library(adjustment) : options.library;

  std::vector<std::size_t> measured;
  std::vector<double> y1_measured, delta(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = cluster.individuals[i];
    delta[i] = r.delta;
    if (r.delta) {
      measured.push_back(i);
      y1_measured.push_back(r.y1);
    }
  }
  if (measured.size() < 2)
    throw EndpointUndefined(cluster.id, "fewer than 2 measured individuals");

  // Small measured subsets cannot support the interaction model.
  Library q_library;
  for (const auto& l : library) {
    const bool has_interaction =
        l.spec && std::any_of(l.spec->terms().begin(), l.spec->terms().end(),
                              [](const Term& t) { return !t.second.empty(); });
    if (measured.size() < 20 && has_interaction) continue;
    q_library.push_back(l);
  }

  NuisanceFits fits;
  const int kq = std::min<int>(options.folds, static_cast<int>(measured.size()));
  fits.qbar = fit_super_learner(q_library, x.subset(measured), y1_measured, kq, derive_seed(seed, {1}));
  const Eigen::VectorXd q = predict(fits.qbar, x);
  fits.qbar_init.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    fits.qbar_init[i] = std::clamp(q[static_cast<Eigen::Index>(i)], kQbarLower, kQbarUpper);

  fits.g_hat.assign(n, 1.0);
  if (measured.size() < n) {
    const int kg = std::min<int>(options.folds, static_cast<int>(n));
    fits.g = fit_super_learner(library, x, delta, kg, derive_seed(seed, {2}));
    const Eigen::VectorXd g = predict(*fits.g, x);
    for (std::size_t i = 0; i < n; ++i)
      fits.g_hat[i] = std::clamp(g[static_cast<Eigen::Index>(i)], kGLower, 1.0);
  }
  return fits;
}

ClusterEndpoint estimate_endpoint_tmle(const ClusterRecord& cluster, const Stage1Options& options,
                                       std::uint64_t seed) {
  bool any_measured = false, any_y1 = false;
  for (const auto& r : cluster.individuals) {
    any_measured |= r.delta;
    any_y1 |= r.y1;
  }
  if (!any_measured) throw EndpointUndefined(cluster.id, "no measured individuals");
  if (!any_y1) throw EndpointUndefined(cluster.id, "no measured individual is in the target population");

  // Fit on a canonical row order so fold assignment, and hence the estimate,
  // does not depend on how individuals happen to be listed.
  const std::size_t n = cluster.n();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto key = [&](std::size_t i) {
    const auto& r = cluster.individuals[i];
    return std::tuple(r.w1, r.w2, r.w3, r.l.value_or(0.0), r.delta, r.y1, r.y2);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  ClusterRecord sorted = cluster;
  for (std::size_t i = 0; i < n; ++i) sorted.individuals[i] = cluster.individuals[order[i]];

  const auto fits = fit_nuisance(sorted, options, seed);
  auto e = tmle_endpoint_from_nuisance(sorted, fits.qbar_init, fits.g_hat);
  std::vector<double> ic(n);
  for (std::size_t i = 0; i < n; ++i) ic[order[i]] = e.ic[i];
  e.ic = std::move(ic);
  return e;
}

ClusterEndpoint estimate_endpoint(const ClusterRecord& cluster, Stage1Method method,
                                  const Stage1Options& options, std::uint64_t seed) {
  switch (method) {
    case Stage1Method::Screened: return estimate_endpoint_screened(cluster);
    case Stage1Method::Eligible: return estimate_endpoint_eligible(cluster);
    case Stage1Method::Unadjusted: return estimate_endpoint_unadjusted(cluster);
    case Stage1Method::Tmle: return estimate_endpoint_tmle(cluster, options, seed);
  }
  throw std::invalid_argument("unknown stage-1 method");
}

}  // namespace tstmle
