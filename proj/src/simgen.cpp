#include "tstmle/simgen.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

#include "tstmle/learners.hpp"
#include "tstmle/parallel.hpp"

namespace tstmle {

using nlohmann::json;

namespace {

// Reads `key` into `field` when present and records it as consumed.
template <class T>
void read_key(const json& j, const char* key, T& field, std::set<std::string>& seen) {
  if (!j.contains(key)) return;
  seen.insert(key);
  field = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!seen.count(it.key()))
      throw std::invalid_argument("unknown key '" + it.key() + "' in " + where);
}

#define TSTMLE_FIELDS_TARGET(X) X(intercept) X(e1c) X(e2c) X(w1) X(w2) X(w3) X(u_e1c) X(u_e2c)
#define TSTMLE_FIELDS_BRANCH(X) X(intercept) X(a) X(w1) X(w2_a) X(w3) X(e1c) X(e2c) X(u_e1c) X(u_e2c)
#define TSTMLE_FIELDS_OUTCOME(X) X(intercept) X(a) X(w1) X(w2) X(e1c) X(e2c) X(a_w3)
#define TSTMLE_FIELDS_EXTENDED(X) \
  X(l_intercept) X(l_e1c) X(l_w1) X(l_w2) X(l_a) X(y1star_l) X(y1star_a) X(delta_l) X(y2_l)
#define TSTMLE_FIELDS_TOP(X)                                                                            \
  X(j) X(n_mean) X(n_sd) X(min_cluster_size) X(u_e1c_max) X(u_e2c_max) X(e_sd) X(w1_lo) X(w1_hi) X(p_w2) \
      X(p_w3) X(p_arm) X(truth_clusters)

template <class S>
S read_struct(const json& j, const std::string& where);

#define TSTMLE_READ(f) read_key(j, #f, s.f, seen);
#define TSTMLE_WRITE(f) out[#f] = s.f;

template <>
TargetModel read_struct<TargetModel>(const json& j, const std::string& where) {
  TargetModel s;
  std::set<std::string> seen;
  TSTMLE_FIELDS_TARGET(TSTMLE_READ)
  reject_unknown(j, seen, where);
  return s;
}

MeasurementBranch read_branch(const json& j, MeasurementBranch s, const std::string& where) {
  std::set<std::string> seen;
  TSTMLE_FIELDS_BRANCH(TSTMLE_READ)
  reject_unknown(j, seen, where);
  return s;
}

template <>
OutcomeModel read_struct<OutcomeModel>(const json& j, const std::string& where) {
  OutcomeModel s;
  std::set<std::string> seen;
  TSTMLE_FIELDS_OUTCOME(TSTMLE_READ)
  reject_unknown(j, seen, where);
  return s;
}

template <>
ExtendedParams read_struct<ExtendedParams>(const json& j, const std::string& where) {
  ExtendedParams s;
  std::set<std::string> seen;
  TSTMLE_FIELDS_EXTENDED(TSTMLE_READ)
  reject_unknown(j, seen, where);
  return s;
}

json write(const TargetModel& s) {
  json out;
  TSTMLE_FIELDS_TARGET(TSTMLE_WRITE)
  return out;
}
json write(const MeasurementBranch& s) {
  json out;
  TSTMLE_FIELDS_BRANCH(TSTMLE_WRITE)
  return out;
}
json write(const OutcomeModel& s) {
  json out;
  TSTMLE_FIELDS_OUTCOME(TSTMLE_WRITE)
  return out;
}
json write(const ExtendedParams& s) {
  json out;
  TSTMLE_FIELDS_EXTENDED(TSTMLE_WRITE)
  return out;
}

}  // namespace

void SimParams::check() const {
  if (j < 1) throw std::invalid_argument("j must be positive");
  if (!(n_mean > 0)) throw std::invalid_argument("n_mean must be positive");
  if (!(n_sd >= 0)) throw std::invalid_argument("n_sd must be nonnegative");
  if (min_cluster_size < 2) throw std::invalid_argument("min_cluster_size must be at least 2");
  if (!(w1_hi > w1_lo)) throw std::invalid_argument("w1_hi must exceed w1_lo");
  for (double p : {p_w2, p_w3, p_arm})
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("probabilities must lie in [0,1]");
  if (truth_clusters < 1000) throw std::invalid_argument("truth_clusters must be at least 1000");
  if (mcar_measurement && !(*mcar_measurement > 0 && *mcar_measurement <= 1))
    throw std::invalid_argument("mcar_measurement must lie in (0,1]");
}

SimParams sim_params_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("simulation parameters must be a JSON object");
  SimParams s;
  std::set<std::string> seen;
  TSTMLE_FIELDS_TOP(TSTMLE_READ)
  if (j.contains("y1star")) {
    seen.insert("y1star");
    s.y1star = read_struct<TargetModel>(j.at("y1star"), "y1star");
  }
  if (j.contains("delta_w3")) {
    seen.insert("delta_w3");
    s.delta_w3 = read_branch(j.at("delta_w3"), s.delta_w3, "delta_w3");
  }
  if (j.contains("delta_not_w3")) {
    seen.insert("delta_not_w3");
    s.delta_not_w3 = read_branch(j.at("delta_not_w3"), s.delta_not_w3, "delta_not_w3");
  }
  if (j.contains("y2")) {
    seen.insert("y2");
    s.y2 = read_struct<OutcomeModel>(j.at("y2"), "y2");
  }
  if (j.contains("mcar_measurement")) {
    seen.insert("mcar_measurement");
    if (!j.at("mcar_measurement").is_null()) s.mcar_measurement = j.at("mcar_measurement").get<double>();
  }
  if (j.contains("extended")) {
    seen.insert("extended");
    if (!j.at("extended").is_null()) s.extended = read_struct<ExtendedParams>(j.at("extended"), "extended");
  }
  reject_unknown(j, seen, "simulation parameters");
  s.check();
  return s;
}

json sim_params_to_json(const SimParams& s) {
  json out;
  TSTMLE_FIELDS_TOP(TSTMLE_WRITE)
  out["y1star"] = write(s.y1star);
  out["delta_w3"] = write(s.delta_w3);
  out["delta_not_w3"] = write(s.delta_not_w3);
  out["y2"] = write(s.y2);
  out["mcar_measurement"] = s.mcar_measurement ? json(*s.mcar_measurement) : json(nullptr);
  out["extended"] = s.extended ? write(*s.extended) : json(nullptr);
  return out;
}

ClusterContext context_of(const ClusterRecord& cluster) {
  if (!cluster.latent) throw std::invalid_argument("cluster '" + cluster.id + "' carries no simulation latents");
  return {cluster.e1c, cluster.e2c, cluster.latent->u_e1c, cluster.latent->u_e2c};
}

double l_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, int a) {
  if (!p.extended) return 0.0;
  const auto& x = *p.extended;
  return expit(x.l_intercept + x.l_e1c * c.e1c + x.l_w1 * w1 + x.l_w2 * w2 + x.l_a * a);
}

double target_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3, int a,
                          double l) {
  const auto& m = p.y1star;
  double eta = m.intercept + m.e1c * c.e1c + m.e2c * c.e2c + m.w1 * w1 + m.w2 * w2 + m.w3 * w3 +
               m.u_e1c * c.u_e1c + m.u_e2c * c.u_e2c;
  if (p.extended) eta += p.extended->y1star_l * l + p.extended->y1star_a * a;
  return expit(eta);
}

double measurement_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3, int a,
                               double l) {
  if (p.mcar_measurement) return *p.mcar_measurement;
  const auto& b = w3 ? p.delta_w3 : p.delta_not_w3;
  double eta = b.intercept + b.a * a + b.w1 * w1 + b.w2_a * w2 * a + b.w3 * w3 + b.e1c * c.e1c +
               b.e2c * c.e2c + b.u_e1c * c.u_e1c + b.u_e2c * c.u_e2c;
  if (p.extended) eta += p.extended->delta_l * l;
  return expit(eta);
}

double outcome_probability(const SimParams& p, const ClusterContext& c, double w1, bool w2, bool w3, int a,
                           double l) {
  const auto& m = p.y2;
  double eta = m.intercept + m.a * a + m.w1 * w1 + m.w2 * w2 + m.e1c * c.e1c + m.e2c * c.e2c + m.a_w3 * a * w3;
  if (p.extended) eta += p.extended->y2_l * l;
  return expit(eta);
}

ClusterRecord generate_cluster(const SimParams& params, Rng& rng, std::string id) {
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto normal = [&](double mu, double sd) { return std::normal_distribution<double>(mu, sd)(rng); };

  ClusterContext ctx;
  ctx.u_e1c = uniform(0.0, params.u_e1c_max);
  ctx.u_e2c = uniform(0.0, params.u_e2c_max);
  ctx.e1c = normal(ctx.u_e1c, params.e_sd);
  ctx.e2c = normal(ctx.u_e2c, params.e_sd);
  const double n_draw = std::round(normal(params.n_mean, params.n_sd));
  const auto n = static_cast<std::size_t>(std::max(static_cast<double>(params.min_cluster_size), n_draw));

  std::vector<IndividualRecord> ind(n);
  for (auto& r : ind) {
    r.w1 = (uniform(params.w1_lo, params.w1_hi) - params.w1_lo) / (params.w1_hi - params.w1_lo);
    r.w2 = uniform01(rng) < params.p_w2;
    r.w3 = uniform01(rng) < params.p_w3;
  }
  const int arm = uniform01(rng) < params.p_arm ? 1 : 0;

  struct Noise {
    double y1, delta, y2;
  };
  std::vector<Noise> u(n);
  for (auto& v : u) {
    v.y1 = uniform01(rng);
    v.delta = uniform01(rng);
    v.y2 = uniform01(rng);
  }
  std::vector<double> u_l;
  if (params.extended) {
    u_l.resize(n);
    for (auto& v : u_l) v = uniform01(rng);
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto& r = ind[i];
    SimLatents lat;
    for (int a = 0; a < 2; ++a) {
      double l = 0.0;
      if (params.extended) l = u_l[i] < l_probability(params, ctx, r.w1, r.w2, a) ? 1.0 : 0.0;
      lat.l_cf[a] = l;
      lat.y1_star_cf[a] = u[i].y1 < target_probability(params, ctx, r.w1, r.w2, r.w3, a, l);
      lat.delta_cf[a] = u[i].delta < measurement_probability(params, ctx, r.w1, r.w2, r.w3, a, l);
      lat.y2_cf[a] = lat.delta_cf[a] && lat.y1_star_cf[a] &&
                     u[i].y2 < outcome_probability(params, ctx, r.w1, r.w2, r.w3, a, l);
    }
    lat.y1_star = lat.y1_star_cf[arm];
    r.delta = lat.delta_cf[arm];
    r.y1 = r.delta && lat.y1_star;
    r.y2 = lat.y2_cf[arm];
    if (params.extended) r.l = lat.l_cf[arm];
    r.latent = lat;
  }

  auto c = make_cluster(std::move(id), ctx.e1c, ctx.e2c, arm == 1, std::move(ind));
  c.latent = ClusterLatents{ctx.u_e1c, ctx.u_e2c};
  return c;
}

TrialData generate_trial(const SimParams& params, std::uint64_t seed, unsigned threads) {
  params.check();
  TrialData data;
  data.clusters.resize(params.j);
  parallel_for(params.j, threads, [&](std::size_t j) {
    Rng rng(derive_seed(seed, {kStreamTrial, j}));
    data.clusters[j] = generate_cluster(params, rng, std::to_string(j + 1));
  });
  return data;
}

TrialData generate_trial_extended(const SimParams& params, std::uint64_t seed, unsigned threads) {
  if (!params.extended) throw std::invalid_argument("generate_trial_extended: extended parameters missing");
  return generate_trial(params, seed, threads);
}

std::optional<double> counterfactual_endpoint(const ClusterRecord& cluster, int a) {
  std::size_t members = 0, outcomes = 0;
  for (const auto& r : cluster.individuals) {
    if (!r.latent) throw std::invalid_argument("cluster '" + cluster.id + "' carries no counterfactuals");
    if (r.latent->y1_star_cf[a]) {
      ++members;
      outcomes += r.latent->y2_cf[a];
    }
  }
  if (members == 0) return std::nullopt;
  return static_cast<double>(outcomes) / static_cast<double>(members);
}

TruthResult compute_truth(const SimParams& params, std::uint64_t seed, unsigned threads) {
  params.check();
  const std::size_t m = params.truth_clusters;
  std::vector<std::optional<std::pair<double, double>>> endpoints(m);
  parallel_for(m, threads, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {kStreamTruth, c}));
    const auto cluster = generate_cluster(params, rng, std::to_string(c + 1));
    auto y0 = counterfactual_endpoint(cluster, 0);
    auto y1 = counterfactual_endpoint(cluster, 1);
    if (y0 && y1) endpoints[c] = std::pair{*y0, *y1};
  });

  TruthResult t;
  double s0 = 0, s1 = 0, sd = 0, sdd = 0;
  for (const auto& e : endpoints) {
    if (!e) {
      ++t.clusters_dropped;
      continue;
    }
    ++t.clusters_used;
    s0 += e->first;
    s1 += e->second;
    const double d = e->second - e->first;
    sd += d;
    sdd += d * d;
  }
  if (t.clusters_used == 0) throw std::runtime_error("compute_truth: every truth cluster was dropped");
  const double n = static_cast<double>(t.clusters_used);
  t.yc0_mean = s0 / n;
  t.yc1_mean = s1 / n;
  t.psi_star = t.yc1_mean - t.yc0_mean;
  if (t.clusters_used > 1) {
    const double var = (sdd - sd * sd / n) / (n - 1);
    t.psi_star_se = std::sqrt(std::max(0.0, var) / n);
  }
  return t;
}

}  // namespace tstmle
