#include "tstmle/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "tstmle/parallel.hpp"
#include "tstmle/rng.hpp"

namespace tstmle {

using nlohmann::json;

std::string EstimatorConfig::stage1_key() const {
  std::string k(to_string(stage1));
  if (stage1 == Stage1Method::Tmle)
    k += "|" + library + "|k" + std::to_string(k1) + (adjust_l ? "|l" : "");
  return k;
}

std::string EstimatorConfig::stage2_key() const {
  std::string k(to_string(stage2));
  if (stage2 == Stage2Method::TmleAps) k += "|k" + std::to_string(k2);
  return k;
}

EstimatorConfig estimator_from_json(const json& j) {
  EstimatorConfig e;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    if (key == "name") e.name = it->get<std::string>();
    else if (key == "stage1") e.stage1 = parse_stage1_method(it->get<std::string>());
    else if (key == "stage2") e.stage2 = parse_stage2_method(it->get<std::string>());
    else if (key == "library") e.library = it->get<std::string>();
    else if (key == "k1") e.k1 = it->get<int>();
    else if (key == "k2") e.k2 = it->get<int>();
    else if (key == "adjust_l") e.adjust_l = it->get<bool>();
    else throw std::invalid_argument("unknown key '" + key + "' in estimator configuration");
  }
  if (e.name.empty()) e.name = std::string(to_string(e.stage1)) + "/" + std::string(to_string(e.stage2));
  if (e.k1 < 2 || e.k2 < 2) throw std::invalid_argument("fold counts must be at least 2");
  library_by_id(e.library, e.adjust_l);  // validates the id
  return e;
}

json estimator_to_json(const EstimatorConfig& e) {
  return {{"name", e.name},       {"stage1", std::string(to_string(e.stage1))},
          {"stage2", std::string(to_string(e.stage2))},
          {"library", e.library}, {"k1", e.k1},
          {"k2", e.k2},           {"adjust_l", e.adjust_l}};
}

std::vector<EstimatorConfig> standard_estimators(bool adjust_l) {
  auto make = [&](std::string name, Stage1Method s1, Stage2Method s2) {
    EstimatorConfig e;
    e.name = std::move(name);
    e.stage1 = s1;
    e.stage2 = s2;
    e.adjust_l = adjust_l && s1 == Stage1Method::Tmle;
    return e;
  };
  return {make("Screened/Unadjusted", Stage1Method::Screened, Stage2Method::Unadjusted),
          make("Eligible/Unadjusted", Stage1Method::Eligible, Stage2Method::Unadjusted),
          make("Unadjusted/Unadjusted", Stage1Method::Unadjusted, Stage2Method::Unadjusted),
          make("TMLE/Unadjusted", Stage1Method::Tmle, Stage2Method::Unadjusted),
          make("TMLE/TMLE", Stage1Method::Tmle, Stage2Method::TmleAps)};
}

Library library_by_id(const std::string& id, bool adjust_l) {
  const auto cov = stage1_adjustment_set(adjust_l);
  if (id == "default") return default_library(cov);
  if (id == "glm") return {Learner::mean(), Learner::glm("glm", DesignSpec::main_terms(cov))};
  if (id == "mean") return {Learner::mean()};
  throw std::invalid_argument("unknown learner library '" + id + "'");
}

std::uint64_t stage1_seed(std::uint64_t seed, const EstimatorConfig& config) {
  return derive_seed(seed, {kStreamStage1, fnv1a(config.stage1_key())});
}

std::uint64_t stage2_seed(std::uint64_t seed, const EstimatorConfig& config) {
  return derive_seed(seed, {kStreamStage2, fnv1a(config.stage2_key())});
}

std::vector<ClusterLevelRow> stage1_rows(const TrialData& data, const EstimatorConfig& config,
                                         std::uint64_t seed, std::vector<std::string>& dropped) {
  Stage1Options opt;
  opt.folds = config.k1;
  opt.adjust_l = config.adjust_l;
  if (config.stage1 == Stage1Method::Tmle) opt.library = library_by_id(config.library, config.adjust_l);

  std::vector<const ClusterRecord*> order;
  for (const auto& c : data.clusters) order.push_back(&c);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });

  std::vector<ClusterLevelRow> rows;
  rows.reserve(order.size());
  for (const auto* c : order) {
    try {
      const auto e = estimate_endpoint(*c, config.stage1, opt, derive_seed(seed, {fnv1a(c->id)}));
      rows.push_back({c->e1c, c->e2c, c->w1c, c->w2c, c->w3c, c->a, e.estimate});
    } catch (const EndpointUndefined&) {
      dropped.push_back(c->id);
    }
  }
  return rows;
}

EffectEstimate stage2_effect(std::span<const ClusterLevelRow> rows, const EstimatorConfig& config,
                             std::uint64_t seed) {
  if (config.stage2 == Stage2Method::Unadjusted) return estimate_effect_unadjusted(rows);
  const auto cand = default_stage2_candidates();
  const auto sel = aps_select(rows, cand, cand, config.k2, seed);
  return estimate_effect_tmle(rows, sel);
}

AnalysisResult analyze_trial(const TrialData& data, const EstimatorConfig& config, std::uint64_t seed) {
  AnalysisResult r;
  const auto rows = stage1_rows(data, config, stage1_seed(seed, config), r.dropped_clusters);
  r.estimate = stage2_effect(rows, config, stage2_seed(seed, config));
  return r;
}

namespace {

EstimateSummary summarize(const EffectEstimate& e) {
  EstimateSummary s{e.psi, e.se, e.df, e.ci_lo, e.ci_hi, e.p_value, {}, {}};
  if (e.selection) {
    s.q_adjust = e.selection->q.label();
    s.g_adjust = e.selection->g.label();
  }
  return s;
}

}  // namespace

ReplicateResult run_replicate(const SimParams& params, const std::vector<EstimatorConfig>& estimators,
                              std::size_t rep, std::uint64_t seed) {
  ReplicateResult out;
  out.rep_id = rep;
  const auto data = generate_trial(params, derive_seed(seed, {kStreamTrial, rep}));
  out.trial_checksum = trial_checksum(data);
  const std::uint64_t analysis_seed = derive_seed(seed, {kStreamStage1, rep});

  struct Stage1Cache {
    std::vector<ClusterLevelRow> rows;
    std::vector<std::string> dropped;
  };
  std::map<std::string, Stage1Cache> cache;
  for (const auto& est : estimators) {
    EstimatorOutcome o;
    try {
      auto it = cache.find(est.stage1_key());
      if (it == cache.end()) {
        Stage1Cache c;
        c.rows = stage1_rows(data, est, stage1_seed(analysis_seed, est), c.dropped);
        it = cache.emplace(est.stage1_key(), std::move(c)).first;
      }
      o.clusters_dropped = it->second.dropped.size();
      o.estimate = summarize(stage2_effect(it->second.rows, est, stage2_seed(analysis_seed, est)));
      o.ok = std::isfinite(o.estimate.psi) && std::isfinite(o.estimate.se);
      if (!o.ok) o.error = "non-finite estimate";
    } catch (const std::exception& e) {
      o.ok = false;
      o.error = e.what();
    }
    out.outcomes.push_back(std::move(o));
  }
  return out;
}

std::vector<ReplicateResult> run_replicates(const SimParams& params, const std::vector<EstimatorConfig>& estimators,
                                            std::size_t reps, std::uint64_t seed, unsigned threads,
                                            std::ostream* progress) {
  if (reps < 1) throw std::invalid_argument("run_replicates: reps must be at least 1");
  params.check();
  std::vector<ReplicateResult> results(reps);
  std::mutex progress_mutex;
  std::size_t finished = 0;
  parallel_for(reps, threads, [&](std::size_t r) {
    results[r] = run_replicate(params, estimators, r, seed);
    if (progress) {
      std::lock_guard lock(progress_mutex);
      ++finished;
      if (finished % 10 == 0 || finished == reps)
        *progress << "\rreplicates " << finished << "/" << reps << std::flush;
    }
  });
  if (progress) *progress << '\n';
  return results;
}

bool covers(const EstimateSummary& e, double psi_star) { return e.ci_lo <= psi_star && psi_star <= e.ci_hi; }

bool rejects(const EstimateSummary& e, double alpha) { return e.p_value < alpha; }

std::vector<EstimatorMetrics> aggregate_metrics(const std::vector<ReplicateResult>& results,
                                                const std::vector<EstimatorConfig>& estimators, double psi_star,
                                                double alpha) {
  if (results.empty()) throw std::invalid_argument("aggregate_metrics: no replicates");
  if (!std::isfinite(psi_star)) throw std::invalid_argument("aggregate_metrics: truth is not finite");
  std::vector<EstimatorMetrics> out;
  for (std::size_t k = 0; k < estimators.size(); ++k) {
    EstimatorMetrics m;
    m.name = estimators[k].name;
    std::vector<const EstimateSummary*> ok;
    for (const auto& r : results) {
      if (k >= r.outcomes.size()) throw std::invalid_argument("aggregate_metrics: replicate lacks estimator");
      if (r.outcomes[k].ok) ok.push_back(&r.outcomes[k].estimate);
      else ++m.n_failed;
    }
    m.n_reps = ok.size();
    m.available = !ok.empty();
    if (m.available) {
      const double n = static_cast<double>(ok.size());
      double covered = 0, rejected = 0;
      for (const auto* e : ok) {
        m.mean_pt += e->psi;
        m.mean_ci_lo += e->ci_lo;
        m.mean_ci_hi += e->ci_hi;
        m.avg_se += e->se;
        covered += covers(*e, psi_star);
        rejected += rejects(*e, alpha);
      }
      m.mean_pt /= n;
      m.mean_ci_lo /= n;
      m.mean_ci_hi /= n;
      m.avg_se /= n;
      m.bias = m.mean_pt - psi_star;
      m.coverage = covered / n;
      m.power = rejected / n;
      double ss = 0;
      for (const auto* e : ok) ss += (e->psi - m.mean_pt) * (e->psi - m.mean_pt);
      m.mc_sd = ok.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    }
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_summary_csv(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                       const std::vector<EstimatorMetrics>& metrics, double psi_star) {
  out << "estimator,stage1,stage2,n_reps,n_failed,pt,ci_lo,ci_hi,bias,avg_se,mc_sd,coverage,power,psi_star\n";
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const auto& m = metrics[k];
    out << m.name << ',' << to_string(estimators[k].stage1) << ',' << to_string(estimators[k].stage2) << ','
        << m.n_reps << ',' << m.n_failed;
    if (m.available) {
      for (double v : {m.mean_pt, m.mean_ci_lo, m.mean_ci_hi, m.bias, m.avg_se, m.mc_sd, m.coverage, m.power})
        out << ',' << g17(v);
    } else {
      for (int i = 0; i < 8; ++i) out << ",NA";
    }
    out << ',' << g17(psi_star) << '\n';
  }
}

void write_replicates_csv(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                          const std::vector<ReplicateResult>& results, double psi_star, double alpha) {
  out << "rep,estimator,ok,psi,se,df,ci_lo,ci_hi,p_value,covered,rejected,clusters_dropped,q_adjust,g_adjust,"
         "trial_checksum\n";
  for (const auto& r : results) {
    for (std::size_t k = 0; k < estimators.size(); ++k) {
      const auto& o = r.outcomes[k];
      const auto& e = o.estimate;
      out << r.rep_id << ',' << estimators[k].name << ',' << int(o.ok) << ',';
      if (o.ok) {
        out << g17(e.psi) << ',' << g17(e.se) << ',' << e.df << ',' << g17(e.ci_lo) << ',' << g17(e.ci_hi) << ','
            << g17(e.p_value) << ',' << int(covers(e, psi_star)) << ',' << int(rejects(e, alpha));
      } else {
        out << "NA,NA,NA,NA,NA,NA,NA,NA";
      }
      char hex[24];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(r.trial_checksum));
      out << ',' << o.clusters_dropped << ',' << e.q_adjust << ',' << e.g_adjust << ',' << hex << '\n';
    }
  }
}

void print_table(std::ostream& out, const std::vector<EstimatorConfig>& estimators,
                 const std::vector<EstimatorMetrics>& metrics, double psi_star, std::size_t reps) {
  char line[256];
  std::snprintf(line, sizeof line, "Results from %zu simulated trials, true effect %.2f%%\n", reps, 100 * psi_star);
  out << line;
  std::snprintf(line, sizeof line, "%-11s %-11s %-22s %7s %8s %8s %7s %7s\n", "Stage 1", "Stage 2", "Pt (95% CI)",
                "Bias", "SE-hat", "SD", "Cover.", "Power");
  out << line;
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const auto& m = metrics[k];
    std::string s1(to_string(estimators[k].stage1)), s2(to_string(estimators[k].stage2));
    if (!m.available) {
      std::snprintf(line, sizeof line, "%-11s %-11s %s\n", s1.c_str(), s2.c_str(), "unavailable");
    } else {
      char ci[64];
      std::snprintf(ci, sizeof ci, "%.2f (%.2f , %.2f)", 100 * m.mean_pt, 100 * m.mean_ci_lo, 100 * m.mean_ci_hi);
      std::snprintf(line, sizeof line, "%-11s %-11s %-22s %7.2f %8.4f %8.4f %7.1f %7.1f\n", s1.c_str(), s2.c_str(),
                    ci, 100 * m.bias, m.avg_se, m.mc_sd, 100 * m.coverage, 100 * m.power);
    }
    out << line;
  }
}

json effect_to_json(const EffectEstimate& e, const EstimatorConfig& config, const std::vector<std::string>& dropped) {
  json j;
  j["estimator"] = estimator_to_json(config);
  j["psi"] = e.psi;
  j["se"] = e.se;
  j["df"] = e.df;
  j["ci_lo"] = e.ci_lo;
  j["ci_hi"] = e.ci_hi;
  j["p_value"] = e.p_value;
  j["method"] = std::string(to_string(e.method));
  j["clusters_used"] = e.ic.size();
  j["clusters_dropped"] = dropped;
  j["g_truncated"] = e.g_truncated;
  if (e.selection) {
    json risks = json::array();
    for (const auto& r : e.selection->candidate_risks)
      risks.push_back({{"q", r.q_label}, {"g", r.g_label}, {"cv_risk", r.risk}});
    j["selection"] = {{"q", e.selection->q.label()},
                      {"g", e.selection->g.label()},
                      {"cv_risk", e.selection->cv_risk},
                      {"candidates", risks}};
  } else {
    j["selection"] = nullptr;
  }
  return j;
}

}  // namespace tstmle
