#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

#include "tstmle/harness.hpp"
#include "tstmle/simgen.hpp"
#include "tstmle/stage1.hpp"
#include "tstmle/stage2.hpp"

namespace py = pybind11;
using namespace tstmle;
using nlohmann::json;

namespace {

SimParams sim_from(const std::string& text) { return sim_params_from_json(json::parse(text)); }

TrialData trial_from(const std::string& csv) {
  std::istringstream in(csv);
  auto data = read_trial_csv(in);
  if (const auto v = validate(data); !v.empty())
    throw std::invalid_argument("invalid trial data: cluster " + v.front().cluster_id + ": " + v.front().message);
  return data;
}

std::string simulate_csv(const std::string& sim, std::uint64_t seed, std::size_t rep) {
  const auto data = generate_trial(sim_from(sim), derive_seed(seed, {kStreamTrial, rep}));
  std::ostringstream out;
  write_trial_csv(data, out);
  return out.str();
}

std::string truth_json(const std::string& sim, std::uint64_t seed, unsigned threads) {
  py::gil_scoped_release release;
  const auto t = compute_truth(sim_from(sim), seed, threads);
  return json{{"psi_star", t.psi_star},         {"mc_se", t.psi_star_se},
              {"yc1_mean", t.yc1_mean},         {"yc0_mean", t.yc0_mean},
              {"clusters_used", t.clusters_used}, {"clusters_dropped", t.clusters_dropped}}
      .dump();
}

std::string analyze_json(const std::string& csv, const std::string& estimator, std::uint64_t seed) {
  const auto data = trial_from(csv);
  const auto e = estimator_from_json(json::parse(estimator));
  py::gil_scoped_release release;
  const auto r = analyze_trial(data, e, seed);
  return effect_to_json(r.estimate, e, r.dropped_clusters).dump();
}

std::string summary_csv(const std::string& sim, const std::string& estimators, std::size_t reps,
                        std::uint64_t seed, unsigned threads) {
  const auto params = sim_from(sim);
  std::vector<EstimatorConfig> ests;
  for (const auto& e : json::parse(estimators)) ests.push_back(estimator_from_json(e));
  if (ests.empty()) ests = standard_estimators();
  py::gil_scoped_release release;
  const auto truth = compute_truth(params, seed, threads);
  const auto results = run_replicates(params, ests, reps, seed, threads);
  std::ostringstream out;
  write_summary_csv(out, ests, aggregate_metrics(results, ests, truth.psi_star), truth.psi_star);
  return out.str();
}

// Endpoint of a single cluster from individual-level columns.
py::dict endpoint(const std::string& method, const std::vector<double>& w1, const std::vector<bool>& w2,
                  const std::vector<bool>& w3, const std::vector<bool>& delta, const std::vector<bool>& y1,
                  const std::vector<bool>& y2, std::uint64_t seed) {
  const std::size_t n = w1.size();
  if (w2.size() != n || w3.size() != n || delta.size() != n || y1.size() != n || y2.size() != n)
    throw std::invalid_argument("endpoint: columns differ in length");
  std::vector<IndividualRecord> ind(n);
  for (std::size_t i = 0; i < n; ++i) {
    if ((y1[i] && !delta[i]) || (y2[i] && !y1[i]))
      throw std::invalid_argument("endpoint: row " + std::to_string(i) + " needs y2 <= y1 <= delta");
    ind[i] = {w1[i], w2[i], w3[i], delta[i], y1[i], y2[i], {}, {}};
  }
  const auto cluster = make_cluster("cluster", 0.0, 0.0, true, std::move(ind));
  const auto e = estimate_endpoint(cluster, parse_stage1_method(method), Stage1Options{}, seed);
  py::dict d;
  d["estimate"] = e.estimate;
  d["se"] = e.se;
  d["numerator"] = e.numerator;
  d["denominator"] = e.denominator;
  d["epsilon"] = e.epsilon ? py::cast(*e.epsilon) : py::none();
  return d;
}

std::string standard_estimators_json(bool adjust_l) {
  json out = json::array();
  for (const auto& e : standard_estimators(adjust_l)) out.push_back(estimator_to_json(e));
  return out.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-stage TMLE for cluster randomized trials";
  py::register_exception<EndpointUndefined>(m, "EndpointUndefined", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  m.def("simulate_csv", &simulate_csv, py::arg("sim"), py::arg("seed"), py::arg("rep") = 0);
  m.def("truth_json", &truth_json, py::arg("sim"), py::arg("seed"), py::arg("threads") = 1);
  m.def("analyze_json", &analyze_json, py::arg("csv"), py::arg("estimator"), py::arg("seed"));
  m.def("summary_csv", &summary_csv, py::arg("sim"), py::arg("estimators"), py::arg("reps"), py::arg("seed"),
        py::arg("threads") = 1);
  m.def("endpoint", &endpoint, py::arg("method"), py::arg("w1"), py::arg("w2"), py::arg("w3"), py::arg("delta"),
        py::arg("y1"), py::arg("y2"), py::arg("seed") = 0);
  m.def("standard_estimators_json", &standard_estimators_json, py::arg("adjust_l") = false);
}
