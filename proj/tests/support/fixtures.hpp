#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tstmle/trial_data.hpp"

namespace fixtures {

inline tstmle::IndividualRecord person(double w1, bool w2, bool w3, bool delta, bool y1, bool y2) {
  tstmle::IndividualRecord r;
  r.w1 = w1;
  r.w2 = w2;
  r.w3 = w3;
  r.delta = delta;
  r.y1 = y1;
  r.y2 = y2;
  return r;
}

// Cluster from parallel delta/y1/y2 columns with spread-out covariates.
inline tstmle::ClusterRecord cluster_from(const std::vector<int>& delta, const std::vector<int>& y1,
                                          const std::vector<int>& y2, std::string id = "c1", bool a = true) {
  std::vector<tstmle::IndividualRecord> ind;
  for (std::size_t i = 0; i < delta.size(); ++i)
    ind.push_back(person((i + 0.5) / delta.size(), i % 2 == 0, i % 3 == 0, delta[i], y1[i], y2[i]));
  return tstmle::make_cluster(std::move(id), 0.1, -0.2, a, std::move(ind));
}

inline double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double sample_var(std::span<const double> v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace fixtures
