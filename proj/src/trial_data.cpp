#include "tstmle/trial_data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string_view>
#include <unordered_map>

#include "tstmle/rng.hpp"

namespace tstmle {

namespace {

constexpr std::array<const char*, 10> kBaseColumns = {
    "cluster_id", "e1c", "e2c", "a", "w1", "w2", "w3", "delta", "y1", "y2"};
constexpr std::array<const char*, 5> kLatentColumns = {
    "sim_y1star", "sim_delta0", "sim_delta1", "sim_y20", "sim_y21"};

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string row_context(std::size_t line_no, std::string_view column) {
  return "row " + std::to_string(line_no) + ", column '" + std::string(column) + "'";
}

double parse_real(std::string_view s, std::size_t line_no, std::string_view column) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("parse error at " + row_context(line_no, column) +
                    ": not a real number: '" + std::string(s) + "'");
  }
  return v;
}

bool parse_binary(std::string_view s, std::size_t line_no, std::string_view column) {
  if (s == "0") return false;
  if (s == "1") return true;
  throw DataError("parse error at " + row_context(line_no, column) +
                  ": expected 0 or 1, got '" + std::string(s) + "'");
}

}  // namespace

ClusterRecord make_cluster(std::string id, double e1c, double e2c, bool a,
                           std::vector<IndividualRecord> individuals) {
  ClusterRecord c;
  c.id = std::move(id);
  c.e1c = e1c;
  c.e2c = e2c;
  c.a = a;
  c.individuals = std::move(individuals);
  if (!c.individuals.empty()) {
    auto m = aggregate_cluster_covariates(c);
    c.w1c = m.w1c;
    c.w2c = m.w2c;
    c.w3c = m.w3c;
  }
  return c;
}

bool TrialData::has_l() const {
  if (clusters.empty()) return false;
  for (const auto& c : clusters)
    for (const auto& ind : c.individuals)
      if (!ind.l) return false;
  return true;
}

bool TrialData::has_latent() const {
  if (clusters.empty()) return false;
  for (const auto& c : clusters)
    for (const auto& ind : c.individuals)
      if (!ind.latent) return false;
  return true;
}

CovariateMeans aggregate_cluster_covariates(const ClusterRecord& cluster) {
  if (cluster.individuals.empty())
    throw std::invalid_argument("aggregate_cluster_covariates: cluster '" + cluster.id +
                                "' has no individuals");
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (const auto& ind : cluster.individuals) {
    s1 += ind.w1;
    s2 += ind.w2;
    s3 += ind.w3;
  }
  const double n = static_cast<double>(cluster.individuals.size());
  return {s1 / n, s2 / n, s3 / n};
}

ValidationReport validate(const TrialData& data) {
  ValidationReport report;
  std::size_t arm_count[2] = {0, 0};
  for (const auto& c : data.clusters) {
    ++arm_count[c.a ? 1 : 0];
    if (c.n() < 2) {
      report.push_back({c.id, std::nullopt,
                        "cluster has " + std::to_string(c.n()) +
                            " individuals; at least 2 required"});
    }
    if (!c.individuals.empty()) {
      auto m = aggregate_cluster_covariates(c);
      const double tol = 1e-12;
      if (std::abs(m.w1c - c.w1c) > tol || std::abs(m.w2c - c.w2c) > tol ||
          std::abs(m.w3c - c.w3c) > tol) {
        report.push_back({c.id, std::nullopt,
                          "covariate aggregates do not match individual means"});
      }
    }
    for (std::size_t i = 0; i < c.individuals.size(); ++i) {
      const auto& ind = c.individuals[i];
      if (!ind.delta && ind.y1)
        report.push_back({c.id, i, "y1=1 with delta=0 violates Y1 = delta * Y1*"});
      if (!ind.y1 && ind.y2)
        report.push_back({c.id, i, "y2=1 with y1=0 violates outcome contingency on Y1"});
      if (ind.w1 < 0.0 || ind.w1 > 1.0)
        report.push_back({c.id, i, "w1 outside [0,1]"});
      if (ind.latent) {
        const auto& lat = *ind.latent;
        const int a = c.a ? 1 : 0;
        for (int arm = 0; arm < 2; ++arm) {
          if (lat.y2_cf[arm] && !(lat.delta_cf[arm] && lat.y1_star_cf[arm]))
            report.push_back({c.id, i,
                              "counterfactual y2 nonzero without measurement and "
                              "target-population membership"});
        }
        if (ind.delta != lat.delta_cf[a] || ind.y2 != lat.y2_cf[a] ||
            lat.y1_star != lat.y1_star_cf[a] || ind.y1 != (ind.delta && lat.y1_star))
          report.push_back({c.id, i, "observed values disagree with realized-arm counterfactuals"});
      }
    }
  }
  if (data.j() < 4)
    report.push_back({"", std::nullopt,
                      "trial has " + std::to_string(data.j()) + " clusters; at least 4 required"});
  for (int arm = 0; arm < 2; ++arm) {
    if (arm_count[arm] < 2)
      report.push_back({"", std::nullopt,
                        "fewer than 2 clusters in arm " + std::to_string(arm)});
  }
  return report;
}

std::string csv_header(bool with_l, bool with_latent) {
  std::string h;
  for (std::size_t i = 0; i < kBaseColumns.size(); ++i) {
    if (i) h += ',';
    h += kBaseColumns[i];
  }
  if (with_l) h += ",l";
  if (with_latent)
    for (auto* c : kLatentColumns) (h += ',') += c;
  return h;
}

TrialData read_trial_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("schema error: empty file, header row missing");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  auto header = split(line);
  // Check required columns in order, then the optional groups.
  for (std::size_t i = 0; i < kBaseColumns.size(); ++i) {
    if (i >= header.size())
      throw DataError(std::string("schema error: missing column '") + kBaseColumns[i] + "'");
    if (header[i] != kBaseColumns[i])
      throw DataError(std::string("schema error: expected column '") + kBaseColumns[i] +
                      "' at position " + std::to_string(i + 1) + ", found '" +
                      std::string(header[i]) + "'");
  }
  std::size_t pos = kBaseColumns.size();
  bool with_l = false, with_latent = false;
  if (pos < header.size() && header[pos] == "l") {
    with_l = true;
    ++pos;
  }
  if (pos < header.size() && header[pos].starts_with("sim_")) {
    for (std::size_t k = 0; k < kLatentColumns.size(); ++k, ++pos) {
      if (pos >= header.size())
        throw DataError(std::string("schema error: missing column '") + kLatentColumns[k] + "'");
      if (header[pos] != kLatentColumns[k])
        throw DataError(std::string("schema error: expected column '") + kLatentColumns[k] +
                        "', found '" + std::string(header[pos]) + "'");
    }
    with_latent = true;
  }
  if (pos < header.size())
    throw DataError("schema error: unknown column '" + std::string(header[pos]) + "'");
  const std::size_t ncol = header.size();

  struct Pending {
    double e1c, e2c;
    bool a;
    std::size_t first_line;
    std::vector<IndividualRecord> rows;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Pending> by_id;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != ncol)
      throw DataError("parse error at row " + std::to_string(line_no) + ": expected " +
                      std::to_string(ncol) + " fields, found " + std::to_string(f.size()));
    std::string id(f[0]);
    if (id.empty()) throw DataError("parse error at " + row_context(line_no, "cluster_id") + ": empty");
    const double e1c = parse_real(f[1], line_no, "e1c");
    const double e2c = parse_real(f[2], line_no, "e2c");
    const bool a = parse_binary(f[3], line_no, "a");

    IndividualRecord r;
    r.w1 = parse_real(f[4], line_no, "w1");
    r.w2 = parse_binary(f[5], line_no, "w2");
    r.w3 = parse_binary(f[6], line_no, "w3");
    r.delta = parse_binary(f[7], line_no, "delta");
    r.y1 = parse_binary(f[8], line_no, "y1");
    r.y2 = parse_binary(f[9], line_no, "y2");
    std::size_t p = 10;
    if (with_l) r.l = parse_real(f[p++], line_no, "l");
    if (with_latent) {
      SimLatents lat;
      lat.y1_star = parse_binary(f[p++], line_no, "sim_y1star");
      lat.delta_cf[0] = parse_binary(f[p++], line_no, "sim_delta0");
      lat.delta_cf[1] = parse_binary(f[p++], line_no, "sim_delta1");
      lat.y2_cf[0] = parse_binary(f[p++], line_no, "sim_y20");
      lat.y2_cf[1] = parse_binary(f[p++], line_no, "sim_y21");
      // Only the realized-arm status is serialized. For the other arm a
      // counterfactual outcome implies membership; otherwise assume no change.
      const int other = a ? 0 : 1;
      lat.y1_star_cf[1 - other] = lat.y1_star;
      lat.y1_star_cf[other] = lat.y1_star || lat.y2_cf[other];
      r.latent = lat;
    }
    if (!r.delta && r.y1)
      throw DataError("validation error at row " + std::to_string(line_no) +
                      ": y1=1 with delta=0 violates invariant Y1 = delta * Y1*");
    if (!r.y1 && r.y2)
      throw DataError("validation error at row " + std::to_string(line_no) +
                      ": y2=1 with y1=0 violates outcome contingency on Y1");

    auto it = by_id.find(id);
    if (it == by_id.end()) {
      order.push_back(id);
      it = by_id.emplace(id, Pending{e1c, e2c, a, line_no, {}}).first;
    } else if (it->second.e1c != e1c || it->second.e2c != e2c || it->second.a != a) {
      throw DataError("validation error at row " + std::to_string(line_no) +
                      ": cluster-level values differ from earlier rows of cluster '" + id + "'");
    }
    it->second.rows.push_back(std::move(r));
  }

  TrialData data;
  data.clusters.reserve(order.size());
  for (const auto& id : order) {
    auto& p = by_id.at(id);
    if (p.rows.size() < 2)
      throw DataError("validation error: cluster '" + id + "' has " +
                      std::to_string(p.rows.size()) + " individual(s); at least 2 required");
    data.clusters.push_back(make_cluster(id, p.e1c, p.e2c, p.a, std::move(p.rows)));
  }
  return data;
}

TrialData load_trial_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_trial_csv(in);
}

void write_trial_csv(const TrialData& data, std::ostream& out) {
  const bool with_l = data.has_l();
  const bool with_latent = data.has_latent();
  out << csv_header(with_l, with_latent) << '\n';
  for (const auto& c : data.clusters) {
    const std::string prefix =
        c.id + ',' + fmt_double(c.e1c) + ',' + fmt_double(c.e2c) + ',' + (c.a ? '1' : '0');
    for (const auto& r : c.individuals) {
      out << prefix << ',' << fmt_double(r.w1) << ',' << int(r.w2) << ',' << int(r.w3) << ','
          << int(r.delta) << ',' << int(r.y1) << ',' << int(r.y2);
      if (with_l) out << ',' << fmt_double(*r.l);
      if (with_latent) {
        const auto& lat = *r.latent;
        out << ',' << int(lat.y1_star) << ',' << int(lat.delta_cf[0]) << ','
            << int(lat.delta_cf[1]) << ',' << int(lat.y2_cf[0]) << ',' << int(lat.y2_cf[1]);
      }
      out << '\n';
    }
  }
}

void save_trial_csv(const TrialData& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  write_trial_csv(data, out);
}

std::uint64_t trial_checksum(const TrialData& data) {
  std::ostringstream s;
  for (const auto& c : data.clusters) {
    s << c.id << ',' << fmt_double(c.e1c) << ',' << fmt_double(c.e2c) << ',' << c.a << ';';
    for (const auto& r : c.individuals) {
      s << fmt_double(r.w1) << r.w2 << r.w3 << r.delta << r.y1 << r.y2;
      if (r.l) s << fmt_double(*r.l);
      s << ';';
    }
  }
  return fnv1a(s.str());
}

}  // namespace tstmle
