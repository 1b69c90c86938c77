#include "crowdstat/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "crowdstat/csv.hpp"
#include "crowdstat/errors.hpp"

namespace crowdstat {
namespace {

double checked_total(std::span<const double> w) {
  double total = 0.0;
  for (double wi : w) {
    if (!(wi > 0.0) || !std::isfinite(wi)) throw StatError("weights must be positive and finite");
    total += wi;
  }
  if (!(total > 0.0)) throw StatError("zero total weight");
  return total;
}

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) throw InputError("values and weights differ in length");
}

// Rescaled-to-n Kish effective size, composed with the spatial one.
EssReport composed(std::span<const double> w, std::optional<double> spatial) {
  const double n = static_cast<double>(w.size());
  return combine_ess(n, kish_effective_size(w), spatial.value_or(n));
}

void fill_ses(Estimate& e, double variance_unit, const EssReport& ess) {
  const double n = static_cast<double>(e.n);
  e.n_eff = ess.n_eff;
  e.se_naive = std::sqrt(variance_unit / n);
  e.se_adjusted = std::sqrt(variance_unit / ess.n_eff);
}

}  // namespace

Estimate weighted_mean(std::span<const double> x, std::span<const double> w, std::optional<double> spatial) {
  check_sizes(x.size(), w.size());
  if (x.size() < 2) throw StatError("weighted_mean needs at least 2 observations");
  const double total = checked_total(w);
  const double n = static_cast<double>(x.size());

  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += w[i] * x[i];
  mean /= total;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) ss += w[i] * (x[i] - mean) * (x[i] - mean);
  const double variance = ss * (n / total) / (n - 1.0);

  Estimate e;
  e.value = mean;
  e.n = x.size();
  e.method = "weighted_mean";
  fill_ses(e, variance, composed(w, spatial));
  return e;
}

double weighted_median(std::span<const double> x, std::span<const double> w) {
  check_sizes(x.size(), w.size());
  if (x.empty()) throw StatError("weighted_median of an empty sample");
  const double total = checked_total(w);

  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });

  // Collapse equal values, then walk the cumulative weight.
  std::vector<std::pair<double, double>> points;
  for (auto i : order) {
    if (!points.empty() && points.back().first == x[i]) {
      points.back().second += w[i];
    } else {
      points.emplace_back(x[i], w[i]);
    }
  }
  double cum = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    cum += points[k].second / total;
    if (std::abs(cum - 0.5) <= 1e-12 && k + 1 < points.size()) {
      return 0.5 * (points[k].first + points[k + 1].first);
    }
    if (cum >= 0.5) return points[k].first;
  }
  return points.back().first;
}

Estimate weighted_proportion(std::span<const bool> flag, std::span<const double> w, std::optional<double> spatial) {
  check_sizes(flag.size(), w.size());
  if (flag.empty()) throw StatError("weighted_proportion of an empty sample");
  const double total = checked_total(w);
  double hit = 0.0;
  for (std::size_t i = 0; i < flag.size(); ++i) {
    if (flag[i]) hit += w[i];
  }
  Estimate e;
  e.value = hit / total;
  e.n = flag.size();
  e.method = "weighted_proportion";
  fill_ses(e, e.value * (1.0 - e.value), composed(w, spatial));
  return e;
}

double weighted_skewness(std::span<const double> x, std::span<const double> w) {
  check_sizes(x.size(), w.size());
  if (x.size() < 3) throw StatError("weighted_skewness needs at least 3 observations");
  const double total = checked_total(w);
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += w[i] * x[i];
  mean /= total;
  double m2 = 0.0, m3 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean;
    m2 += w[i] * d * d;
    m3 += w[i] * d * d * d;
  }
  m2 /= total;
  m3 /= total;
  const double scale = std::max(1.0, std::abs(mean));
  if (m2 <= 1e-28 * scale * scale) throw StatError("weighted_skewness: zero weighted variance");
  return m3 / std::pow(m2, 1.5);
}

Variable parse_variable(std::string_view name) {
  if (name == "age") return Variable::age;
  if (name == "delay") return Variable::delay;
  throw InputError("unknown variable '" + std::string(name) + "' (expected age or delay)");
}

const char* to_string(Variable v) { return v == Variable::age ? "age" : "delay"; }

VariableData extract(const WeightedSample& sample, Variable v) {
  VariableData d;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& r = sample.records[i];
    std::optional<double> value;
    if (v == Variable::age) {
      value = r.age;
    } else if (const auto delay = compute_delay(r)) {
      value = static_cast<double>(delay->value);
    }
    if (!value) {
      ++d.excluded;
      continue;
    }
    d.values.push_back(*value);
    d.weights.push_back(sample.weights[i]);
    d.rows.push_back(i);
  }
  if (d.values.empty()) throw StatError(std::string("variable '") + to_string(v) + "' is missing for every record");
  return d;
}

std::optional<double> spatial_n_eff(const WeightedSample& sample, std::span<const std::size_t> rows,
                                    SpatialAdjustment adj) {
  if (!adj.model) return std::nullopt;
  std::map<std::string_view, std::size_t> index;
  for (std::size_t l = 0; l < adj.model->region_ids.size(); ++l) index.emplace(adj.model->region_ids[l], l);
  std::vector<double> counts(adj.model->region_ids.size(), 0.0);
  for (auto i : rows) {
    const auto it = index.find(sample.records[i].region_id);
    if (it == index.end()) {
      throw InputError("region '" + sample.records[i].region_id + "' is not in the spatial model");
    }
    counts[it->second] += 1.0;
  }
  const auto ess = effective_sample_size(counts, *adj.model);
  return sample_variance_n_eff(ess.n, ess.spatial_n_eff);
}

Estimate weighted_mean(const WeightedSample& sample, Variable v, SpatialAdjustment adj) {
  const auto d = extract(sample, v);
  auto e = weighted_mean(d.values, d.weights, spatial_n_eff(sample, d.rows, adj));
  e.method = std::string("weighted_mean(") + to_string(v) + ")";
  if (d.excluded) e.notes = std::to_string(d.excluded) + " records excluded (missing)";
  return e;
}

double weighted_median(const WeightedSample& sample, Variable v) {
  const auto d = extract(sample, v);
  return weighted_median(d.values, d.weights);
}

double weighted_skewness(const WeightedSample& sample, Variable v) {
  const auto d = extract(sample, v);
  return weighted_skewness(d.values, d.weights);
}

Estimate traveler_proportion(const WeightedSample& sample, SpatialAdjustment adj) {
  std::vector<std::size_t> rows(sample.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::unique_ptr<bool[]> buf(new bool[sample.size()]);
  for (std::size_t i = 0; i < sample.size(); ++i) buf[i] = sample.records[i].traveler;
  auto e = weighted_proportion(std::span<const bool>(buf.get(), sample.size()), sample.weights,
                               spatial_n_eff(sample, rows, adj));
  e.method = "weighted_proportion(traveler)";
  return e;
}

std::size_t age_bin_of(double age, std::span<const double> edges) {
  const auto it = std::upper_bound(edges.begin(), edges.end(), age);
  const auto k = static_cast<std::size_t>(std::distance(edges.begin(), it));
  if (k == 0) return 0;
  return std::min(k - 1, edges.size() - 2);
}

AgeBinTable relative_risk_by_age(const WeightedSample& sample, const RegionTable& regions,
                                 const AgeBinOptions& options) {
  AgeBinTable t;
  t.edges = options.edges.empty() ? regions.age_bin_edges() : options.edges;
  if (t.edges.size() < 2) throw InputError("age bins: at least one bin is required");
  if (t.edges.front() != 0.0 || t.edges.back() != 120.0) throw InputError("age bins must span [0, 120]");
  if (!std::is_sorted(t.edges.begin(), t.edges.end()) ||
      std::adjacent_find(t.edges.begin(), t.edges.end()) != t.edges.end()) {
    throw InputError("age bin edges must be strictly increasing");
  }
  if (sample.size() == 0) throw StatError("relative_risk_by_age: no cases");
  const std::size_t bins = t.edges.size() - 1;
  const bool table_bins_match = regions.age_bin_edges() == t.edges;
  if (options.fallback_distribution) {
    const auto& f = *options.fallback_distribution;
    if (f.size() != bins) throw InputError("fallback age distribution does not match the bins");
    if (std::abs(std::accumulate(f.begin(), f.end(), 0.0) - 1.0) > 1e-9) {
      throw InputError("fallback age distribution must sum to 1");
    }
  }

  t.raw_counts.assign(bins, 0);
  t.weighted_counts.assign(bins, 0.0);
  t.exposure.assign(bins, 0.0);
  t.rate.assign(bins, 0.0);
  t.relative_risk.assign(bins, 0.0);

  std::map<std::size_t, bool> contributing;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& r = sample.records[i];
    const auto b = age_bin_of(r.age, t.edges);
    ++t.raw_counts[b];
    t.weighted_counts[b] += sample.weights[i];
    const auto idx = regions.index_of(r.region_id);
    if (!idx) throw InputError("case '" + r.case_id + "': region '" + r.region_id + "' is not in the region table");
    contributing[*idx] = true;
  }
  for (const auto& [idx, _] : contributing) {
    const auto& reg = regions[idx];
    const std::vector<double>* dist = nullptr;
    if (reg.age_distribution && table_bins_match) {
      dist = &*reg.age_distribution;
    } else if (options.fallback_distribution) {
      dist = &*options.fallback_distribution;
    } else {
      throw StatError("region '" + reg.region_id + "' has no age distribution for these bins and no fallback was given");
    }
    for (std::size_t b = 0; b < bins; ++b) t.exposure[b] += static_cast<double>(reg.population) * (*dist)[b];
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (t.raw_counts[b] > 0 && !(t.exposure[b] > 0.0)) {
      throw StatError("age bin [" + csv::format_double(t.edges[b]) + ", " + csv::format_double(t.edges[b + 1]) +
                      ") has cases but zero exposure");
    }
    t.rate[b] = t.exposure[b] > 0.0 ? t.weighted_counts[b] / t.exposure[b] : 0.0;
  }

  if (options.reference_bin) {
    if (*options.reference_bin >= bins) throw InputError("reference bin out of range");
    t.reference_bin = *options.reference_bin;
  } else {
    std::vector<double> ages;
    for (const auto& r : sample.records) ages.push_back(r.age);
    t.reference_bin = age_bin_of(weighted_median(ages, sample.weights), t.edges);
  }
  const double ref = t.rate[t.reference_bin];
  if (!(ref > 0.0)) throw StatError("reference age bin has no cases");
  for (std::size_t b = 0; b < bins; ++b) t.relative_risk[b] = b == t.reference_bin ? 1.0 : t.rate[b] / ref;
  return t;
}

std::string age_table_csv(const AgeBinTable& t) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,raw_count,weighted_count,exposure,rate,relative_risk\n";
  for (std::size_t b = 0; b < t.bins(); ++b) {
    os << csv::format_double(t.edges[b]) << ',' << csv::format_double(t.edges[b + 1]) << ',' << t.raw_counts[b]
       << ',' << csv::format_double(t.weighted_counts[b]) << ',' << csv::format_double(t.exposure[b]) << ','
       << csv::format_double(t.rate[b]) << ',' << csv::format_double(t.relative_risk[b]) << '\n';
  }
  return os.str();
}

Estimate difference(const Estimate& a, const Estimate& b) {
  Estimate d;
  d.value = a.value - b.value;
  d.se_naive = std::hypot(a.se_naive, b.se_naive);
  d.se_adjusted = std::hypot(a.se_adjusted, b.se_adjusted);
  d.n = a.n + b.n;
  d.n_eff = d.se_adjusted > 0.0 ? static_cast<double>(d.n) * (d.se_naive / d.se_adjusted) * (d.se_naive / d.se_adjusted)
                                : static_cast<double>(d.n);
  d.method = "difference_of_means";
  return d;
}

DelaySummary delay_summary(const WeightedSample& sample, const std::vector<std::optional<std::string>>& labels,
                           SpatialAdjustment adj) {
  if (labels.size() != sample.size()) throw InputError("delay_summary: one group label per record is required");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) members[*labels[i]].push_back(i);
  }
  if (members.empty()) throw StatError("delay_summary: no grouped records");

  DelaySummary out;
  for (const auto& [label, rows] : members) {
    WeightedSample part;
    part.normalization = sample.normalization;
    for (auto i : rows) {
      part.records.push_back(sample.records[i]);
      part.weights.push_back(sample.weights[i]);
    }
    part.kish_n_eff = kish_effective_size(part.weights);
    GroupEstimate g;
    g.label = label;
    try {
      const auto d = extract(part, Variable::delay);
      g.excluded = d.excluded;
      g.estimate = weighted_mean(d.values, d.weights, spatial_n_eff(part, d.rows, adj));
    } catch (const StatError& e) {
      throw StatError("group '" + label + "': " + e.what());
    }
    g.estimate.method = "weighted_mean(delay)";
    if (g.excluded) g.estimate.notes = std::to_string(g.excluded) + " records without care_date excluded";
    out.groups.push_back(std::move(g));
  }
  for (std::size_t k = 1; k < out.groups.size(); ++k) {
    GroupEstimate d;
    d.label = out.groups[k].label + " - " + out.groups[0].label;
    d.estimate = difference(out.groups[k].estimate, out.groups[0].estimate);
    out.differences.push_back(std::move(d));
  }
  return out;
}

}  // namespace crowdstat
