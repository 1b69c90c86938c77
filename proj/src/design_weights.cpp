#include "crowdstat/design_weights.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "crowdstat/csv.hpp"
#include "crowdstat/errors.hpp"

namespace crowdstat {

__extension__ using i128 = __int128;

std::vector<std::int64_t> largest_remainder_allocation(std::span<const std::int64_t> populations,
                                                       std::int64_t total) {
  if (populations.empty()) throw StatError("allocation over an empty region table");
  if (total < 0) throw StatError("target_total_n must be nonnegative");
  const std::size_t n = populations.size();

  // Exact integer arithmetic: quota_i = total * pop_i / P, remainder kept as
  // the numerator total * pop_i mod P so comparisons are exact.
  i128 pop_total = 0;
  for (auto p : populations) {
    if (p <= 0) throw StatError("populations must be positive");
    pop_total += p;
  }
  std::vector<std::int64_t> alloc(n);
  std::vector<i128> remainder(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const i128 num = static_cast<i128>(total) * populations[i];
    alloc[i] = static_cast<std::int64_t>(num / pop_total);
    remainder[i] = num % pop_total;
    assigned += alloc[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::int64_t k = 0; k < total - assigned; ++k) ++alloc[order[static_cast<std::size_t>(k)]];
  return alloc;
}

CountMap target_allocation(const DesignSpec& design, const RegionTable& regions) {
  if (regions.empty()) throw StatError("target_allocation: empty region table");
  // Lexicographic region order doubles as the remainder tie-break.
  std::vector<std::size_t> order(regions.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return regions[a].region_id < regions[b].region_id; });
  std::vector<std::int64_t> pops;
  pops.reserve(order.size());
  for (auto i : order) pops.push_back(regions[i].population);

  const auto alloc = largest_remainder_allocation(pops, design.target_total_n);
  CountMap out;
  for (std::size_t k = 0; k < order.size(); ++k) out[regions[order[k]].region_id] = alloc[k];
  return out;
}

const char* to_string(StratumFlag f) {
  switch (f) {
    case StratumFlag::ok: return "ok";
    case StratumFlag::uncovered: return "uncovered";
    case StratumFlag::unrequired: return "unrequired";
    case StratumFlag::empty: return "empty";
    case StratumFlag::merged: return "merged";
  }
  return "ok";
}

CountMap observed_counts(const std::vector<CaseRecord>& cases) {
  CountMap out;
  for (const auto& c : cases) ++out[c.region_id];
  return out;
}

std::vector<PostSamplingRatio> post_sampling_ratios(const CountMap& required, const CountMap& observed) {
  for (const auto& [id, n] : observed) {
    if (!required.contains(id)) throw InputError("observed region '" + id + "' is not in the region table");
  }
  std::vector<PostSamplingRatio> out;
  out.reserve(required.size());
  for (const auto& [id, req] : required) {
    PostSamplingRatio r;
    r.region_id = id;
    r.required_n = req;
    const auto it = observed.find(id);
    r.observed_n = it == observed.end() ? 0 : it->second;
    if (r.observed_n > 0) {
      r.ps = static_cast<double>(r.required_n) / static_cast<double>(r.observed_n);
      r.flag = r.required_n > 0 ? StratumFlag::ok : StratumFlag::unrequired;
    } else {
      r.flag = r.required_n > 0 ? StratumFlag::uncovered : StratumFlag::empty;
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PostSamplingRatio> merge_strata(const std::vector<PostSamplingRatio>& ratios,
                                            const RegionTable& regions) {
  auto usable = [](const PostSamplingRatio& r) { return r.required_n > 0 && r.observed_n > 0; };
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (usable(ratios[i])) targets.push_back(i);
  }
  if (targets.empty()) throw StatError("merge_strata: no stratum has both required and observed cases");

  auto coords = [&](const std::string& id) {
    const auto idx = regions.index_of(id);
    if (!idx) throw InputError("merge_strata: region '" + id + "' is not in the region table");
    return std::pair{regions[*idx].x, regions[*idx].y};
  };

  // assignment[i] = index of the usable stratum that i pools into.
  std::vector<std::size_t> assignment(ratios.size());
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const auto& r = ratios[i];
    if (usable(r) || (r.required_n == 0 && r.observed_n == 0)) {
      assignment[i] = i;
      continue;
    }
    const auto [xi, yi] = coords(r.region_id);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = targets.front();
    for (auto j : targets) {
      const auto [xj, yj] = coords(ratios[j].region_id);
      const double d = std::hypot(xi - xj, yi - yj);
      if (d < best || (d == best && ratios[j].region_id < ratios[best_j].region_id)) {
        best = d;
        best_j = j;
      }
    }
    assignment[i] = best_j;
  }

  std::vector<std::int64_t> pool_required(ratios.size(), 0), pool_observed(ratios.size(), 0);
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    pool_required[assignment[i]] += ratios[i].required_n;
    pool_observed[assignment[i]] += ratios[i].observed_n;
  }

  std::vector<PostSamplingRatio> out = ratios;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t t = assignment[i];
    if (out[i].required_n == 0 && out[i].observed_n == 0) continue;
    out[i].ps = static_cast<double>(pool_required[t]) / static_cast<double>(pool_observed[t]);
    if (t != i) {
      out[i].flag = StratumFlag::merged;
      out[i].merged_into = ratios[t].region_id;
    }
  }
  return out;
}

double kish_effective_size(std::span<const double> weights) {
  double s = 0.0, s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  if (s2 == 0.0) return 0.0;
  return s * s / s2;
}

WeightedSample attach_weights(const std::vector<CaseRecord>& cases, const std::vector<PostSamplingRatio>& ratios,
                              Normalization normalization) {
  std::map<std::string, const PostSamplingRatio*, std::less<>> by_region;
  for (const auto& r : ratios) by_region.emplace(r.region_id, &r);

  WeightedSample out;
  out.records = cases;
  out.normalization = normalization;
  out.weights.reserve(cases.size());
  std::set<std::string> bad;
  for (const auto& c : cases) {
    const auto it = by_region.find(c.region_id);
    if (it == by_region.end()) throw InputError("case '" + c.case_id + "': region '" + c.region_id + "' has no ratio");
    const auto& ps = it->second->ps;
    if (!ps || *ps <= 0.0) {
      bad.insert(c.region_id);
      out.weights.push_back(0.0);
    } else {
      out.weights.push_back(*ps);
    }
  }
  if (!bad.empty()) {
    std::string names;
    for (const auto& b : bad) names += (names.empty() ? "" : ", ") + b;
    throw StatError("uncovered strata: " + names);
  }
  // Uncovered strata hold no cases but still leave part of the design unrepresented.
  for (const auto& r : ratios) {
    if (r.flag == StratumFlag::uncovered) bad.insert(r.region_id);
  }
  if (!bad.empty()) {
    std::string names;
    for (const auto& b : bad) names += (names.empty() ? "" : ", ") + b;
    throw StatError("uncovered strata: " + names);
  }

  if (normalization == Normalization::sum_to_n && !out.weights.empty()) {
    const double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
    const double scale = static_cast<double>(out.weights.size()) / total;
    for (auto& w : out.weights) w *= scale;
  }
  out.kish_n_eff = kish_effective_size(out.weights);
  return out;
}

WeightedSample unit_weights(const std::vector<CaseRecord>& cases) {
  WeightedSample out;
  out.records = cases;
  out.weights.assign(cases.size(), 1.0);
  out.normalization = Normalization::sum_to_n;
  out.kish_n_eff = static_cast<double>(cases.size());
  return out;
}

std::string ratios_csv(const std::vector<PostSamplingRatio>& ratios) {
  std::ostringstream os;
  os << "region_id,required_n,observed_n,ps,flag\n";
  for (const auto& r : ratios) {
    os << csv::escape(r.region_id) << ',' << r.required_n << ',' << r.observed_n << ','
       << (r.ps ? csv::format_double(*r.ps) : "") << ',' << to_string(r.flag);
    if (r.merged_into) os << ':' << csv::escape(*r.merged_into);
    os << '\n';
  }
  return os.str();
}

std::string weights_csv(const WeightedSample& sample, const std::vector<PostSamplingRatio>& ratios) {
  std::map<std::string, double, std::less<>> ps;
  for (const auto& r : ratios) {
    if (r.ps) ps.emplace(r.region_id, *r.ps);
  }
  std::ostringstream os;
  os << "case_id,region_id,ps,weight\n";
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& c = sample.records[i];
    const auto it = ps.find(c.region_id);
    os << csv::escape(c.case_id) << ',' << csv::escape(c.region_id) << ','
       << (it == ps.end() ? "" : csv::format_double(it->second)) << ',' << csv::format_double(sample.weights[i])
       << '\n';
  }
  return os.str();
}

WeightedSample read_weights(const std::vector<CaseRecord>& cases, std::string_view text) {
  const auto rows = csv::lines(text);
  if (rows.empty()) throw InputError("weights: missing header row");
  const auto header = csv::split_row(rows.front().text);
  std::size_t c_id = header.size(), c_w = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto h = csv::trim(header[i]);
    if (h == "case_id") c_id = i;
    if (h == "weight") c_w = i;
  }
  if (c_id == header.size()) throw InputError("weights: missing required column 'case_id'");
  if (c_w == header.size()) throw InputError("weights: missing required column 'weight'");

  std::map<std::string, double, std::less<>> by_case;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto row = csv::split_row(rows[r].text);
    const auto id = c_id < row.size() ? csv::trim(row[c_id]) : std::string{};
    const auto wtext = c_w < row.size() ? csv::trim(row[c_w]) : std::string{};
    double w = 0.0;
    const auto res = std::from_chars(wtext.data(), wtext.data() + wtext.size(), w);
    if (res.ec != std::errc{} || res.ptr != wtext.data() + wtext.size() || !(w > 0.0) || !std::isfinite(w)) {
      throw InputError("weights line " + std::to_string(rows[r].number) + ": weight must be a positive number");
    }
    if (!by_case.emplace(id, w).second) throw InputError("weights: duplicate case_id '" + id + "'");
  }

  WeightedSample out;
  out.records = cases;
  out.normalization = Normalization::raw;
  for (const auto& c : cases) {
    const auto it = by_case.find(c.case_id);
    if (it == by_case.end()) throw InputError("weights: no weight for case_id '" + c.case_id + "'");
    out.weights.push_back(it->second);
    by_case.erase(it);
  }
  if (!by_case.empty()) throw InputError("weights: case_id '" + by_case.begin()->first + "' is not in the cases file");
  const double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
  if (std::abs(total - static_cast<double>(cases.size())) <= 1e-9 * std::max(1.0, total)) {
    out.normalization = Normalization::sum_to_n;
  }
  out.kish_n_eff = kish_effective_size(out.weights);
  return out;
}

}  // namespace crowdstat
