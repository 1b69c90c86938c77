#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crowdstat/design_weights.hpp"
#include "crowdstat/line_list.hpp"
#include "crowdstat/spatial.hpp"

namespace crowdstat {

/// Point estimate with the unadjusted and the design/spatially adjusted
/// standard error. se_adjusted / se_naive == sqrt(n / n_eff).
struct Estimate {
  double value = 0.0;
  double se_naive = 0.0;
  double se_adjusted = 0.0;
  std::size_t n = 0;
  double n_eff = 0.0;
  std::string method;
  std::string notes;
};

// ---------------------------------------------------------------------------
// Numeric core over (value, weight) pairs. Weights must be positive; any
// positive rescaling of the weights leaves every result unchanged.
// ---------------------------------------------------------------------------

/// Mean with frequency-weight variance (weights rescaled to sum to n,
/// divisor n - 1). `spatial_n_eff` defaults to n (no spatial penalty).
Estimate weighted_mean(std::span<const double> x, std::span<const double> w,
                       std::optional<double> spatial_n_eff = std::nullopt);

/// Smallest x whose cumulative normalized weight reaches 0.5; the midpoint of
/// the two neighbouring values when the cumulative weight hits 0.5 exactly.
double weighted_median(std::span<const double> x, std::span<const double> w);

/// Share of weight on observations with flag set; se from p(1-p)/n_eff.
Estimate weighted_proportion(std::span<const bool> flag, std::span<const double> w,
                             std::optional<double> spatial_n_eff = std::nullopt);

/// g1 = m3 / m2^{3/2}, weighted central moments with divisor sum w.
double weighted_skewness(std::span<const double> x, std::span<const double> w);

// ---------------------------------------------------------------------------
// Case-record level
// ---------------------------------------------------------------------------

enum class Variable { age, delay };

/// "age" or "delay"; InputError otherwise.
Variable parse_variable(std::string_view name);
const char* to_string(Variable v);

/// Complete-case extraction: values, their weights and source row indices.
struct VariableData {
  std::vector<double> values;
  std::vector<double> weights;
  std::vector<std::size_t> rows;
  std::size_t excluded = 0;  // records where the variable is missing
};

VariableData extract(const WeightedSample& sample, Variable v);

/// Spatial context for SE adjustment: the fitted model, whose region order
/// is used to count the records that enter each estimate.
struct SpatialAdjustment {
  const SpatialModel* model = nullptr;
};

Estimate weighted_mean(const WeightedSample& sample, Variable v, SpatialAdjustment adj = {});
double weighted_median(const WeightedSample& sample, Variable v);
double weighted_skewness(const WeightedSample& sample, Variable v);

/// Proportion of travelers.
Estimate traveler_proportion(const WeightedSample& sample, SpatialAdjustment adj = {});

/// Spatial effective size for the records at `rows`, matched to the sample
/// variance (see sample_variance_n_eff), or nullopt when no model.
std::optional<double> spatial_n_eff(const WeightedSample& sample, std::span<const std::size_t> rows,
                                    SpatialAdjustment adj);

// ---------------------------------------------------------------------------
// Relative risk by age group
// ---------------------------------------------------------------------------

/// Closed-open bins [edges[k], edges[k+1]); age 120 falls into the last bin.
struct AgeBinTable {
  std::vector<double> edges;
  std::vector<std::size_t> raw_counts;
  std::vector<double> weighted_counts;
  std::vector<double> exposure;
  std::vector<double> rate;
  std::vector<double> relative_risk;
  std::size_t reference_bin = 0;

  std::size_t bins() const noexcept { return raw_counts.size(); }
};

struct AgeBinOptions {
  /// Bin edges, 0 first and 120 last. Empty: use the region table's bins.
  std::vector<double> edges;
  /// Reference bin; default is the bin holding the weighted median age.
  std::optional<std::size_t> reference_bin;
  /// Age distribution used for regions that have none.
  std::optional<std::vector<double>> fallback_distribution;
};

/// exposure_b = sum over regions contributing cases of population * share_b;
/// RR_b = (weighted cases_b / exposure_b) / reference rate.
AgeBinTable relative_risk_by_age(const WeightedSample& sample, const RegionTable& regions,
                                 const AgeBinOptions& options);

std::size_t age_bin_of(double age, std::span<const double> edges);

/// bin_lo,bin_hi,raw_count,weighted_count,exposure,rate,relative_risk
std::string age_table_csv(const AgeBinTable& table);

// ---------------------------------------------------------------------------
// Delays by group
// ---------------------------------------------------------------------------

struct GroupEstimate {
  std::string label;
  Estimate estimate;
  std::size_t excluded = 0;
};

struct DelaySummary {
  /// Sorted by label.
  std::vector<GroupEstimate> groups;
  /// groups[k] - groups[0] for k >= 1, with SEs combined in quadrature.
  std::vector<GroupEstimate> differences;
};

/// `labels[i]` is the group of record i; records without a label are skipped.
DelaySummary delay_summary(const WeightedSample& sample, const std::vector<std::optional<std::string>>& labels,
                           SpatialAdjustment adj = {});

/// Difference a - b of two independent estimates.
Estimate difference(const Estimate& a, const Estimate& b);

}  // namespace crowdstat
