#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crowdstat/line_list.hpp"

namespace crowdstat {

enum class Allocation { proportional_to_population };

/// Reference formal design the crowdsourced sample is post-sampled towards.
struct DesignSpec {
  std::int64_t target_total_n = 0;
  Allocation allocation = Allocation::proportional_to_population;
};

using CountMap = std::map<std::string, std::int64_t>;

/// Required sample size per region under the reference design. Hamilton
/// (largest remainder) rounding: floors first, then the leftover units go to
/// the largest fractional remainders, ties broken by region_id. The result
/// always sums to target_total_n exactly.
CountMap target_allocation(const DesignSpec& design, const RegionTable& regions);

/// Same rounding over a bare population vector; index order is the tie-break.
std::vector<std::int64_t> largest_remainder_allocation(std::span<const std::int64_t> populations,
                                                       std::int64_t total);

enum class StratumFlag {
  ok,
  uncovered,   // required > 0 but nothing observed; ps undefined
  unrequired,  // observed > 0 but the design asks for none; ps = 0
  empty,       // neither required nor observed
  merged,      // pooled with `merged_into` by merge_strata
};

const char* to_string(StratumFlag f);

struct PostSamplingRatio {
  std::string region_id;
  std::int64_t required_n = 0;
  std::int64_t observed_n = 0;
  /// required_n / observed_n when observed_n > 0.
  std::optional<double> ps;
  StratumFlag flag = StratumFlag::ok;
  std::optional<std::string> merged_into;
};

/// Observed case count per region_id.
CountMap observed_counts(const std::vector<CaseRecord>& cases);

/// One ratio per region in `required`. A region observed but missing from
/// `required` throws InputError.
std::vector<PostSamplingRatio> post_sampling_ratios(const CountMap& required, const CountMap& observed);

/// Pools every uncovered or unrequired stratum with the nearest (Euclidean,
/// ties by region_id) usable stratum, so each pool has required > 0 and
/// observed > 0 and shares one ratio. Throws StatError if no usable stratum
/// exists.
std::vector<PostSamplingRatio> merge_strata(const std::vector<PostSamplingRatio>& ratios,
                                            const RegionTable& regions);

enum class Normalization { raw, sum_to_n };

struct WeightedSample {
  std::vector<CaseRecord> records;
  std::vector<double> weights;
  Normalization normalization = Normalization::sum_to_n;
  double kish_n_eff = 0.0;

  std::size_t size() const noexcept { return records.size(); }
};

/// Kish effective size (sum w)^2 / sum w^2.
double kish_effective_size(std::span<const double> weights);

/// w_i = ps of the case's region, optionally rescaled to sum to n. Cases in a
/// region without a positive ratio throw StatError naming those regions.
WeightedSample attach_weights(const std::vector<CaseRecord>& cases,
                              const std::vector<PostSamplingRatio>& ratios,
                              Normalization normalization = Normalization::sum_to_n);

/// Unit weights; the unweighted analysis expressed as a WeightedSample.
WeightedSample unit_weights(const std::vector<CaseRecord>& cases);

std::string ratios_csv(const std::vector<PostSamplingRatio>& ratios);
/// case_id,region_id,ps,weight
std::string weights_csv(const WeightedSample& sample, const std::vector<PostSamplingRatio>& ratios);

/// Reads a weights CSV and aligns it to `cases` by case_id. Throws InputError
/// on missing, extra, or non-positive weights.
WeightedSample read_weights(const std::vector<CaseRecord>& cases, std::string_view weights_csv_text);

}  // namespace crowdstat
