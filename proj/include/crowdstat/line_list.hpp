#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crowdstat {

using Date = std::chrono::sys_days;

/// Parses a strict ISO-8601 calendar date (YYYY-MM-DD). Throws InputError.
Date parse_date(std::string_view text);
std::string format_date(Date d);

enum class Sex { male, female, unknown };

/// One crowdsourced case. Travelers are recorded under the reporting region.
struct CaseRecord {
  std::string case_id;
  std::string region_id;
  double age = 0.0;
  std::optional<Sex> sex;
  Date onset_date{};
  std::optional<Date> care_date;
  bool traveler = false;
  std::optional<std::string> group_label;

  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

/// Symptom onset to first care, in whole days.
struct DelayDays {
  int value = 0;
  friend auto operator<=>(const DelayDays&, const DelayDays&) = default;
};

struct Region {
  std::string region_id;
  std::string name;
  std::int64_t population = 0;
  double x = 0.0;
  double y = 0.0;
  std::optional<double> covariate;
  /// Proportions over the table's age bins, when the file carries them.
  std::optional<std::vector<double>> age_distribution;
};

class RegionTable {
 public:
  RegionTable() = default;
  /// Validates ids (unique), populations (> 0) and age distributions (sum to
  /// 1 within 1e-9, one entry per bin). Throws InputError.
  RegionTable(std::vector<Region> regions, std::vector<double> age_bin_edges = {});

  const std::vector<Region>& regions() const noexcept { return regions_; }
  std::size_t size() const noexcept { return regions_.size(); }
  bool empty() const noexcept { return regions_.empty(); }
  const Region& operator[](std::size_t i) const { return regions_[i]; }

  std::optional<std::size_t> index_of(std::string_view region_id) const;
  bool contains(std::string_view region_id) const { return index_of(region_id).has_value(); }

  /// Edges of the age bins the age_distribution columns refer to; empty when
  /// the file has no age columns.
  const std::vector<double>& age_bin_edges() const noexcept { return age_bin_edges_; }

 private:
  std::vector<Region> regions_;
  std::vector<double> age_bin_edges_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct Edge {
  std::string src;
  std::string dst;
  double weight = 1.0;
};

struct RowRejection {
  std::size_t row;  // 1-based line number in the input text
  std::string reason;
};

/// Result of parsing a line list: accepted records plus every rejected row.
/// accepted + rejected always equals the number of data rows.
struct LineList {
  std::vector<CaseRecord> records;
  std::vector<RowRejection> rejected;
};

inline constexpr const char* kCaseColumns[] = {"case_id",    "region_id", "age",      "sex",
                                               "onset_date", "care_date", "traveler", "group_label"};

/// Parses the cases CSV. Rows that violate record invariants (bad date, age
/// out of [0, 120], care before onset, duplicate case_id, unknown region when
/// `regions` is given) are collected into `rejected` and parsing continues.
/// A missing header or required column throws InputError.
LineList parse_line_list(std::string_view csv_text, const RegionTable* regions = nullptr);

/// Inverse of parse_line_list for accepted records.
std::string serialize_line_list(const std::vector<CaseRecord>& records);

/// Parses the regions CSV: region_id,name,population,x,y,covariate followed
/// by optional age columns named age_<lo>_<hi> over contiguous bins.
RegionTable parse_regions(std::string_view csv_text);

/// Parses src_region,dst_region,weight rows.
std::vector<Edge> parse_edges(std::string_view csv_text);

std::optional<DelayDays> compute_delay(const CaseRecord& record);

struct CutoffSplit {
  std::vector<CaseRecord> before;  // onset_date < cutoff
  std::vector<CaseRecord> after;   // onset_date >= cutoff
  /// Set when one side is empty while the input was not.
  std::optional<std::string> warning;
};

/// Partitions by onset date. The cutoff day itself belongs to `after`.
/// group_label is overwritten with "before" / "after".
CutoffSplit split_by_cutoff(const std::vector<CaseRecord>& records, Date cutoff);

}  // namespace crowdstat
