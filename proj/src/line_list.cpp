#include "crowdstat/line_list.hpp"

#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "crowdstat/csv.hpp"
#include "crowdstat/errors.hpp"

namespace crowdstat {
namespace {

using namespace std::chrono;

template <typename T>
std::optional<T> parse_number(std::string_view text) {
  T value{};
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last || first == last) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) return std::nullopt;
  }
  return value;
}

std::optional<Sex> parse_sex(std::string_view text, bool& ok) {
  ok = true;
  if (text.empty()) return std::nullopt;
  if (text == "M" || text == "m" || text == "male") return Sex::male;
  if (text == "F" || text == "f" || text == "female") return Sex::female;
  if (text == "U" || text == "u" || text == "unknown") return Sex::unknown;
  ok = false;
  return std::nullopt;
}

const char* sex_code(Sex s) {
  switch (s) {
    case Sex::male: return "M";
    case Sex::female: return "F";
    case Sex::unknown: return "U";
  }
  return "U";
}

std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < header.size(); ++i) idx.emplace(csv::trim(header[i]), i);
  return idx;
}

std::size_t require_column(const std::map<std::string, std::size_t>& idx, const std::string& name,
                           std::string_view file) {
  const auto it = idx.find(name);
  if (it == idx.end()) {
    throw InputError(std::string(file) + ": missing required column '" + name + "'");
  }
  return it->second;
}

std::string field_at(const std::vector<std::string>& row, std::size_t i) {
  return i < row.size() ? csv::trim(row[i]) : std::string{};
}

}  // namespace

Date parse_date(std::string_view text) {
  // YYYY-MM-DD, exactly.
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') {
    throw InputError("unparseable date '" + std::string(text) + "'");
  }
  const auto y = parse_number<int>(text.substr(0, 4));
  const auto m = parse_number<unsigned>(text.substr(5, 2));
  const auto d = parse_number<unsigned>(text.substr(8, 2));
  if (!y || !m || !d) throw InputError("unparseable date '" + std::string(text) + "'");
  const year_month_day ymd{year{*y}, month{*m}, day{*d}};
  if (!ymd.ok()) throw InputError("invalid calendar date '" + std::string(text) + "'");
  return sys_days{ymd};
}

std::string format_date(Date d) {
  const year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

RegionTable::RegionTable(std::vector<Region> regions, std::vector<double> age_bin_edges)
    : regions_(std::move(regions)), age_bin_edges_(std::move(age_bin_edges)) {
  for (std::size_t i = 0; i < regions_.size(); ++i) {
    const Region& r = regions_[i];
    if (r.region_id.empty()) throw InputError("region with empty region_id");
    if (!index_.emplace(r.region_id, i).second) {
      throw InputError("duplicate region_id '" + r.region_id + "'");
    }
    if (r.population <= 0) {
      throw InputError("region '" + r.region_id + "': population must be positive");
    }
    if (r.age_distribution) {
      const auto& dist = *r.age_distribution;
      if (age_bin_edges_.size() < 2 || dist.size() + 1 != age_bin_edges_.size()) {
        throw InputError("region '" + r.region_id + "': age distribution does not match the age bins");
      }
      double sum = 0.0;
      for (double p : dist) {
        if (p < 0.0) throw InputError("region '" + r.region_id + "': negative age proportion");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw InputError("region '" + r.region_id + "': age distribution sums to " +
                         csv::format_double(sum) + ", expected 1");
      }
    }
  }
}

std::optional<std::size_t> RegionTable::index_of(std::string_view region_id) const {
  const auto it = index_.find(region_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

LineList parse_line_list(std::string_view csv_text, const RegionTable* regions) {
  const auto rows = csv::lines(csv_text);
  if (rows.empty()) throw InputError("cases: missing header row");
  const auto idx = header_index(csv::split_row(rows.front().text));
  const std::size_t c_id = require_column(idx, "case_id", "cases");
  const std::size_t c_region = require_column(idx, "region_id", "cases");
  const std::size_t c_age = require_column(idx, "age", "cases");
  const std::size_t c_sex = require_column(idx, "sex", "cases");
  const std::size_t c_onset = require_column(idx, "onset_date", "cases");
  const std::size_t c_care = require_column(idx, "care_date", "cases");
  const std::size_t c_traveler = require_column(idx, "traveler", "cases");
  const std::size_t c_group = require_column(idx, "group_label", "cases");

  LineList out;
  std::set<std::string, std::less<>> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& line = rows[r];
    const auto row = csv::split_row(line.text);
    auto reject = [&](std::string reason) { out.rejected.push_back({line.number, std::move(reason)}); };

    CaseRecord rec;
    rec.case_id = field_at(row, c_id);
    if (rec.case_id.empty()) {
      reject("empty case_id");
      continue;
    }
    if (seen.contains(rec.case_id)) {
      reject("duplicate case_id '" + rec.case_id + "'");
      continue;
    }

    rec.region_id = field_at(row, c_region);
    if (rec.region_id.empty()) {
      reject("empty region_id");
      continue;
    }
    if (regions && !regions->contains(rec.region_id)) {
      reject("unknown region_id '" + rec.region_id + "'");
      continue;
    }

    const auto age = parse_number<double>(field_at(row, c_age));
    if (!age) {
      reject("unparseable age");
      continue;
    }
    if (*age < 0.0 || *age > 120.0) {
      reject("age outside [0, 120]");
      continue;
    }
    rec.age = *age;

    bool sex_ok = true;
    rec.sex = parse_sex(field_at(row, c_sex), sex_ok);
    if (!sex_ok) {
      reject("unrecognized sex '" + field_at(row, c_sex) + "'");
      continue;
    }

    try {
      rec.onset_date = parse_date(field_at(row, c_onset));
      const auto care = field_at(row, c_care);
      if (!care.empty()) rec.care_date = parse_date(care);
    } catch (const InputError& e) {
      reject(e.what());
      continue;
    }
    if (rec.care_date && *rec.care_date < rec.onset_date) {
      reject("care precedes onset");
      continue;
    }

    const auto traveler = field_at(row, c_traveler);
    if (traveler == "1") {
      rec.traveler = true;
    } else if (traveler == "0") {
      rec.traveler = false;
    } else {
      reject("traveler must be 0 or 1");
      continue;
    }

    auto group = field_at(row, c_group);
    if (!group.empty()) rec.group_label = std::move(group);

    seen.insert(rec.case_id);
    out.records.push_back(std::move(rec));
  }
  return out;
}

std::string serialize_line_list(const std::vector<CaseRecord>& records) {
  std::ostringstream os;
  for (std::size_t i = 0; i < std::size(kCaseColumns); ++i) os << (i ? "," : "") << kCaseColumns[i];
  os << '\n';
  for (const auto& r : records) {
    os << csv::escape(r.case_id) << ',' << csv::escape(r.region_id) << ',' << csv::format_double(r.age)
       << ',' << (r.sex ? sex_code(*r.sex) : "") << ',' << format_date(r.onset_date) << ','
       << (r.care_date ? format_date(*r.care_date) : "") << ',' << (r.traveler ? '1' : '0') << ','
       << (r.group_label ? csv::escape(*r.group_label) : "") << '\n';
  }
  return os.str();
}

RegionTable parse_regions(std::string_view csv_text) {
  const auto rows = csv::lines(csv_text);
  if (rows.empty()) throw InputError("regions: missing header row");
  const auto header = csv::split_row(rows.front().text);
  const auto idx = header_index(header);
  const std::size_t c_id = require_column(idx, "region_id", "regions");
  const std::size_t c_name = require_column(idx, "name", "regions");
  const std::size_t c_pop = require_column(idx, "population", "regions");
  const std::size_t c_x = require_column(idx, "x", "regions");
  const std::size_t c_y = require_column(idx, "y", "regions");
  const auto c_cov = idx.find("covariate");

  // Optional age_<lo>_<hi> columns, in header order.
  std::vector<std::size_t> age_cols;
  std::vector<double> edges;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto name = csv::trim(header[i]);
    if (!name.starts_with("age_")) continue;
    const auto rest = std::string_view(name).substr(4);
    const auto sep = rest.find('_');
    const auto lo = sep == std::string_view::npos ? std::nullopt : parse_number<double>(rest.substr(0, sep));
    const auto hi = sep == std::string_view::npos ? std::nullopt : parse_number<double>(rest.substr(sep + 1));
    if (!lo || !hi || *hi <= *lo) throw InputError("regions: malformed age column '" + name + "'");
    if (edges.empty()) {
      edges.push_back(*lo);
    } else if (edges.back() != *lo) {
      throw InputError("regions: age columns must be contiguous at '" + name + "'");
    }
    edges.push_back(*hi);
    age_cols.push_back(i);
  }

  std::vector<Region> regions;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto row = csv::split_row(rows[r].text);
    const auto where = "regions line " + std::to_string(rows[r].number) + ": ";
    Region reg;
    reg.region_id = field_at(row, c_id);
    reg.name = field_at(row, c_name);
    const auto pop = parse_number<std::int64_t>(field_at(row, c_pop));
    const auto x = parse_number<double>(field_at(row, c_x));
    const auto y = parse_number<double>(field_at(row, c_y));
    if (!pop) throw InputError(where + "unparseable population");
    if (!x || !y) throw InputError(where + "unparseable coordinates");
    reg.population = *pop;
    reg.x = *x;
    reg.y = *y;
    if (c_cov != idx.end()) {
      const auto cov = field_at(row, c_cov->second);
      if (!cov.empty()) {
        const auto v = parse_number<double>(cov);
        if (!v) throw InputError(where + "unparseable covariate");
        reg.covariate = *v;
      }
    }
    if (!age_cols.empty()) {
      std::vector<double> dist;
      bool any = false;
      bool all = true;
      for (std::size_t c : age_cols) {
        const auto cell = field_at(row, c);
        if (cell.empty()) {
          all = false;
          continue;
        }
        any = true;
        const auto v = parse_number<double>(cell);
        if (!v) throw InputError(where + "unparseable age proportion");
        dist.push_back(*v);
      }
      if (any && !all) throw InputError(where + "partially filled age distribution");
      if (all) reg.age_distribution = std::move(dist);
    }
    regions.push_back(std::move(reg));
  }
  return RegionTable(std::move(regions), std::move(edges));
}

std::vector<Edge> parse_edges(std::string_view csv_text) {
  const auto rows = csv::lines(csv_text);
  if (rows.empty()) throw InputError("edges: missing header row");
  const auto idx = header_index(csv::split_row(rows.front().text));
  const std::size_t c_src = require_column(idx, "src_region", "edges");
  const std::size_t c_dst = require_column(idx, "dst_region", "edges");
  const std::size_t c_w = require_column(idx, "weight", "edges");
  std::vector<Edge> edges;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto row = csv::split_row(rows[r].text);
    const auto w = parse_number<double>(field_at(row, c_w));
    if (!w) throw InputError("edges line " + std::to_string(rows[r].number) + ": unparseable weight");
    edges.push_back({field_at(row, c_src), field_at(row, c_dst), *w});
  }
  return edges;
}

std::optional<DelayDays> compute_delay(const CaseRecord& record) {
  if (!record.care_date) return std::nullopt;
  return DelayDays{static_cast<int>((*record.care_date - record.onset_date).count())};
}

CutoffSplit split_by_cutoff(const std::vector<CaseRecord>& records, Date cutoff) {
  CutoffSplit out;
  for (const auto& r : records) {
    CaseRecord copy = r;
    if (r.onset_date < cutoff) {
      copy.group_label = "before";
      out.before.push_back(std::move(copy));
    } else {
      copy.group_label = "after";
      out.after.push_back(std::move(copy));
    }
  }
  if (!records.empty() && (out.before.empty() || out.after.empty())) {
    out.warning = out.before.empty() ? "no onsets before cutoff " + format_date(cutoff)
                                     : "no onsets on or after cutoff " + format_date(cutoff);
  }
  return out;
}

}  // namespace crowdstat
