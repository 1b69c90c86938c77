#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crowdstat/csv.hpp"
#include "crowdstat/design_weights.hpp"
#include "crowdstat/errors.hpp"
#include "crowdstat/estimators.hpp"
#include "crowdstat/line_list.hpp"
#include "crowdstat/mc_sim.hpp"
#include "crowdstat/parallel.hpp"
#include "crowdstat/rank_tests.hpp"
#include "crowdstat/report_json.hpp"
#include "crowdstat/spatial.hpp"

namespace crowdstat::cli {

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(digest[i]);
  return os.str();
}

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
  if (!out) throw InputError("failed writing '" + path + "'");
}

/// Provenance embedded in every report. Thread counts and wall-clock times are
/// deliberately left out so identical inputs give identical bytes.
struct Manifest {
  std::string command;
  json config = json::object();
  json inputs = json::array();
  std::optional<std::uint64_t> seed;
  std::vector<std::string> outputs;

  std::string input(const std::string& role, const std::string& path) {
    auto text = read_file(path);
    inputs.push_back({{"role", role}, {"path", path}, {"sha256", sha256_hex(text)}});
    return text;
  }

  json to_json() const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = inputs;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["version"] = CROWDSTAT_VERSION;
    j["outputs"] = outputs;
    return j;
  }
};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

struct GlobalOptions {
  unsigned threads = 0;
  bool pretty = false;
};

unsigned resolve_threads(unsigned requested) { return requested ? requested : default_thread_count(); }

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

json rejections_json(const LineList& ll) {
  json arr = json::array();
  for (const auto& r : ll.rejected) arr.push_back({{"row", r.row}, {"reason", r.reason}});
  return arr;
}

void warn_rejections(const LineList& ll, std::ostream& err) {
  if (!ll.rejected.empty()) err << "warning: " << ll.rejected.size() << " case rows rejected (listed in the report)\n";
}

/// group_label | region | cutoff:YYYY-MM-DD
std::vector<std::optional<std::string>> group_labels(const std::vector<CaseRecord>& records,
                                                     const std::string& groupby) {
  std::vector<std::optional<std::string>> labels(records.size());
  if (groupby == "group_label") {
    for (std::size_t i = 0; i < records.size(); ++i) labels[i] = records[i].group_label;
  } else if (groupby == "region") {
    for (std::size_t i = 0; i < records.size(); ++i) labels[i] = records[i].region_id;
  } else if (groupby.rfind("cutoff:", 0) == 0) {
    const Date cutoff = parse_date(std::string_view(groupby).substr(7));
    for (std::size_t i = 0; i < records.size(); ++i) {
      labels[i] = records[i].onset_date < cutoff ? "before" : "after";
    }
  } else {
    throw InputError("unknown --groupby '" + groupby + "' (expected group_label, region or cutoff:YYYY-MM-DD)");
  }
  return labels;
}

/// Weight scheme for a region table; knn's k is capped at n - 1.
WeightScheme resolve_scheme(const std::string& text, const RegionTable& regions, const std::vector<Edge>& edges) {
  auto scheme = parse_scheme(text, edges);
  if (auto* knn = std::get_if<Knn>(&scheme)) {
    const auto n = static_cast<int>(regions.size());
    if (n >= 2 && knn->k >= n) knn->k = n - 1;
  }
  return scheme;
}

std::vector<Edge> load_edges(Manifest& m, const std::string& path) {
  if (path.empty()) return {};
  return parse_edges(m.input("edges", path));
}

std::vector<std::size_t> region_indices(const std::vector<CaseRecord>& records, std::span<const std::size_t> rows,
                                        const RegionTable& regions) {
  std::vector<std::size_t> idx;
  idx.reserve(rows.size());
  for (auto i : rows) {
    const auto k = regions.index_of(records[i].region_id);
    if (!k) throw InputError("region '" + records[i].region_id + "' is not in the regions file");
    idx.push_back(*k);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Pretty printing
// ---------------------------------------------------------------------------

std::string fmt(const json& v) {
  if (v.is_null()) return "-";
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(6) << v.get<double>();
    return os.str();
  }
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

void print_table(std::ostream& os, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      os << std::left << std::setw(static_cast<int>(width[c])) << (c < cells.size() ? cells[c] : "");
      os << (c + 1 < header.size() ? "  " : "\n");
    }
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  line(rule);
  for (const auto& r : rows) line(r);
}

void print_estimates(std::ostream& os, const json& estimates) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, e] : estimates.items()) {
    if (e.is_object() && e.contains("value")) {
      rows.push_back({name, fmt(e["value"]), fmt(e.value("se_naive", json())), fmt(e.value("se_adjusted", json())),
                      fmt(e.value("n", json())), fmt(e.value("n_eff", json()))});
    } else {
      rows.push_back({name, fmt(e), "", "", "", ""});
    }
  }
  print_table(os, {"quantity", "value", "se_naive", "se_adjusted", "n", "n_eff"}, rows);
}

// ---------------------------------------------------------------------------
// SVG plot for simulation reports
// ---------------------------------------------------------------------------

std::string svg_plot(const McReport& r) {
  std::ostringstream os;
  os << std::setprecision(6);
  constexpr int W = 720, H = 320;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // Left panel: absolute bias, naive vs weighted, per estimator.
  double max_bias = 1e-12;
  for (const auto& e : r.estimators) max_bias = std::max({max_bias, std::abs(e.naive.bias), std::abs(e.weighted.bias)});
  const double x0 = 50, y0 = 270, ph = 220, bw = 40;
  os << "<text x=\"" << x0 << "\" y=\"30\" font-size=\"13\">|bias| by estimator</text>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + 280 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  double x = x0 + 20;
  for (const auto& e : r.estimators) {
    const double hn = ph * std::abs(e.naive.bias) / max_bias;
    const double hw = ph * std::abs(e.weighted.bias) / max_bias;
    os << "<rect x=\"" << x << "\" y=\"" << y0 - hn << "\" width=\"" << bw << "\" height=\"" << hn << "\" fill=\"#d62728\"/>\n";
    os << "<rect x=\"" << x + bw << "\" y=\"" << y0 - hw << "\" width=\"" << bw << "\" height=\"" << hw << "\" fill=\"#1f77b4\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << y0 + 15 << "\">" << e.name << "</text>\n";
    x += 3 * bw;
  }
  os << "<text x=\"" << x0 + 180 << "\" y=\"50\" fill=\"#d62728\">naive</text>\n";
  os << "<text x=\"" << x0 + 180 << "\" y=\"65\" fill=\"#1f77b4\">weighted</text>\n";

  // Right panel: rejection rate per test variant against alpha.
  const double x1 = 400;
  os << "<text x=\"" << x1 << "\" y=\"30\" font-size=\"13\">rejection rate (alpha = " << r.alpha << ")</text>\n";
  os << "<line x1=\"" << x1 << "\" y1=\"" << y0 << "\" x2=\"" << x1 + 300 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  const double ya = y0 - ph * r.alpha;
  os << "<line x1=\"" << x1 << "\" y1=\"" << ya << "\" x2=\"" << x1 + 300 << "\" y2=\"" << ya
     << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  x = x1 + 20;
  for (const auto& t : r.tests) {
    const double h = ph * t.rate;
    os << "<rect x=\"" << x << "\" y=\"" << y0 - h << "\" width=\"" << bw << "\" height=\"" << h << "\" fill=\"#2ca02c\"/>\n";
    os << "<text x=\"" << x << "\" y=\"" << y0 + 15 << "\">" << t.name << "</text>\n";
    x += 2.2 * bw;
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct WeightsArgs {
  std::string cases, regions, out;
  std::optional<std::int64_t> target_n;
  std::string normalization = "sum_to_n";
  bool merge = false;
};

int cmd_weights(const WeightsArgs& a, const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  Manifest m;
  m.command = "weights";
  const auto regions = parse_regions(m.input("regions", a.regions));
  const auto ll = parse_line_list(m.input("cases", a.cases), &regions);
  warn_rejections(ll, err);

  Normalization norm;
  if (a.normalization == "sum_to_n") norm = Normalization::sum_to_n;
  else if (a.normalization == "raw") norm = Normalization::raw;
  else throw InputError("unknown --normalization '" + a.normalization + "' (raw or sum_to_n)");

  const std::int64_t target = a.target_n.value_or(static_cast<std::int64_t>(ll.records.size()));
  m.config = {{"target_n", target}, {"normalization", a.normalization}, {"merge_strata", a.merge}};

  const auto required = target_allocation({target, Allocation::proportional_to_population}, regions);
  auto ratios = post_sampling_ratios(required, observed_counts(ll.records));
  std::vector<std::string> problems;
  for (const auto& r : ratios) {
    if (r.flag == StratumFlag::uncovered || r.flag == StratumFlag::unrequired) {
      problems.push_back(r.region_id + " (" + to_string(r.flag) + ")");
    }
  }
  const std::string ratios_path = (fs::path(a.out) / "ratios.csv").string();
  const std::string weights_path = (fs::path(a.out) / "weights.csv").string();
  const std::string report_path = (fs::path(a.out) / "weights_report.json").string();
  if (!problems.empty()) {
    if (!a.merge) {
      write_file(ratios_path, ratios_csv(ratios));
      std::string list;
      for (const auto& p : problems) list += (list.empty() ? "" : ", ") + p;
      throw StatError("uncovered strata: " + list + "; rerun with --merge-strata to pool them");
    }
    ratios = merge_strata(ratios, regions);
  }
  const auto sample = attach_weights(ll.records, ratios, norm);

  m.outputs = {ratios_path, weights_path, report_path};
  write_file(ratios_path, ratios_csv(ratios));
  write_file(weights_path, weights_csv(sample, ratios));

  std::int64_t required_total = 0;
  std::map<std::string, int> flags;
  for (const auto& r : ratios) {
    required_total += r.required_n;
    ++flags[to_string(r.flag)];
  }
  json report;
  report["manifest"] = m.to_json();
  report["n_cases"] = sample.size();
  report["rejected"] = rejections_json(ll);
  report["target_total_n"] = target;
  report["required_total"] = required_total;
  report["normalization"] = a.normalization;
  report["kish_n_eff"] = sample.kish_n_eff;
  json fl = json::object();
  for (const auto& [k, v] : flags) fl[k] = v;
  report["flag_counts"] = fl;
  json strata = json::array();
  for (const auto& r : ratios) {
    json row{{"region_id", r.region_id},
             {"required_n", r.required_n},
             {"observed_n", r.observed_n},
             {"ps", r.ps ? json(*r.ps) : json(nullptr)},
             {"flag", to_string(r.flag)}};
    if (r.merged_into) row["merged_into"] = *r.merged_into;
    strata.push_back(std::move(row));
  }
  report["strata"] = std::move(strata);
  write_file(report_path, dump(report));

  if (g.pretty) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : ratios) {
      rows.push_back({r.region_id, std::to_string(r.required_n), std::to_string(r.observed_n),
                      r.ps ? csv::format_double(*r.ps) : "-",
                      std::string(to_string(r.flag)) + (r.merged_into ? ":" + *r.merged_into : "")});
    }
    print_table(out, {"region", "required", "observed", "ps", "flag"}, rows);
    out << "kish n_eff = " << sample.kish_n_eff << " of n = " << sample.size() << "\n";
  }
  return kOk;
}

struct EstimateArgs {
  std::string cases, weights, regions, out, age_table, edges, age_dist;
  std::string var = "all";
  std::string groupby;
  std::string age_bins;
  std::string scheme = "knn:4";
  std::optional<std::size_t> reference_bin;
};

std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> v;
  for (const auto& cell : csv::split_row(text)) {
    const auto t = csv::trim(cell);
    try {
      std::size_t used = 0;
      const double d = std::stod(std::string(t), &used);
      if (used != t.size()) throw std::invalid_argument("trailing");
      v.push_back(d);
    } catch (const std::exception&) {
      throw InputError(std::string("bad number '") + std::string(t) + "' in " + what);
    }
  }
  return v;
}

int cmd_estimate(const EstimateArgs& a, const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  Manifest m;
  m.command = "estimate";
  std::optional<RegionTable> regions;
  if (!a.regions.empty()) regions = parse_regions(m.input("regions", a.regions));
  const auto ll = parse_line_list(m.input("cases", a.cases), regions ? &*regions : nullptr);
  warn_rejections(ll, err);

  const bool want_age = a.var == "all" || a.var == "age";
  const bool want_delay = a.var == "all" || a.var == "delay";
  const bool want_traveler = a.var == "all" || a.var == "traveler";
  if (!want_age && !want_delay && !want_traveler) {
    throw InputError("unknown --var '" + a.var + "' (age, delay, traveler or all)");
  }

  WeightedSample sample =
      a.weights.empty() ? unit_weights(ll.records) : read_weights(ll.records, m.input("weights", a.weights));
  m.config = {{"var", a.var},          {"groupby", a.groupby.empty() ? json(nullptr) : json(a.groupby)},
              {"scheme", a.scheme},    {"age_bins", a.age_bins.empty() ? json(nullptr) : json(a.age_bins)},
              {"weights", !a.weights.empty()}};

  // Spatial adjustment: one model per variable, fitted on its complete cases.
  std::optional<WeightMatrix> w;
  if (regions) w = build_weight_matrix(*regions, resolve_scheme(a.scheme, *regions, load_edges(m, a.edges)), true);
  std::map<std::string, SpatialModel> models;
  json spatial_notes = json::object();
  auto fit_for = [&](const std::string& name, std::span<const double> values,
                     std::span<const std::size_t> rows) -> SpatialAdjustment {
    if (!w) return {};
    try {
      const auto idx = region_indices(sample.records, rows, *regions);
      auto fit = fit_spatial_model(values, idx, *w);
      models[name] = fit.model;
      spatial_notes[name] = {{"rho", fit.model.rho}, {"tau2", fit.model.tau2}, {"sigma_e2", fit.model.sigma_e2}};
      return {&models[name]};
    } catch (const StatError& e) {
      spatial_notes[name] = {{"error", e.what()}};
      return {};
    }
  };

  json estimates = json::object();
  auto try_value = [&](auto&& fn) -> json {
    try {
      return json(fn());
    } catch (const StatError& e) {
      return json{{"error", e.what()}};
    }
  };
  if (want_age) {
    const auto d = extract(sample, Variable::age);
    const auto adj = fit_for("age", d.values, d.rows);
    estimates["mean_age"] = to_json(weighted_mean(sample, Variable::age, adj));
    estimates["median_age"] = try_value([&] { return weighted_median(sample, Variable::age); });
    estimates["skewness_age"] = try_value([&] { return weighted_skewness(sample, Variable::age); });
  }
  if (want_delay) {
    const auto d = extract(sample, Variable::delay);
    const auto adj = fit_for("delay", d.values, d.rows);
    estimates["mean_delay"] = to_json(weighted_mean(sample, Variable::delay, adj));
    estimates["median_delay"] = try_value([&] { return weighted_median(sample, Variable::delay); });
  }
  if (want_traveler) {
    std::vector<double> flags(sample.size());
    std::vector<std::size_t> rows(sample.size());
    for (std::size_t i = 0; i < sample.size(); ++i) {
      flags[i] = sample.records[i].traveler ? 1.0 : 0.0;
      rows[i] = i;
    }
    const auto adj = fit_for("traveler", flags, rows);
    estimates["traveler_proportion"] = to_json(traveler_proportion(sample, adj));
  }

  json report;
  report["weights"] = a.weights.empty() ? "none" : "file";
  report["n_cases"] = sample.size();
  report["kish_n_eff"] = sample.kish_n_eff;
  report["rejected"] = rejections_json(ll);
  report["estimates"] = estimates;
  if (w) report["spatial"] = spatial_notes;

  if (!a.groupby.empty() && want_delay) {
    const auto labels = group_labels(sample.records, a.groupby);
    const auto adj = models.count("delay") ? SpatialAdjustment{&models["delay"]} : SpatialAdjustment{};
    const auto summary = delay_summary(sample, labels, adj);
    json groups = json::array(), diffs = json::array();
    for (const auto& ge : summary.groups) {
      auto o = to_json(ge.estimate);
      groups.push_back({{"label", ge.label}, {"estimate", o}, {"excluded", ge.excluded}});
    }
    for (const auto& ge : summary.differences) diffs.push_back({{"label", ge.label}, {"estimate", to_json(ge.estimate)}});
    report["delay_by_group"] = {{"groupby", a.groupby}, {"groups", groups}, {"differences", diffs}};
  }

  if (!a.age_bins.empty() || !a.age_table.empty()) {
    if (!regions) throw InputError("relative risk by age needs --regions");
    AgeBinOptions opt;
    if (!a.age_bins.empty()) opt.edges = parse_number_list(a.age_bins, "--age-bins");
    opt.reference_bin = a.reference_bin;
    if (!a.age_dist.empty()) opt.fallback_distribution = parse_number_list(a.age_dist, "--age-dist");
    const auto table = relative_risk_by_age(sample, *regions, opt);
    json bins = json::array();
    for (std::size_t b = 0; b < table.bins(); ++b) {
      bins.push_back({{"lo", table.edges[b]},
                      {"hi", table.edges[b + 1]},
                      {"raw_count", table.raw_counts[b]},
                      {"weighted_count", table.weighted_counts[b]},
                      {"exposure", table.exposure[b]},
                      {"rate", number_or_null(table.rate[b])},
                      {"relative_risk", number_or_null(table.relative_risk[b])}});
    }
    report["age_table"] = {{"reference_bin", table.reference_bin}, {"bins", bins}};
    if (!a.age_table.empty()) {
      write_file(a.age_table, age_table_csv(table));
      m.outputs.push_back(a.age_table);
    }
  }

  if (!a.out.empty()) m.outputs.push_back(a.out);
  json full;
  full["manifest"] = m.to_json();
  for (auto& [k, v] : report.items()) full[k] = v;
  if (!a.out.empty()) write_file(a.out, dump(full));
  if (g.pretty) {
    out << "weights: " << full["weights"].get<std::string>() << ", n = " << sample.size()
        << ", kish n_eff = " << sample.kish_n_eff << "\n";
    print_estimates(out, estimates);
    if (full.contains("delay_by_group")) {
      std::vector<std::vector<std::string>> rows;
      for (const auto& ge : full["delay_by_group"]["groups"]) {
        rows.push_back({ge["label"].get<std::string>(), fmt(ge["estimate"]["value"]), fmt(ge["estimate"]["se_naive"]),
                        fmt(ge["estimate"]["se_adjusted"]), fmt(ge["estimate"]["n"])});
      }
      out << "\n";
      print_table(out, {"group", "mean_delay", "se_naive", "se_adjusted", "n"}, rows);
    }
  } else if (a.out.empty()) {
    out << dump(full);
  }
  return kOk;
}

struct CorrelateArgs {
  std::string cases, regions, out, edges, export_w;
  std::string scheme = "knn:4";
  std::string var = "age";
  std::size_t perms = 999;
  std::uint64_t seed = 0;
};

int cmd_correlate(const CorrelateArgs& a, const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  Manifest m;
  m.command = "correlate";
  m.seed = a.seed;
  const auto regions = parse_regions(m.input("regions", a.regions));
  const auto ll = parse_line_list(m.input("cases", a.cases), &regions);
  warn_rejections(ll, err);
  m.config = {{"scheme", a.scheme}, {"var", a.var}, {"perms", a.perms}};

  const auto w = build_weight_matrix(regions, resolve_scheme(a.scheme, regions, load_edges(m, a.edges)), true);
  const auto sample = unit_weights(ll.records);
  const auto d = extract(sample, parse_variable(a.var));
  const auto idx = region_indices(sample.records, d.rows, regions);

  const auto counts = region_counts(idx, w.size());
  std::vector<double> sums(w.size(), 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) sums[idx[i]] += d.values[i];
  std::vector<std::size_t> observed;
  std::vector<double> means;
  for (std::size_t l = 0; l < w.size(); ++l) {
    if (counts[l] > 0) {
      observed.push_back(l);
      means.push_back(sums[l] / counts[l]);
    }
  }
  if (observed.size() < 3) throw StatError("Moran's I needs at least 3 regions with data");
  const auto sub = observed.size() == w.size() ? w : subset(w, observed, /*restandardize=*/true);
  const auto moran = morans_i(means, sub, a.perms, a.seed, resolve_threads(g.threads));

  json report;
  report["manifest"] = m.to_json();
  report["var"] = a.var;
  report["scheme"] = w.scheme;
  report["regions_with_data"] = observed.size();
  report["morans_i"] = moran.statistic;
  report["expected"] = moran.expected;
  report["p_perm"] = moran.p_perm;
  report["n_perm"] = moran.n_perm;
  report["sided"] = "two-sided";
  try {
    const auto fit = fit_spatial_model(d.values, idx, w);
    const auto ess = effective_sample_size(counts, fit.model);
    report["rho_hat"] = fit.model.rho;
    report["tau2"] = fit.model.tau2;
    report["sigma_e2"] = fit.model.sigma_e2;
    report["n_eff"] = ess.spatial_n_eff;
    report["deff"] = ess.deff;
    report["sar_rho_regional_means"] = fit.sar ? json(fit.sar->rho) : json(nullptr);
    report["notes"] = fit.notes;
  } catch (const StatError& e) {
    report["rho_hat"] = nullptr;
    report["tau2"] = nullptr;
    report["sigma_e2"] = nullptr;
    report["n_eff"] = nullptr;
    report["deff"] = nullptr;
    report["notes"] = std::string("spatial model not fitted: ") + e.what();
  }

  if (!a.export_w.empty()) {
    write_file(a.export_w, weight_matrix_csv(w));
    write_file(a.export_w + ".json", dump(weight_matrix_header(w)));
    report["manifest"]["outputs"].push_back(a.export_w);
    report["manifest"]["outputs"].push_back(a.export_w + ".json");
  }
  if (!a.out.empty()) {
    report["manifest"]["outputs"].push_back(a.out);
    write_file(a.out, dump(report));
  }
  if (g.pretty) {
    print_table(out, {"quantity", "value"},
                {{"morans_i", fmt(report["morans_i"])},
                 {"p_perm", fmt(report["p_perm"])},
                 {"rho_hat", fmt(report["rho_hat"])},
                 {"tau2", fmt(report["tau2"])},
                 {"sigma_e2", fmt(report["sigma_e2"])},
                 {"n_eff", fmt(report["n_eff"])},
                 {"deff", fmt(report["deff"])}});
  } else if (a.out.empty()) {
    out << dump(report);
  }
  return kOk;
}

struct TestArgs {
  std::string cases, regions, out, edges, deff;
  std::string groupby = "group_label";
  std::string method = "mann_whitney";
  std::string adjust = "none";
  std::string mode = "auto";
  std::string var = "delay";
  std::string scheme = "knn:4";
  std::size_t perms = 999;
  std::uint64_t seed = 0;
};

int cmd_test(const TestArgs& a, const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  Manifest m;
  m.command = "test";
  m.seed = a.seed;
  std::optional<RegionTable> regions;
  if (!a.regions.empty()) regions = parse_regions(m.input("regions", a.regions));
  const auto ll = parse_line_list(m.input("cases", a.cases), regions ? &*regions : nullptr);
  warn_rejections(ll, err);
  const auto method = parse_test_method(a.method);
  const auto adjustment = parse_adjustment(a.adjust);
  const auto mode = parse_mw_mode(a.mode);
  m.config = {{"groupby", a.groupby}, {"method", to_string(method)}, {"adjust", to_string(adjustment)},
              {"mode", a.mode},       {"var", a.var},                {"perms", a.perms}};

  const auto sample = unit_weights(ll.records);
  const auto d = extract(sample, parse_variable(a.var));
  const auto labels = group_labels(sample.records, a.groupby);

  std::set<std::string> label_set;
  for (auto i : d.rows) {
    if (labels[i]) label_set.insert(*labels[i]);
  }
  const std::vector<std::string> label_order(label_set.begin(), label_set.end());
  if (label_order.size() < 2) throw StatError("grouping yields fewer than 2 nonempty groups");
  std::map<std::string, int> label_index;
  for (std::size_t k = 0; k < label_order.size(); ++k) label_index[label_order[k]] = static_cast<int>(k);

  // Region indices: from the regions file when given, else sorted case region ids.
  std::map<std::string, std::size_t> region_index;
  if (regions) {
    for (std::size_t l = 0; l < regions->size(); ++l) region_index[(*regions)[l].region_id] = l;
  } else {
    for (const auto& r : sample.records) region_index.emplace(r.region_id, 0);
    std::size_t k = 0;
    for (auto& [id, idx] : region_index) idx = k++;
  }

  GroupedSample data;
  std::vector<std::size_t> rows;
  for (std::size_t j = 0; j < d.rows.size(); ++j) {
    const auto i = d.rows[j];
    if (!labels[i]) continue;
    data.values.push_back(d.values[j]);
    data.group.push_back(label_index[*labels[i]]);
    data.region.push_back(region_index.at(sample.records[i].region_id));
    rows.push_back(i);
  }

  std::vector<double> deff;
  std::string deff_source;
  if (adjustment == Adjustment::ess) {
    if (!a.deff.empty()) {
      deff = parse_number_list(a.deff, "--deff");
      if (deff.size() != label_order.size()) {
        throw InputError("--deff needs one value per group (" + std::to_string(label_order.size()) + ")");
      }
      deff_source = "supplied";
    } else if (regions) {
      const auto w = build_weight_matrix(*regions, resolve_scheme(a.scheme, *regions, load_edges(m, a.edges)), true);
      const auto fit = fit_spatial_model(data.values, data.region, w, data.group);
      deff.assign(label_order.size(), 1.0);
      for (std::size_t k = 0; k < label_order.size(); ++k) {
        std::vector<double> gc(w.size(), 0.0);
        double ng = 0.0;
        for (std::size_t i = 0; i < data.values.size(); ++i) {
          if (data.group[i] == static_cast<int>(k)) {
            gc[data.region[i]] += 1.0;
            ng += 1.0;
          }
        }
        deff[k] = std::max(1.0, ng / effective_sample_size(gc, fit.model).spatial_n_eff);
      }
      deff_source = "fitted spatial model (" + w.scheme + ")";
      m.config["scheme"] = a.scheme;
    } else {
      throw InputError("ess adjustment needs --deff or --regions");
    }
  }

  TestResult r;
  if (adjustment == Adjustment::none) {
    std::vector<std::vector<double>> groups(label_order.size());
    for (std::size_t i = 0; i < data.values.size(); ++i) groups[static_cast<std::size_t>(data.group[i])].push_back(data.values[i]);
    if (method == TestMethod::mann_whitney) {
      if (groups.size() != 2) throw StatError("Mann-Whitney needs exactly 2 groups");
      r = mann_whitney(groups[0], groups[1], mode);
    } else {
      r = kruskal_wallis(groups);
    }
    r.adjustment = Adjustment::none;
  } else {
    PermutationOptions opt;
    opt.n_perm = a.perms;
    opt.seed = a.seed;
    opt.threads = resolve_threads(g.threads);
    r = adjusted_test(method, data, adjustment, deff, opt);
  }

  json report = to_json(r);
  json groups = json::array();
  for (std::size_t k = 0; k < label_order.size(); ++k) {
    std::size_t n = 0;
    for (int gi : data.group) n += gi == static_cast<int>(k);
    groups.push_back({{"label", label_order[k]},
                      {"n", n},
                      {"deff", k < r.deff_per_group.size() ? json(r.deff_per_group[k]) : json(1.0)}});
  }
  report["groups"] = groups;
  report["seed"] = a.seed;
  report["var"] = a.var;
  if (!deff_source.empty()) report["deff_source"] = deff_source;
  if (!a.out.empty()) m.outputs.push_back(a.out);
  json full;
  full["manifest"] = m.to_json();
  for (auto& [k, v] : report.items()) full[k] = v;
  if (!a.out.empty()) write_file(a.out, dump(full));
  if (g.pretty) {
    out << to_string(r.method) << " (" << to_string(r.adjustment) << "), two-sided\n";
    std::vector<std::vector<std::string>> rows;
    for (const auto& gr : groups) rows.push_back({gr["label"].get<std::string>(), fmt(gr["n"]), fmt(gr["deff"])});
    print_table(out, {"group", "n", "deff"}, rows);
    out << "statistic = " << fmt(full["statistic"]) << ", p_naive = " << fmt(full["p_naive"])
        << ", p_adjusted = " << fmt(full["p_adjusted"]) << "\n";
  } else if (a.out.empty()) {
    out << dump(full);
  }
  return kOk;
}

struct SimulateArgs {
  std::string config, out, trace, plot;
  std::optional<std::size_t> reps;
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const SimulateArgs& a, const GlobalOptions& g, std::ostream& out, std::ostream&) {
  Manifest m;
  m.command = "simulate";
  json cfg_json = json::object();
  if (!a.config.empty()) {
    const auto text = m.input("config", a.config);
    try {
      cfg_json = json::parse(text);
    } catch (const json::parse_error& e) {
      throw InputError("config '" + a.config + "' is not valid JSON: " + e.what());
    }
  }
  if (a.reps) cfg_json["reps"] = *a.reps;
  if (a.seed) cfg_json["seed"] = *a.seed;
  const SimConfig config = sim_config_from_json(cfg_json);
  m.config = to_json(config);
  m.seed = config.seed;

  const auto report = run_experiment(config, resolve_threads(g.threads), !a.trace.empty());
  json j;
  j["manifest"] = json::object();
  const json body = to_json(report);
  for (const auto& [k, v] : body.items()) j[k] = v;
  if (!a.trace.empty()) {
    write_file(a.trace, trace_csv(report));
    m.outputs.push_back(a.trace);
  }
  if (!a.plot.empty()) {
    write_file(a.plot, svg_plot(report));
    m.outputs.push_back(a.plot);
  }
  if (!a.out.empty()) m.outputs.push_back(a.out);
  j["manifest"] = m.to_json();
  if (!a.out.empty()) write_file(a.out, dump(j));

  if (g.pretty) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : j["estimators"]) {
      rows.push_back({e["name"].get<std::string>(), fmt(e["true_value"]), fmt(e["bias_naive"]), fmt(e["bias_weighted"]),
                      fmt(e["rmse_naive"]), fmt(e["rmse_weighted"])});
    }
    print_table(out, {"estimator", "true", "bias_naive", "bias_weighted", "rmse_naive", "rmse_weighted"}, rows);
    out << "\n";
    rows.clear();
    for (const auto& t : j["tests"]["variants"]) {
      rows.push_back({t["name"].get<std::string>(), fmt(t["rejection_rate"]), fmt(t["mcse"]), fmt(t["valid_reps"])});
    }
    print_table(out, {"test", "rejection_rate", "mcse", "valid_reps"}, rows);
  } else if (a.out.empty()) {
    out << dump(j);
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"crowdstat: bias and correlation corrections for crowdsourced case data"};
  app.set_version_flag("--version", std::string(CROWDSTAT_VERSION));
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--threads", g.threads, "Worker threads (default: CROWDSTAT_THREADS or hardware)");
  app.add_flag("--pretty", g.pretty, "Print human-readable tables to standard output");

  WeightsArgs wa;
  auto* weights = app.add_subcommand("weights", "Post-sampling ratios and case weights");
  weights->add_option("--cases", wa.cases, "Cases CSV")->required();
  weights->add_option("--regions", wa.regions, "Regions CSV")->required();
  weights->add_option("--target-n", wa.target_n, "Reference design size (default: number of cases)");
  weights->add_option("--normalization", wa.normalization, "raw or sum_to_n");
  weights->add_option("--out", wa.out, "Output directory")->required();
  weights->add_flag("--merge-strata", wa.merge, "Pool uncovered strata with their nearest neighbour");

  EstimateArgs ea;
  auto* estimate = app.add_subcommand("estimate", "Weighted estimates with naive and adjusted SEs");
  estimate->add_option("--cases", ea.cases, "Cases CSV")->required();
  estimate->add_option("--weights", ea.weights, "Weights CSV (omit for unweighted)");
  estimate->add_option("--var", ea.var, "age, delay, traveler or all");
  estimate->add_option("--groupby", ea.groupby, "group_label, region or cutoff:YYYY-MM-DD (delay by group)");
  estimate->add_option("--regions", ea.regions, "Regions CSV (enables spatial SEs and age tables)");
  estimate->add_option("--scheme", ea.scheme, "Weight scheme: rook, knn:K, idw:P or edges");
  estimate->add_option("--edges", ea.edges, "Edges CSV for --scheme edges");
  estimate->add_option("--age-bins", ea.age_bins, "Comma-separated bin edges, e.g. 0,20,40,60,120");
  estimate->add_option("--age-dist", ea.age_dist, "Fallback age distribution over the bins");
  estimate->add_option("--reference-bin", ea.reference_bin, "Reference bin index for relative risks");
  estimate->add_option("--age-table", ea.age_table, "Write the age table CSV here");
  estimate->add_option("--out", ea.out, "Report JSON path (default: stdout)");

  CorrelateArgs ca;
  auto* correlate = app.add_subcommand("correlate", "Moran's I and spatial model fit");
  correlate->add_option("--cases", ca.cases, "Cases CSV")->required();
  correlate->add_option("--regions", ca.regions, "Regions CSV")->required();
  correlate->add_option("--scheme", ca.scheme, "Weight scheme: rook, knn:K, idw:P or edges");
  correlate->add_option("--edges", ca.edges, "Edges CSV for --scheme edges");
  correlate->add_option("--var", ca.var, "age or delay");
  correlate->add_option("--perms", ca.perms, "Permutations");
  correlate->add_option("--seed", ca.seed, "Seed");
  correlate->add_option("--export-w", ca.export_w, "Write the weight matrix edge list (plus .json header)");
  correlate->add_option("--out", ca.out, "Report JSON path (default: stdout)");

  TestArgs ta;
  auto* test = app.add_subcommand("test", "Rank tests with naive and adjusted p values");
  test->add_option("--cases", ta.cases, "Cases CSV")->required();
  test->add_option("--groupby", ta.groupby, "group_label, region or cutoff:YYYY-MM-DD");
  test->add_option("--method", ta.method, "mann_whitney (wilcoxon) or kruskal_wallis");
  test->add_option("--adjust", ta.adjust, "none, ess, region_perm or block_perm");
  test->add_option("--mode", ta.mode, "Mann-Whitney mode without adjustment: exact, normal or auto");
  test->add_option("--var", ta.var, "age or delay");
  auto* deff_opt = test->add_option("--deff", ta.deff, "Comma-separated design effect per group (ess)");
  auto* regions_opt = test->add_option("--regions", ta.regions, "Regions CSV (ess: fit design effects)");
  deff_opt->excludes(regions_opt);
  test->add_option("--scheme", ta.scheme, "Weight scheme when fitting design effects");
  test->add_option("--edges", ta.edges, "Edges CSV for --scheme edges");
  test->add_option("--perms", ta.perms, "Permutations");
  test->add_option("--seed", ta.seed, "Seed");
  test->add_option("--out", ta.out, "Report JSON path (default: stdout)");

  SimulateArgs sa;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo experiment");
  simulate->add_option("--config", sa.config, "SimConfig JSON (defaults when omitted)");
  simulate->add_option("--reps", sa.reps, "Override reps");
  simulate->add_option("--seed", sa.seed, "Override seed");
  simulate->add_option("--out", sa.out, "Report JSON path (default: stdout)");
  simulate->add_option("--trace", sa.trace, "Per-replicate CSV trace");
  simulate->add_option("--plot", sa.plot, "SVG plot of bias and rejection rates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*weights) return cmd_weights(wa, g, out, err);
    if (*estimate) return cmd_estimate(ea, g, out, err);
    if (*correlate) return cmd_correlate(ca, g, out, err);
    if (*test) return cmd_test(ta, g, out, err);
    if (*simulate) return cmd_simulate(sa, g, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kInputError;
  } catch (const StatError& e) {
    err << "error: " << e.what() << "\n";
    return kStatError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kStatError;
  }
  return kInputError;
}

}  // namespace crowdstat::cli
