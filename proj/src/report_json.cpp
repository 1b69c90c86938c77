#include "crowdstat/report_json.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "crowdstat/csv.hpp"
#include "crowdstat/errors.hpp"

namespace crowdstat {
namespace {

json optional_number(const std::optional<double>& v) { return v ? number_or_null(*v) : json(nullptr); }

json to_json(const ArmSummary& a) {
  json j;
  j["mean"] = number_or_null(a.mean);
  j["bias"] = number_or_null(a.bias);
  j["bias_mcse"] = number_or_null(a.bias_mcse);
  j["rmse"] = number_or_null(a.rmse);
  j["empirical_se"] = number_or_null(a.empirical_se);
  j["mean_estimated_se"] = optional_number(a.mean_estimated_se);
  j["mean_adjusted_se"] = optional_number(a.mean_adjusted_se);
  j["coverage"] = optional_number(a.coverage);
  j["coverage_adjusted"] = optional_number(a.coverage_adjusted);
  return j;
}

template <typename T>
T get_field(const json& j, const std::string& key) {
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) throw ConfigError(key, "expected a number");
    return v.get<double>();
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(key, "expected a string");
    return v.get<std::string>();
  } else {
    if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
      const auto s = v.get<std::int64_t>();
      if (s < 0) throw ConfigError(key, "expected a nonnegative integer");
      return static_cast<T>(s);
    } else {
      if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) {
        throw ConfigError(key, "integer out of range");
      }
      const auto s = v.get<std::int64_t>();
      if (s < std::numeric_limits<T>::min() || s > std::numeric_limits<T>::max()) {
        throw ConfigError(key, "integer out of range");
      }
      return static_cast<T>(s);
    }
  }
}

}  // namespace

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json to_json(const Estimate& e) {
  json j;
  j["value"] = number_or_null(e.value);
  j["se_naive"] = number_or_null(e.se_naive);
  j["se_adjusted"] = number_or_null(e.se_adjusted);
  j["n"] = e.n;
  j["n_eff"] = number_or_null(e.n_eff);
  j["method"] = e.method;
  if (!e.notes.empty()) j["notes"] = e.notes;
  return j;
}

json to_json(const TestResult& r) {
  json j;
  j["method"] = to_string(r.method);
  j["statistic"] = number_or_null(r.statistic);
  j["p_naive"] = number_or_null(r.p_naive);
  j["p_adjusted"] = optional_number(r.p_adjusted);
  j["adjustment"] = to_string(r.adjustment);
  j["n_perm"] = r.n_perm;
  j["sided"] = "two-sided";
  j["exact"] = r.exact;
  j["tie_correction_applied"] = r.tie_correction_applied;
  j["degenerate"] = r.degenerate;
  j["z"] = optional_number(r.z);
  j["z_adjusted"] = optional_number(r.z_adjusted);
  if (!r.notes.empty()) j["notes"] = r.notes;
  return j;
}

json to_json(const MoranResult& m) {
  json j;
  j["statistic"] = number_or_null(m.statistic);
  j["expected"] = number_or_null(m.expected);
  j["p_perm"] = number_or_null(m.p_perm);
  j["n_perm"] = m.n_perm;
  j["null_mean"] = number_or_null(m.null_mean);
  j["null_sd"] = number_or_null(m.null_sd);
  return j;
}

json to_json(const EssReport& r) {
  json j;
  j["n"] = number_or_null(r.n);
  j["n_eff"] = number_or_null(r.n_eff);
  j["deff"] = number_or_null(r.deff);
  j["components"] = {{"kish_n_eff", number_or_null(r.kish_n_eff)},
                     {"spatial_n_eff", number_or_null(r.spatial_n_eff)},
                     {"deff_weighting", number_or_null(r.deff_weighting)},
                     {"deff_spatial", number_or_null(r.deff_spatial)}};
  return j;
}

json to_json(const SimConfig& c) {
  json j;
  j["grid_side"] = c.grid_side;
  j["region_population"] = c.region_population;
  j["rho"] = c.rho;
  j["tau"] = c.tau;
  j["sigma_e"] = c.sigma_e;
  j["mu"] = c.mu;
  j["beta"] = c.beta;
  j["selection_gamma"] = c.selection_gamma;
  j["selection_channel"] = to_string(c.selection_channel);
  j["group_scheme"] = to_string(c.group_scheme);
  j["sample_size"] = c.sample_size;
  j["target_total_n"] = c.target_total_n;
  j["reps"] = c.reps;
  j["seed"] = c.seed;
  j["alpha"] = c.alpha;
  j["n_perm"] = c.n_perm;
  j["force_unit_weights"] = c.force_unit_weights;
  return j;
}

json to_json(const McReport& r) {
  json j;
  j["reps"] = r.config.reps;
  j["seed"] = r.config.seed;
  j["config"] = to_json(r.config);
  json estimators = json::array();
  for (const auto& e : r.estimators) {
    json o;
    o["name"] = e.name;
    o["true_value"] = number_or_null(e.true_value);
    o["mean_naive"] = number_or_null(e.naive.mean);
    o["mean_weighted"] = number_or_null(e.weighted.mean);
    o["bias_naive"] = number_or_null(e.naive.bias);
    o["bias_weighted"] = number_or_null(e.weighted.bias);
    o["rmse_naive"] = number_or_null(e.naive.rmse);
    o["rmse_weighted"] = number_or_null(e.weighted.rmse);
    o["naive"] = to_json(e.naive);
    o["weighted"] = to_json(e.weighted);
    estimators.push_back(std::move(o));
  }
  j["estimators"] = std::move(estimators);

  json tests;
  tests["alpha"] = r.alpha;
  tests["sided"] = "two-sided";
  tests["rejection_rate_naive"] = number_or_null(r.tests.at(0).rate);
  tests["rejection_rate_adjusted"] = number_or_null(r.tests.back().rate);
  json variants = json::array();
  for (const auto& t : r.tests) {
    variants.push_back({{"name", t.name},
                        {"rejection_rate", number_or_null(t.rate)},
                        {"mcse", number_or_null(t.mcse)},
                        {"valid_reps", t.valid}});
  }
  tests["variants"] = std::move(variants);
  j["tests"] = std::move(tests);

  j["diagnostics"] = {{"mean_kish_n_eff", number_or_null(r.mean_kish_n_eff)},
                      {"mean_spatial_n_eff", number_or_null(r.mean_spatial_n_eff)},
                      {"mean_rho_hat", optional_number(r.mean_rho_hat)},
                      {"spatial_fit_failures", r.spatial_fit_failures},
                      {"mean_merged_strata", number_or_null(r.mean_merged_strata)},
                      {"mean_observed_regions", number_or_null(r.mean_observed_regions)}};
  return j;
}

json weight_matrix_header(const WeightMatrix& w) {
  return {{"scheme", w.scheme}, {"row_standardized", w.row_standardized}, {"n", w.size()}};
}

SimConfig sim_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  SimConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "grid_side") c.grid_side = get_field<int>(j, key);
    else if (key == "region_population") c.region_population = get_field<std::int64_t>(j, key);
    else if (key == "rho") c.rho = get_field<double>(j, key);
    else if (key == "tau") c.tau = get_field<double>(j, key);
    else if (key == "sigma_e") c.sigma_e = get_field<double>(j, key);
    else if (key == "mu") c.mu = get_field<double>(j, key);
    else if (key == "beta") c.beta = get_field<double>(j, key);
    else if (key == "selection_gamma") c.selection_gamma = get_field<double>(j, key);
    else if (key == "selection_channel") {
      const auto s = get_field<std::string>(j, key);
      if (s == "latent_field") c.selection_channel = SelectionChannel::latent_field;
      else if (s == "independent_covariate") c.selection_channel = SelectionChannel::independent_covariate;
      else throw ConfigError(key, "expected latent_field or independent_covariate");
    } else if (key == "group_scheme") {
      const auto s = get_field<std::string>(j, key);
      if (s == "by_region") c.group_scheme = GroupScheme::by_region;
      else if (s == "within_region") c.group_scheme = GroupScheme::within_region;
      else throw ConfigError(key, "expected by_region or within_region");
    } else if (key == "sample_size") c.sample_size = get_field<std::int64_t>(j, key);
    else if (key == "target_total_n") c.target_total_n = get_field<std::int64_t>(j, key);
    else if (key == "reps") c.reps = get_field<std::size_t>(j, key);
    else if (key == "seed") c.seed = get_field<std::uint64_t>(j, key);
    else if (key == "alpha") c.alpha = get_field<double>(j, key);
    else if (key == "n_perm") c.n_perm = get_field<std::size_t>(j, key);
    else if (key == "force_unit_weights") c.force_unit_weights = get_field<bool>(j, key);
    else throw ConfigError(key, "unknown field");
  }
  validate(c);
  return c;
}

std::string trace_csv(const McReport& r) {
  std::ostringstream os;
  os << "rep,estimator,naive,weighted,p_naive,p_adjusted\n";
  auto p = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string{}; };
  for (std::size_t i = 0; i < r.replicates.size(); ++i) {
    const auto& rep = r.replicates[i];
    os << i << ",mean," << csv::format_double(rep.naive_mean) << ',' << csv::format_double(rep.weighted_mean) << ','
       << p(rep.p_naive) << ',' << p(rep.p_perm) << '\n';
    os << i << ",median," << csv::format_double(rep.naive_median) << ',' << csv::format_double(rep.weighted_median)
       << ',' << p(rep.p_naive) << ',' << p(rep.p_perm) << '\n';
  }
  return os.str();
}

}  // namespace crowdstat
