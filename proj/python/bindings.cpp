#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "crowdstat/design_weights.hpp"
#include "crowdstat/errors.hpp"
#include "crowdstat/estimators.hpp"
#include "crowdstat/line_list.hpp"
#include "crowdstat/mc_sim.hpp"
#include "crowdstat/rank_tests.hpp"
#include "crowdstat/report_json.hpp"
#include "crowdstat/spatial.hpp"

namespace py = pybind11;
using namespace crowdstat;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

WeightMatrix matrix_from(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw InputError("weight matrix must be square");
  WeightMatrix w;
  w.w = m;
  w.scheme = "matrix";
  w.row_standardized = true;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double s = m.row(i).sum();
    if (s != 0.0 && std::abs(s - 1.0) > 1e-9) w.row_standardized = false;
    w.region_ids.push_back(std::to_string(i));
  }
  return w;
}

const char* sex_name(const std::optional<Sex>& s) {
  if (!s) return nullptr;
  switch (*s) {
    case Sex::male: return "M";
    case Sex::female: return "F";
    default: return "unknown";
  }
}

py::dict record_dict(const CaseRecord& r) {
  py::dict d;
  d["case_id"] = r.case_id;
  d["region_id"] = r.region_id;
  d["age"] = r.age;
  const char* sex = sex_name(r.sex);
  d["sex"] = sex ? py::object(py::str(sex)) : py::none();
  d["onset_date"] = format_date(r.onset_date);
  d["care_date"] = r.care_date ? py::object(py::str(format_date(*r.care_date))) : py::none();
  d["traveler"] = r.traveler;
  d["group_label"] = r.group_label ? py::object(py::str(*r.group_label)) : py::none();
  const auto delay = compute_delay(r);
  d["delay"] = delay ? py::object(py::int_(delay->value)) : py::none();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "crowdstat C++ core";
  // Registered in this order so `except InputError` never swallows a StatError.
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<StatError>(m, "StatError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("version", [] { return std::string(CROWDSTAT_VERSION); });

  m.def(
      "parse_line_list",
      [](const std::string& cases_csv, std::optional<std::string> regions_csv) {
        std::optional<RegionTable> regions;
        if (regions_csv) regions = parse_regions(*regions_csv);
        const auto list = parse_line_list(cases_csv, regions ? &*regions : nullptr);
        py::list records, rejected;
        for (const auto& r : list.records) records.append(record_dict(r));
        for (const auto& r : list.rejected) {
          py::dict d;
          d["row"] = r.row;
          d["reason"] = r.reason;
          rejected.append(d);
        }
        py::dict out;
        out["records"] = records;
        out["rejected"] = rejected;
        return out;
      },
      py::arg("cases_csv"), py::arg("regions_csv") = py::none(),
      "Parses a case line list from CSV text. Invalid rows are reported, not fatal.");

  m.def(
      "largest_remainder_allocation",
      [](const std::vector<std::int64_t>& populations, std::int64_t total) {
        return largest_remainder_allocation(populations, total);
      },
      py::arg("populations"), py::arg("total"));

  m.def(
      "post_sampling_weights",
      [](const std::string& cases_csv, const std::string& regions_csv, std::optional<std::int64_t> target_n,
         bool merge, const std::string& normalization) {
        const auto regions = parse_regions(regions_csv);
        const auto cases = parse_line_list(cases_csv, &regions).records;
        const DesignSpec design{target_n.value_or(static_cast<std::int64_t>(cases.size()))};
        const auto required = target_allocation(design, regions);
        auto ratios = post_sampling_ratios(required, observed_counts(cases));
        if (merge) ratios = merge_strata(ratios, regions);
        Normalization norm;
        if (normalization == "raw") norm = Normalization::raw;
        else if (normalization == "sum_to_n") norm = Normalization::sum_to_n;
        else throw InputError("normalization must be raw or sum_to_n");
        py::list rows;
        for (const auto& r : ratios) {
          py::dict d;
          d["region_id"] = r.region_id;
          d["required"] = r.required_n;
          d["observed"] = r.observed_n;
          d["ps"] = r.ps ? py::object(py::float_(*r.ps)) : py::none();
          d["flag"] = to_string(r.flag);
          d["merged_into"] = r.merged_into ? py::object(py::str(*r.merged_into)) : py::none();
          rows.append(d);
        }
        const auto sample = attach_weights(cases, ratios, norm);
        py::dict out;
        out["ratios"] = rows;
        out["weights"] = sample.weights;
        out["case_ids"] = [&] {
          std::vector<std::string> ids;
          for (const auto& r : sample.records) ids.push_back(r.case_id);
          return ids;
        }();
        out["kish_n_eff"] = sample.kish_n_eff;
        return out;
      },
      py::arg("cases_csv"), py::arg("regions_csv"), py::arg("target_n") = py::none(), py::arg("merge") = false,
      py::arg("normalization") = "sum_to_n");

  m.def("kish_effective_size", [](const std::vector<double>& w) { return kish_effective_size(w); });

  m.def(
      "weighted_mean",
      [](const std::vector<double>& x, std::optional<std::vector<double>> w, std::optional<double> n_eff) {
        const std::vector<double> ones(x.size(), 1.0);
        return to_py(to_json(weighted_mean(x, w ? *w : ones, n_eff)));
      },
      py::arg("x"), py::arg("w") = py::none(), py::arg("spatial_n_eff") = py::none());

  m.def(
      "weighted_median",
      [](const std::vector<double>& x, std::optional<std::vector<double>> w) {
        const std::vector<double> ones(x.size(), 1.0);
        return weighted_median(x, w ? *w : ones);
      },
      py::arg("x"), py::arg("w") = py::none());

  m.def(
      "rook_grid", [](int side, bool standardize) { return rook_grid(side, standardize).w; }, py::arg("side"),
      py::arg("row_standardize") = true);

  m.def(
      "morans_i",
      [](const std::vector<double>& values, const Eigen::MatrixXd& w, std::size_t n_perm, std::uint64_t seed) {
        return to_py(to_json(morans_i(values, matrix_from(w), n_perm, seed)));
      },
      py::arg("values"), py::arg("w"), py::arg("n_perm") = 999, py::arg("seed") = 0);

  m.def(
      "effective_sample_size",
      [](const std::vector<double>& counts, const Eigen::MatrixXd& w, double rho, double tau2, double sigma_e2) {
        const auto model = make_spatial_model(matrix_from(w), rho, tau2, sigma_e2);
        return to_py(to_json(effective_sample_size(counts, model)));
      },
      py::arg("counts"), py::arg("w"), py::arg("rho"), py::arg("tau2"), py::arg("sigma_e2"));

  m.def("sample_variance_n_eff", &sample_variance_n_eff, py::arg("n"), py::arg("spatial_n_eff"));

  m.def(
      "mann_whitney",
      [](const std::vector<double>& x, const std::vector<double>& y, const std::string& mode) {
        return to_py(to_json(mann_whitney(x, y, parse_mw_mode(mode))));
      },
      py::arg("x"), py::arg("y"), py::arg("mode") = "auto");

  m.def(
      "kruskal_wallis",
      [](const std::vector<std::vector<double>>& groups) { return to_py(to_json(kruskal_wallis(groups))); },
      py::arg("groups"));

  m.def(
      "adjusted_test",
      [](const std::string& method, const std::vector<double>& values, const std::vector<int>& group,
         const std::vector<std::size_t>& region, const std::string& adjustment, const std::vector<double>& deff,
         std::size_t n_perm, std::uint64_t seed) {
        const GroupedSample data{values, group, region};
        const PermutationOptions opts{n_perm, seed, 1};
        return to_py(to_json(adjusted_test(parse_test_method(method), data, parse_adjustment(adjustment), deff, opts)));
      },
      py::arg("method"), py::arg("values"), py::arg("group"), py::arg("region"), py::arg("adjustment"),
      py::arg("deff") = std::vector<double>{}, py::arg("n_perm") = 999, py::arg("seed") = 0);

  m.def(
      "run_experiment",
      [](py::object config, unsigned threads) {
        const SimConfig cfg = config.is_none() ? SimConfig{} : sim_config_from_json(from_py(config));
        McReport report;
        {
          py::gil_scoped_release release;
          report = run_experiment(cfg, threads);
        }
        return to_py(to_json(report));
      },
      py::arg("config") = py::none(), py::arg("threads") = 1,
      "Monte Carlo experiment; `config` is a dict of simulation fields (defaults otherwise).");
}
