#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <vector>

#include "cli.hpp"
#include "crowdstat/report_json.hpp"
#include "support.hpp"

using crowdstat::json;
namespace cli = crowdstat::cli;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "crowdstat");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json read_json(const std::string& path) { return json::parse(testing::slurp(path)); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("sha256") {
    CHECK(cli::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(cli::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("help and usage errors") {
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"weights"}).code == cli::kInputError);
    CHECK(run({"frobnicate"}).code == cli::kInputError);
  }

  TEST_CASE("weights on the fixture line list") {
    testing::TempDir dir("weights");
    const auto r = run({"weights", "--cases", testing::data_path("cases_507.csv"), "--regions",
                        testing::data_path("regions_grid.csv"), "--out", dir.path().string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto report = read_json(dir / "weights_report.json");
    CHECK(report["required_total"] == 507);
    CHECK(report["n_cases"] == 507);
    CHECK(report["manifest"]["command"] == "weights");
    CHECK(report["manifest"]["inputs"].size() == 2);
    for (const auto& in : report["manifest"]["inputs"]) {
      if (in["role"] == "cases") {
        CHECK(in["sha256"].get<std::string>() == cli::sha256_hex(testing::slurp(testing::data_path("cases_507.csv"))));
      }
    }
    const auto ratios = testing::slurp(dir / "ratios.csv");
    std::istringstream lines(ratios);
    std::string line;
    std::getline(lines, line);
    CHECK(line.rfind("region_id,", 0) == 0);
    std::size_t rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 36);
    CHECK(std::filesystem::exists(dir / "weights.csv"));
  }

  TEST_CASE("balanced allocation gives unit ratios") {
    testing::TempDir dir("balanced");
    const auto r = run({"weights", "--cases", testing::data_path("cases_balanced.csv"), "--regions",
                        testing::data_path("regions_small.csv"), "--out", dir.path().string()});
    REQUIRE(r.code == 0);
    const auto report = read_json(dir / "weights_report.json");
    REQUIRE(report["strata"].size() == 4);
    for (const auto& s : report["strata"]) CHECK(s["ps"] == 1.0);
    CHECK(report["flag_counts"]["ok"] == 4);
  }

  TEST_CASE("uncovered strata exit 3 unless merged") {
    testing::TempDir dir("uncovered");
    const std::vector<std::string> base{"weights", "--cases", testing::data_path("cases_uncovered.csv"),
                                        "--regions", testing::data_path("regions_small.csv"), "--target-n", "10",
                                        "--out", dir.path().string()};
    const auto r = run(base);
    CHECK(r.code == cli::kStatError);
    CHECK(r.err.find("uncovered") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "ratios.csv"));
    auto merged = base;
    merged.push_back("--merge-strata");
    CHECK(run(merged).code == 0);
    bool any_merged = false;
    const auto report = read_json(dir / "weights_report.json");
    for (const auto& s : report["strata"]) any_merged |= s.contains("merged_into");
    CHECK(any_merged);
  }

  TEST_CASE("estimate with weights and spatial adjustment") {
    testing::TempDir dir("estimate");
    REQUIRE(run({"weights", "--cases", testing::data_path("cases_507.csv"), "--regions",
                 testing::data_path("regions_grid.csv"), "--out", dir.path().string()})
                .code == 0);
    const auto r = run({"estimate", "--cases", testing::data_path("cases_507.csv"), "--weights", dir / "weights.csv",
                        "--regions", testing::data_path("regions_grid.csv"), "--scheme", "rook", "--groupby",
                        "group_label", "--age-table", dir / "age.csv", "--out", dir / "est.json"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto e = read_json(dir / "est.json");
    const auto& mean_age = e["estimates"]["mean_age"];
    CHECK(mean_age["se_adjusted"].get<double>() >= mean_age["se_naive"].get<double>());
    CHECK(e["weights"] == "file");
    CHECK(e["delay_by_group"]["groups"].size() == 2);
    CHECK(e["age_table"]["bins"].size() == 4);
    CHECK(std::filesystem::exists(dir / "age.csv"));

    const auto unweighted = run({"estimate", "--cases", testing::data_path("cases_507.csv"), "--var", "age"});
    REQUIRE(unweighted.code == 0);
    CHECK(json::parse(unweighted.out)["weights"] == "none");
  }

  TEST_CASE("dirty rows are reported, clean ones analysed") {
    const auto r = run({"estimate", "--cases", testing::data_path("cases_dirty.csv"), "--var", "age"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    CHECK(j["n_cases"] == 3);
    CHECK(j["rejected"].size() == 4);
  }

  TEST_CASE("exact test on the tiny fixture") {
    const auto r = run({"test", "--cases", testing::data_path("cases_tiny.csv"), "--method", "mann_whitney",
                        "--adjust", "none", "--mode", "exact"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto j = json::parse(r.out);
    CHECK(j["p_naive"].get<double>() == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(j["exact"] == true);
    CHECK(j["sided"] == "two-sided");
    // Four cases in one region: no exchangeable units for a permutation test.
    CHECK(run({"test", "--cases", testing::data_path("cases_tiny.csv"), "--adjust", "region_perm"}).code ==
          cli::kStatError);
  }

  TEST_CASE("ess test from a fitted model and from explicit design effects") {
    const auto fitted = run({"test", "--cases", testing::data_path("cases_507.csv"), "--adjust", "ess", "--regions",
                             testing::data_path("regions_grid.csv"), "--scheme", "rook"});
    REQUIRE_MESSAGE(fitted.code == 0, fitted.err);
    CHECK(json::parse(fitted.out)["deff_source"].get<std::string>().rfind("fitted", 0) == 0);
    const auto given = run({"test", "--cases", testing::data_path("cases_507.csv"), "--adjust", "ess", "--deff",
                            "2,2"});
    REQUIRE_MESSAGE(given.code == 0, given.err);
    const auto j = json::parse(given.out);
    CHECK(j["p_adjusted"].get<double>() >= j["p_naive"].get<double>());
    CHECK(run({"test", "--cases", testing::data_path("cases_507.csv"), "--adjust", "ess", "--deff", "0.5,2"}).code ==
          cli::kStatError);
  }

  TEST_CASE("region permutation test is seed-deterministic") {
    const std::vector<std::string> args{"test",     "--cases", testing::data_path("cases_507.csv"), "--adjust",
                                        "region_perm", "--perms", "199", "--seed", "9"};
    const auto a = run(args), b = run(args);
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(a.out == b.out);
  }

  TEST_CASE("Moran's I on the checkerboard") {
    testing::TempDir dir("correlate");
    const auto r = run({"correlate", "--cases", testing::data_path("cases_checkerboard.csv"), "--regions",
                        testing::data_path("regions_checkerboard.csv"), "--scheme", "rook", "--perms", "199",
                        "--export-w", dir / "w.csv"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto j = json::parse(r.out);
    CHECK(j["morans_i"].get<double>() == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(j["p_perm"].get<double>() <= 0.01);
    CHECK(std::filesystem::exists(dir / "w.csv"));
    CHECK(read_json(dir / "w.csv.json")["row_standardized"] == true);
  }

  TEST_CASE("simulate: config errors and determinism") {
    testing::TempDir dir("simulate");
    const auto bad = run({"simulate", "--config", testing::data_path("sim_bad.json")});
    CHECK(bad.code == cli::kConfigError);
    CHECK(bad.err.find("rho") != std::string::npos);
    {
      std::ofstream(dir / "broken.json") << "{\"grid_side\": ";
    }
    CHECK(run({"simulate", "--config", dir / "broken.json"}).code == cli::kInputError);
    CHECK(run({"simulate", "--config", dir / "missing.json"}).code == cli::kInputError);

    const std::vector<std::string> args{"simulate", "--config", testing::data_path("sim_small.json"), "--reps", "10",
                                        "--out", dir / "sim.json", "--trace", dir / "trace.csv", "--plot",
                                        dir / "plot.svg"};
    REQUIRE(run(args).code == 0);
    const auto first = testing::slurp(dir / "sim.json");
    auto threaded = args;
    threaded.insert(threaded.begin(), {"--threads", "3"});
    REQUIRE(run(threaded).code == 0);
    CHECK(testing::slurp(dir / "sim.json") == first);
    const auto j = json::parse(first);
    CHECK(j["reps"] == 10);
    CHECK(j["manifest"]["seed"] == 7);
    CHECK(testing::slurp(dir / "plot.svg").rfind("<svg", 0) == 0);
  }
}
