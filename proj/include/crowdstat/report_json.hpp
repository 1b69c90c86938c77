#pragma once

#include <json.hpp>
#include <string>

#include "crowdstat/estimators.hpp"
#include "crowdstat/mc_sim.hpp"
#include "crowdstat/rank_tests.hpp"
#include "crowdstat/spatial.hpp"

namespace crowdstat {

using json = nlohmann::ordered_json;

/// Non-finite numbers become null.
json number_or_null(double v);

json to_json(const Estimate& e);
json to_json(const TestResult& r);
json to_json(const MoranResult& m);
json to_json(const EssReport& r);
json to_json(const SimConfig& c);
json to_json(const McReport& r);

/// Header for an exported weight matrix: {scheme, row_standardized, n}.
json weight_matrix_header(const WeightMatrix& w);

/// Parses a SimConfig, starting from defaults. Unknown fields, wrong types
/// and out-of-range values throw ConfigError naming the field.
SimConfig sim_config_from_json(const json& j);

/// rep,estimator,naive,weighted,p_naive,p_adjusted
std::string trace_csv(const McReport& r);

}  // namespace crowdstat
