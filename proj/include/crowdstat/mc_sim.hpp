#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crowdstat/line_list.hpp"
#include "crowdstat/rng.hpp"
#include "crowdstat/spatial.hpp"

namespace crowdstat {

enum class SelectionChannel { latent_field, independent_covariate };
/// by_region: whole regions form the groups (half of the regions, chosen at
/// random each replicate). within_region: fair coin per individual.
enum class GroupScheme { by_region, within_region };

const char* to_string(SelectionChannel c);
const char* to_string(GroupScheme g);

struct SimConfig {
  int grid_side = 6;
  std::int64_t region_population = 1000;
  double rho = 0.5;
  double tau = 1.0;
  double sigma_e = 1.0;
  double mu = 0.0;
  double beta = 0.0;
  double selection_gamma = 1.5;
  SelectionChannel selection_channel = SelectionChannel::latent_field;
  GroupScheme group_scheme = GroupScheme::by_region;
  std::int64_t sample_size = 507;
  std::int64_t target_total_n = 507;
  std::size_t reps = 2000;
  std::uint64_t seed = 20200118;
  double alpha = 0.05;
  std::size_t n_perm = 999;
  /// Replace post-sampling weights with 1 (naive and weighted then coincide).
  bool force_unit_weights = false;
};

/// Throws ConfigError naming the first offending field.
void validate(const SimConfig& config);

/// u = tau (I - rho W)^{-1} eps with eps iid N(0, 1). Factorizes once.
class LatentFieldSampler {
 public:
  LatentFieldSampler(const WeightMatrix& w, double rho);
  std::vector<double> draw(double tau, Xoshiro256& rng) const;
  std::size_t size() const noexcept { return n_; }

 private:
  std::size_t n_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

/// One-shot form of LatentFieldSampler::draw. Throws StatError when
/// I - rho W is singular.
std::vector<double> simulate_latent_field(const WeightMatrix& w, double rho, double tau, Xoshiro256& rng);

/// Individuals stored region by region: region r owns
/// [r * region_population, (r + 1) * region_population).
struct Population {
  std::vector<std::size_t> region;
  std::vector<int> group;
  std::vector<double> outcome;
  std::size_t regions = 0;
  std::int64_t region_population = 0;
};

/// outcome_i = mu + beta g_i + u_region(i) + sigma_e e_i.
Population simulate_population(const SimConfig& config, const std::vector<double>& field, Xoshiro256& rng);

/// Sequential draws without replacement, P(i) proportional to
/// exp(gamma * score_region(i)). Implemented as region-then-member draws,
/// which has the same law. Returns population indices in draw order.
std::vector<std::size_t> convenience_sample(const Population& population, const std::vector<double>& score,
                                            double gamma, std::int64_t sample_size, Xoshiro256& rng);

/// Everything measured in one replicate.
struct ReplicateResult {
  double true_mean = 0.0;
  double true_median = 0.0;
  double naive_mean = 0.0, naive_mean_se = 0.0, naive_mean_se_adjusted = 0.0;
  double weighted_mean = 0.0, weighted_mean_se = 0.0, weighted_mean_se_adjusted = 0.0;
  double naive_median = 0.0, weighted_median = 0.0;
  std::optional<double> p_naive, p_ess, p_perm;
  double kish_n_eff = 0.0;
  double spatial_n_eff = 0.0;
  std::optional<double> rho_hat;
  std::size_t merged_strata = 0;
  std::size_t observed_regions = 0;
  bool spatial_fit_failed = false;
};

struct ArmSummary {
  double mean = 0.0;
  double bias = 0.0;
  double bias_mcse = 0.0;
  double rmse = 0.0;
  double empirical_se = 0.0;
  std::optional<double> mean_estimated_se;
  std::optional<double> mean_adjusted_se;
  std::optional<double> coverage;
  std::optional<double> coverage_adjusted;
};

struct EstimatorSummary {
  std::string name;
  double true_value = 0.0;
  ArmSummary naive;
  ArmSummary weighted;
};

struct RejectionSummary {
  std::string name;
  double rate = 0.0;
  double mcse = 0.0;
  std::size_t valid = 0;
};

struct McReport {
  SimConfig config;
  std::vector<EstimatorSummary> estimators;
  double alpha = 0.05;
  /// naive, ess, and region_perm or block_perm depending on the group scheme.
  std::vector<RejectionSummary> tests;
  double mean_kish_n_eff = 0.0;
  double mean_spatial_n_eff = 0.0;
  std::optional<double> mean_rho_hat;
  std::size_t spatial_fit_failures = 0;
  double mean_merged_strata = 0.0;
  double mean_observed_regions = 0.0;
  /// Per-replicate results, kept when requested.
  std::vector<ReplicateResult> replicates;

  const RejectionSummary& test(const std::string& name) const;
  const EstimatorSummary& estimator(const std::string& name) const;
};

/// Replicate `rep` draws everything from Xoshiro256(mix_seed(seed, rep));
/// replicates run on `threads` workers and are aggregated in index order, so
/// the report depends only on (config, seed). A failing replicate aborts the
/// experiment with its index in the message.
McReport run_experiment(const SimConfig& config, unsigned threads = 0, bool keep_replicates = false);

/// Shared per-experiment state (grid, reference design, field factorization).
class Experiment {
 public:
  explicit Experiment(const SimConfig& config);
  ReplicateResult replicate(std::size_t rep) const;
  const WeightMatrix& weights() const noexcept { return w_; }
  const SimConfig& config() const noexcept { return config_; }

 private:
  SimConfig config_;
  WeightMatrix w_;
  RegionTable regions_;
  LatentFieldSampler field_;
  std::vector<std::int64_t> required_;
};

}  // namespace crowdstat
