#include "crowdstat/mc_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

#include "crowdstat/design_weights.hpp"
#include "crowdstat/errors.hpp"
#include "crowdstat/estimators.hpp"
#include "crowdstat/parallel.hpp"
#include "crowdstat/rank_tests.hpp"

namespace crowdstat {
namespace {

// Stream tags for the draws inside one replicate.
constexpr std::uint64_t kPermStream = 0x7065726dULL;

std::string region_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%04zu", k);
  return buf;
}

RegionTable grid_regions(const SimConfig& c) {
  std::vector<Region> regions;
  const int side = c.grid_side;
  for (int k = 0; k < side * side; ++k) {
    Region r;
    r.region_id = region_id(static_cast<std::size_t>(k));
    r.name = r.region_id;
    r.population = c.region_population;
    r.x = k % side;
    r.y = k / side;
    regions.push_back(std::move(r));
  }
  return RegionTable(std::move(regions));
}

// Two-pass summaries keep the aggregation exact enough and order-fixed.
double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

ArmSummary summarize_arm(const std::vector<double>& est, const std::vector<double>& truth,
                         const std::vector<double>* se, const std::vector<double>* se_adj) {
  ArmSummary a;
  std::vector<double> err(est.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    err[i] = est[i] - truth[i];
    sq += err[i] * err[i];
  }
  a.mean = mean_of(est);
  a.bias = mean_of(err);
  a.bias_mcse = sd_of(err) / std::sqrt(static_cast<double>(est.size()));
  a.rmse = std::sqrt(sq / static_cast<double>(est.size()));
  // The target (finite-population value) varies by replicate, so the spread
  // that an SE should describe is that of the error, not of the raw estimate.
  a.empirical_se = sd_of(err);
  auto coverage = [&](const std::vector<double>& s) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < est.size(); ++i) {
      if (std::abs(err[i]) <= 1.959963984540054 * s[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(est.size());
  };
  if (se) {
    a.mean_estimated_se = mean_of(*se);
    a.coverage = coverage(*se);
  }
  if (se_adj) {
    a.mean_adjusted_se = mean_of(*se_adj);
    a.coverage_adjusted = coverage(*se_adj);
  }
  return a;
}

RejectionSummary rejection(std::string name, const std::vector<ReplicateResult>& reps,
                           std::optional<double> ReplicateResult::*field, double alpha) {
  RejectionSummary r;
  r.name = std::move(name);
  std::size_t rejected = 0;
  for (const auto& rep : reps) {
    const auto& p = rep.*field;
    if (!p) continue;
    ++r.valid;
    if (*p <= alpha) ++rejected;
  }
  if (r.valid) {
    r.rate = static_cast<double>(rejected) / static_cast<double>(r.valid);
    r.mcse = std::sqrt(r.rate * (1.0 - r.rate) / static_cast<double>(r.valid));
  }
  return r;
}

}  // namespace

const char* to_string(SelectionChannel c) {
  return c == SelectionChannel::latent_field ? "latent_field" : "independent_covariate";
}

const char* to_string(GroupScheme g) { return g == GroupScheme::by_region ? "by_region" : "within_region"; }

void validate(const SimConfig& c) {
  if (c.grid_side < 2 || c.grid_side > 20) throw ConfigError("grid_side", "must be in [2, 20]");
  if (c.region_population < 1) throw ConfigError("region_population", "must be >= 1");
  if (!std::isfinite(c.rho) || c.rho <= -1.0 || c.rho >= 1.0) {
    throw ConfigError("rho", "must lie inside the admissible interval (-1, 1) of the row-standardized rook grid");
  }
  if (!(c.tau >= 0.0) || !std::isfinite(c.tau)) throw ConfigError("tau", "must be a finite number >= 0");
  if (!(c.sigma_e >= 0.0) || !std::isfinite(c.sigma_e)) throw ConfigError("sigma_e", "must be a finite number >= 0");
  if (!std::isfinite(c.mu)) throw ConfigError("mu", "must be finite");
  if (!std::isfinite(c.beta)) throw ConfigError("beta", "must be finite");
  if (!std::isfinite(c.selection_gamma)) throw ConfigError("selection_gamma", "must be finite");
  const auto total = static_cast<std::int64_t>(c.grid_side) * c.grid_side * c.region_population;
  if (c.sample_size < 2 || c.sample_size > total) {
    throw ConfigError("sample_size", "must be in [2, total population = " + std::to_string(total) + "]");
  }
  if (c.target_total_n < 1) throw ConfigError("target_total_n", "must be >= 1");
  if (c.reps < 1) throw ConfigError("reps", "must be >= 1");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("alpha", "must be in (0, 1)");
  if (c.n_perm < 19) throw ConfigError("n_perm", "must be >= 19");
}

LatentFieldSampler::LatentFieldSampler(const WeightMatrix& w, double rho) : n_(w.size()) {
  const auto [lower, upper] = admissible_rho_interval(w);
  if (!(rho > lower && rho < upper)) throw StatError("I - rho W is singular or rho is not admissible");
  const auto n = static_cast<Eigen::Index>(n_);
  lu_.compute(Eigen::MatrixXd::Identity(n, n) - rho * w.w);
}

std::vector<double> LatentFieldSampler::draw(double tau, Xoshiro256& rng) const {
  std::normal_distribution<double> normal;
  Eigen::VectorXd eps(static_cast<Eigen::Index>(n_));
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = normal(rng);
  const Eigen::VectorXd u = tau * lu_.solve(eps);
  return {u.data(), u.data() + u.size()};
}

std::vector<double> simulate_latent_field(const WeightMatrix& w, double rho, double tau, Xoshiro256& rng) {
  return LatentFieldSampler(w, rho).draw(tau, rng);
}

Population simulate_population(const SimConfig& c, const std::vector<double>& field, Xoshiro256& rng) {
  Population p;
  p.regions = field.size();
  p.region_population = c.region_population;
  const auto total = p.regions * static_cast<std::size_t>(c.region_population);
  p.region.resize(total);
  p.group.resize(total);
  p.outcome.resize(total);

  std::vector<int> region_group(p.regions, 0);
  if (c.group_scheme == GroupScheme::by_region) {
    std::vector<std::size_t> order(p.regions);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < p.regions / 2; ++k) region_group[order[k]] = 1;
  }

  std::normal_distribution<double> normal;
  std::size_t i = 0;
  for (std::size_t r = 0; r < p.regions; ++r) {
    for (std::int64_t j = 0; j < c.region_population; ++j, ++i) {
      p.region[i] = r;
      p.group[i] = c.group_scheme == GroupScheme::by_region ? region_group[r] : static_cast<int>(rng() >> 63);
      p.outcome[i] = c.mu + c.beta * p.group[i] + field[r] + c.sigma_e * normal(rng);
    }
  }
  return p;
}

std::vector<std::size_t> convenience_sample(const Population& population, const std::vector<double>& score,
                                            double gamma, std::int64_t sample_size, Xoshiro256& rng) {
  const std::size_t L = population.regions;
  if (score.size() != L) throw InputError("selection score length does not match the regions");
  if (sample_size < 0 || static_cast<std::size_t>(sample_size) > population.outcome.size()) {
    throw StatError("sample_size exceeds the population");
  }
  // Region intensities relative to the largest score keep exp() in range.
  const double top = gamma >= 0.0 ? *std::max_element(score.begin(), score.end())
                                  : *std::min_element(score.begin(), score.end());
  std::vector<double> intensity(L);
  for (std::size_t r = 0; r < L; ++r) intensity[r] = std::exp(gamma * (score[r] - top));

  std::vector<std::vector<std::size_t>> remaining(L);
  for (std::size_t i = 0; i < population.outcome.size(); ++i) remaining[population.region[i]].push_back(i);

  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(sample_size));
  std::vector<double> mass(L);
  for (std::int64_t draw = 0; draw < sample_size; ++draw) {
    double total = 0.0;
    for (std::size_t r = 0; r < L; ++r) {
      mass[r] = intensity[r] * static_cast<double>(remaining[r].size());
      total += mass[r];
    }
    if (!(total > 0.0)) throw StatError("all selection weights are zero");
    double target = rng.uniform() * total;
    std::size_t r = 0;
    while (r + 1 < L && (target >= mass[r] || mass[r] == 0.0)) {
      target -= mass[r];
      ++r;
    }
    auto& pool = remaining[r];
    if (pool.empty()) throw StatError("all selection weights are zero");
    const auto pick = static_cast<std::size_t>(rng.uniform() * static_cast<double>(pool.size()));
    const std::size_t k = std::min(pick, pool.size() - 1);
    out.push_back(pool[k]);
    pool[k] = pool.back();
    pool.pop_back();
  }
  return out;
}

Experiment::Experiment(const SimConfig& config)
    : config_((validate(config), config)),
      w_(rook_grid(config.grid_side, /*row_standardize=*/true)),
      regions_(grid_regions(config)),
      field_(w_, config.rho) {
  const auto alloc = target_allocation(DesignSpec{config.target_total_n, Allocation::proportional_to_population},
                                       regions_);
  required_.resize(regions_.size());
  for (std::size_t k = 0; k < regions_.size(); ++k) required_[k] = alloc.at(regions_[k].region_id);
  for (std::size_t k = 0; k < regions_.size(); ++k) w_.region_ids[k] = regions_[k].region_id;
}

ReplicateResult Experiment::replicate(std::size_t rep) const {
  const auto& c = config_;
  const std::uint64_t rep_seed = mix_seed(c.seed, rep);
  Xoshiro256 rng(rep_seed);
  ReplicateResult out;

  const auto field = field_.draw(c.tau, rng);
  std::vector<double> score = field;
  if (c.selection_channel == SelectionChannel::independent_covariate) {
    std::normal_distribution<double> normal;
    for (auto& s : score) s = normal(rng);
  }
  const auto pop = simulate_population(c, field, rng);
  const auto picked = convenience_sample(pop, score, c.selection_gamma, c.sample_size, rng);

  {
    out.true_mean = mean_of(pop.outcome);
    std::vector<double> copy = pop.outcome;
    const auto mid = copy.begin() + static_cast<std::ptrdiff_t>(copy.size() / 2);
    std::nth_element(copy.begin(), mid, copy.end());
    out.true_median = *mid;
    if (copy.size() % 2 == 0) out.true_median = 0.5 * (out.true_median + *std::max_element(copy.begin(), mid));
  }

  const std::size_t n = picked.size();
  std::vector<double> y(n);
  std::vector<std::size_t> region(n);
  std::vector<int> group(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = pop.outcome[picked[i]];
    region[i] = pop.region[picked[i]];
    group[i] = pop.group[picked[i]];
  }
  const auto counts = region_counts(region, w_.size());
  out.observed_regions = static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](double v) { return v > 0; }));

  // Post-sampling weights against the proportional design on true populations.
  std::vector<double> weights(n, 1.0);
  if (!c.force_unit_weights) {
    CountMap required, observed;
    for (std::size_t k = 0; k < regions_.size(); ++k) {
      required[regions_[k].region_id] = required_[k];
      if (counts[k] > 0) observed[regions_[k].region_id] = static_cast<std::int64_t>(counts[k]);
    }
    auto ratios = post_sampling_ratios(required, observed);
    const bool needs_merge = std::any_of(ratios.begin(), ratios.end(), [](const PostSamplingRatio& r) {
      return r.flag == StratumFlag::uncovered || r.flag == StratumFlag::unrequired;
    });
    if (needs_merge) ratios = merge_strata(ratios, regions_);
    std::vector<double> ps(regions_.size(), 0.0);
    for (const auto& r : ratios) {
      if (r.flag == StratumFlag::merged) ++out.merged_strata;
      if (r.ps) ps[*regions_.index_of(r.region_id)] = *r.ps;
    }
    for (std::size_t i = 0; i < n; ++i) weights[i] = ps[region[i]];
    const double scale = static_cast<double>(n) / std::accumulate(weights.begin(), weights.end(), 0.0);
    for (auto& w : weights) w *= scale;
  }
  out.kish_n_eff = kish_effective_size(weights);

  // Spatial model fitted to the sample the analyst actually has.
  std::optional<SpatialModel> model;
  try {
    auto fit = fit_spatial_model(y, region, w_, group);
    if (fit.reml) out.rho_hat = fit.model.rho;
    model = std::move(fit.model);
  } catch (const StatError&) {
    out.spatial_fit_failed = true;
  }
  out.spatial_n_eff = model ? effective_sample_size(counts, *model).spatial_n_eff : static_cast<double>(n);
  const double se_n_eff = sample_variance_n_eff(static_cast<double>(n), out.spatial_n_eff);

  const std::vector<double> ones(n, 1.0);
  const auto naive = weighted_mean(y, ones, se_n_eff);
  const auto weighted = weighted_mean(y, weights, se_n_eff);
  out.naive_mean = naive.value;
  out.naive_mean_se = naive.se_naive;
  out.naive_mean_se_adjusted = naive.se_adjusted;
  out.weighted_mean = weighted.value;
  out.weighted_mean_se = weighted.se_naive;
  out.weighted_mean_se_adjusted = weighted.se_adjusted;
  out.naive_median = crowdstat::weighted_median(y, ones);
  out.weighted_median = crowdstat::weighted_median(y, weights);

  // Tests: naive, ESS-adjusted, and the permutation scheme matching the grouping.
  const GroupedSample data{y, group, region};
  try {
    out.p_naive = adjusted_test(TestMethod::mann_whitney, data, Adjustment::none).p_naive;
  } catch (const StatError&) {
    return out;
  }
  try {
    std::vector<double> deff(2, 1.0);
    if (model) {
      for (int g = 0; g < 2; ++g) {
        std::vector<double> gc(w_.size(), 0.0);
        double ng = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (group[i] == g) {
            gc[region[i]] += 1.0;
            ng += 1.0;
          }
        }
        deff[static_cast<std::size_t>(g)] = std::max(1.0, ng / effective_sample_size(gc, *model).spatial_n_eff);
      }
    }
    out.p_ess = adjusted_test(TestMethod::mann_whitney, data, Adjustment::ess, deff).p_adjusted;
  } catch (const StatError&) {
  }
  try {
    const auto adj = c.group_scheme == GroupScheme::by_region ? Adjustment::region_perm : Adjustment::block_perm;
    PermutationOptions opts;
    opts.n_perm = c.n_perm;
    opts.seed = mix_seed(rep_seed, kPermStream);
    opts.threads = 1;
    out.p_perm = adjusted_test(TestMethod::mann_whitney, data, adj, {}, opts).p_adjusted;
  } catch (const StatError&) {
  }
  return out;
}

const RejectionSummary& McReport::test(const std::string& name) const {
  for (const auto& t : tests) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("no test named " + name);
}

const EstimatorSummary& McReport::estimator(const std::string& name) const {
  for (const auto& e : estimators) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no estimator named " + name);
}

McReport run_experiment(const SimConfig& config, unsigned threads, bool keep_replicates) {
  const Experiment experiment(config);
  std::vector<ReplicateResult> reps(config.reps);
  parallel_for(config.reps, threads, [&](std::size_t r) {
    try {
      reps[r] = experiment.replicate(r);
    } catch (const std::exception& e) {
      throw StatError("replicate " + std::to_string(r) + ": " + e.what());
    }
  });

  McReport report;
  report.config = config;
  report.alpha = config.alpha;

  const std::size_t R = reps.size();
  auto column = [&](double ReplicateResult::*f) {
    std::vector<double> v(R);
    for (std::size_t i = 0; i < R; ++i) v[i] = reps[i].*f;
    return v;
  };

  {
    const auto truth = column(&ReplicateResult::true_mean);
    const auto se_n = column(&ReplicateResult::naive_mean_se);
    const auto se_na = column(&ReplicateResult::naive_mean_se_adjusted);
    const auto se_w = column(&ReplicateResult::weighted_mean_se);
    const auto se_wa = column(&ReplicateResult::weighted_mean_se_adjusted);
    EstimatorSummary e;
    e.name = "mean";
    e.true_value = mean_of(truth);
    e.naive = summarize_arm(column(&ReplicateResult::naive_mean), truth, &se_n, &se_na);
    e.weighted = summarize_arm(column(&ReplicateResult::weighted_mean), truth, &se_w, &se_wa);
    report.estimators.push_back(std::move(e));
  }
  {
    const auto truth = column(&ReplicateResult::true_median);
    EstimatorSummary e;
    e.name = "median";
    e.true_value = mean_of(truth);
    e.naive = summarize_arm(column(&ReplicateResult::naive_median), truth, nullptr, nullptr);
    e.weighted = summarize_arm(column(&ReplicateResult::weighted_median), truth, nullptr, nullptr);
    report.estimators.push_back(std::move(e));
  }

  report.tests.push_back(rejection("naive", reps, &ReplicateResult::p_naive, config.alpha));
  report.tests.push_back(rejection("ess", reps, &ReplicateResult::p_ess, config.alpha));
  report.tests.push_back(rejection(config.group_scheme == GroupScheme::by_region ? "region_perm" : "block_perm", reps,
                                   &ReplicateResult::p_perm, config.alpha));

  report.mean_kish_n_eff = mean_of(column(&ReplicateResult::kish_n_eff));
  report.mean_spatial_n_eff = mean_of(column(&ReplicateResult::spatial_n_eff));
  std::vector<double> rhos;
  double merged = 0.0, observed = 0.0;
  for (const auto& r : reps) {
    if (r.rho_hat) rhos.push_back(*r.rho_hat);
    if (r.spatial_fit_failed) ++report.spatial_fit_failures;
    merged += static_cast<double>(r.merged_strata);
    observed += static_cast<double>(r.observed_regions);
  }
  if (!rhos.empty()) report.mean_rho_hat = mean_of(rhos);
  report.mean_merged_strata = merged / static_cast<double>(R);
  report.mean_observed_regions = observed / static_cast<double>(R);
  if (keep_replicates) report.replicates = std::move(reps);
  return report;
}

}  // namespace crowdstat
